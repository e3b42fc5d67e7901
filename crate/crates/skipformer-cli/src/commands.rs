//! Implementations of the six subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use skipformer_core::container;
use skipformer_core::cost::trace_flops;
use skipformer_core::model::{self, Model};
use skipformer_core::numerics::argmax;
use skipformer_core::oracle::{oracle_generate, oracle_kv_grid};
use skipformer_core::policy::{resolve_schedule, skipped_fraction};
use skipformer_core::pruning::{
    apply_masks, build_masks, collect_calibration, save_masks, sparsity_report, CalibScope,
    PruneMethod,
};
use skipformer_core::runtime::{classify_tokens, generate, Session};
use skipformer_core::{ComputePolicy, PolicyMode, PromptInput, TokenScope};

use crate::config::{self, load_run_config, PromptSpec};
use crate::{in_field, Cli, CliError, CliResult, Command};

const ALL_MODES: [PolicyMode; 6] = [
    PolicyMode::Dense,
    PolicyMode::SkipBlock,
    PolicyMode::SkipFfn,
    PolicyMode::SkipSa,
    PolicyMode::ParallelFfnSa,
    PolicyMode::ParallelBlocks,
];

pub(crate) fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate => cmd_generate(&cli),
        Command::Schedule { n_layers } => cmd_schedule(&cli, *n_layers),
        Command::Prune {
            method,
            sparsity,
            scope,
            calib_dir,
        } => cmd_prune(&cli, method, *sparsity, scope, calib_dir.as_deref()),
        Command::Compare {
            max_new,
            tolerance,
            all_policies,
            corrupt_cache,
        } => cmd_compare(&cli, *max_new, *tolerance, *all_policies, *corrupt_cache),
        Command::Sweep { axis, values } => cmd_sweep(&cli, axis, values),
        Command::Synth => cmd_synth(&cli),
    }
}

fn write_output(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("output {}: {e}", path.display())))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("in-memory JSON");
    text.push('\n');
    text
}

// ==== generate ====

fn cmd_generate(cli: &Cli) -> CliResult<()> {
    let rc = load_run_config(cli.config.as_deref())?;
    let model = config::load_model(&rc.model, cli.seed)?;
    let policy = config::policy_of(&rc);
    let prompt = config::build_prompt(&rc.prompt, None)?;
    let run = generate(
        &model,
        policy,
        &prompt,
        rc.generation.max_new_tokens,
        rc.generation.eos_id,
    )?;
    let report = trace_flops(&run.trace, &model.config)?;
    let payload = serde_json::json!({
        "tokens": run.output_token_ids,
        "flops": report,
        "trace": run.trace,
    });
    let text = pretty(&payload);
    if let Some(out) = cli.output.as_ref().or(rc.output.as_ref()) {
        write_output(out, &text)?;
    }
    if cli.json {
        print!("{text}");
    } else {
        println!("tokens: {:?}", run.output_token_ids);
        println!(
            "flops: policy {} dense {} reduction {:.6}",
            report.policy_total, report.dense_total, report.reduction_ratio
        );
        println!(
            "depth: {} of {} stages",
            report.depth_stages, report.dense_depth_stages
        );
    }
    Ok(())
}

// ==== schedule ====

fn cmd_schedule(cli: &Cli, n_layers_flag: Option<usize>) -> CliResult<()> {
    let rc = load_run_config(cli.config.as_deref())?;
    let policy = config::policy_of(&rc);
    let n_layers = match n_layers_flag {
        Some(n) => n,
        None => match (&rc.model.path, &rc.model.synthetic) {
            (_, Some(spec)) => spec.config.n_layers,
            (Some(_), _) => config::load_model(&rc.model, cli.seed)?.config.n_layers,
            _ => unreachable!("validated source"),
        },
    };
    let schedule = resolve_schedule(&policy, n_layers)?;
    let fraction = skipped_fraction(&schedule);
    if cli.json {
        let actions: Vec<String> = schedule
            .actions()
            .iter()
            .map(|a| a.to_string())
            .collect();
        let payload = serde_json::json!({
            "n_layers": n_layers,
            "scope": policy.scope.to_string(),
            "actions": actions,
            "skipped_fraction": fraction,
        });
        print!("{}", pretty(&payload));
    } else {
        println!("in-scope action per layer (out-of-scope tokens always execute):");
        for (layer, action) in schedule.actions().iter().enumerate() {
            println!("{layer:>4}  {action}");
        }
        println!("scope: {}", policy.scope);
        println!("skipped_fraction: {fraction:.6}");
    }
    Ok(())
}

// ==== prune ====

/// `model.mllw` -> `model.<suffix>` in the same directory.
fn sibling_path(output: &Path, suffix: &str) -> CliResult<PathBuf> {
    let stem = output
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| {
            CliError::Validation(format!(
                "output path {} has no usable file stem",
                output.display()
            ))
        })?;
    Ok(output.with_file_name(format!("{stem}.{suffix}")))
}

/// Reads every `*.json` in the directory (sorted by name) as a prompt spec.
fn load_calibration_prompts(dir: &Path) -> CliResult<Vec<PromptInput>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("calib dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    let mut prompts = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Validation(format!("calibration prompt {}: {e}", path.display()))
        })?;
        let spec: PromptSpec = serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("calibration prompt {}: {e}", path.display()))
        })?;
        prompts.push(config::build_prompt(&spec, Some(dir))?);
    }
    Ok(prompts)
}

fn cmd_prune(
    cli: &Cli,
    method_str: &str,
    sparsity: f64,
    scope_str: &str,
    calib_dir: Option<&Path>,
) -> CliResult<()> {
    let rc = load_run_config(cli.config.as_deref())?;
    let model = config::load_model(&rc.model, cli.seed)?;
    let method: PruneMethod = method_str.parse()?;
    let scope: CalibScope = scope_str.parse()?;
    let stats = if method == PruneMethod::Wanda {
        let dir = calib_dir.ok_or_else(|| {
            CliError::Validation("--calib-dir is required for wanda pruning".into())
        })?;
        let prompts = load_calibration_prompts(dir)?;
        Some(collect_calibration(&model, &prompts, scope)?)
    } else {
        None
    };
    let masks = build_masks(&model, method, sparsity, stats.as_ref(), cli.seed.unwrap_or(0))?;
    let pruned = apply_masks(&model, &masks)?;
    let report = sparsity_report(&masks, sparsity);
    let out = cli
        .output
        .as_ref()
        .or(rc.output.as_ref())
        .ok_or_else(|| CliError::Validation("prune requires --output for the pruned model".into()))?;
    container::save_model(&pruned, out)?;
    let masks_path = sibling_path(out, "masks.mllw")?;
    let report_path = sibling_path(out, "sparsity.json")?;
    save_masks(&masks, &model.config, &masks_path)?;
    let report_json = serde_json::to_value(&report).expect("in-memory JSON");
    write_output(&report_path, &pretty(&report_json))?;
    if cli.json {
        let payload = serde_json::json!({
            "model": out.display().to_string(),
            "masks": masks_path.display().to_string(),
            "report": report_json,
        });
        print!("{}", pretty(&payload));
    } else {
        println!("method: {method}  target sparsity: {sparsity}");
        println!("realized sparsity: {:.6}", report.overall_realized);
        println!("pruned model: {}", out.display());
        println!("masks: {}", masks_path.display());
        println!("report: {}", report_path.display());
    }
    Ok(())
}

// ==== compare ====

struct CompareOutcome {
    label: String,
    worst: f32,
    first_divergent_step: Option<usize>,
    divergent_layer: Option<usize>,
}

impl CompareOutcome {
    fn ok(&self) -> bool {
        self.first_divergent_step.is_none()
    }
}

/// Runs one policy on both executors and localizes any divergence.
fn compare_one(
    model: &Model,
    policy: ComputePolicy,
    prompt: &PromptInput,
    max_new: usize,
    tolerance: f32,
    corrupt_cache: Option<usize>,
) -> CliResult<CompareOutcome> {
    let label = format!("{} / {}", policy.mode, policy.scope);
    // Runtime leg, driven manually so the cache can be corrupted and
    // inspected.
    let mut session = Session::new(model, policy)?;
    let last_hidden = session.prefill(prompt)?;
    if let Some(layer) = corrupt_cache {
        session.cache_mut().corrupt_first_key(layer, 10.0)?;
    }
    let first_logits = model::unembed(model, &last_hidden)?;
    let mut tokens = vec![argmax(&first_logits)];
    let mut step_logits = vec![first_logits];
    while tokens.len() < max_new {
        let (token, logits) = session.decode_step(*tokens.last().expect("non-empty"))?;
        tokens.push(token);
        step_logits.push(logits);
    }
    // Reference leg.
    let reference = oracle_generate(model, policy, prompt, max_new)?;
    let mut worst = 0.0f32;
    let mut first_divergent_step = None;
    for (step, (a, b)) in step_logits.iter().zip(&reference.step_logits).enumerate() {
        let mut step_worst = 0.0f32;
        for (x, y) in a.iter().zip(b) {
            step_worst = step_worst.max((x - y).abs());
        }
        worst = worst.max(step_worst);
        let diverged = step_worst > tolerance || tokens[step] != reference.output_token_ids[step];
        if diverged && first_divergent_step.is_none() {
            first_divergent_step = Some(step);
        }
    }
    // Localize in the cache: recompute the reference K/V grid for the
    // sequence the runtime actually processed and find the first layer at
    // which the session cache deviates.
    let divergent_layer = if first_divergent_step.is_some() {
        let processed_decode = tokens.len().saturating_sub(1);
        let classes = classify_tokens(prompt, processed_decode);
        let mut embedded: Vec<Vec<f32>> = Vec::new();
        if let Some(rows) = &prompt.perceptual {
            for r in 0..rows.rows() {
                embedded.push(model::embed_perceptual(model, rows.row(r), embedded.len())?);
            }
        }
        for &id in &prompt.text_token_ids {
            embedded.push(model::embed(model, id, embedded.len())?);
        }
        for &token in tokens.iter().take(processed_decode) {
            embedded.push(model::embed(model, token, embedded.len())?);
        }
        let schedule = resolve_schedule(&policy, model.config.n_layers)?;
        let grid = oracle_kv_grid(model, &schedule, &policy, &classes, &embedded)?;
        let mut found = None;
        'layers: for layer in 0..model.config.n_layers {
            let cached = session.cache().entries(layer);
            let expected = &grid[layer];
            if cached.len() != expected.len() {
                found = Some(layer);
                break;
            }
            for (a, b) in cached.iter().zip(expected) {
                let keys_off = a
                    .key
                    .iter()
                    .zip(&b.key)
                    .any(|(x, y)| (x - y).abs() > tolerance);
                let values_off = a
                    .value
                    .iter()
                    .zip(&b.value)
                    .any(|(x, y)| (x - y).abs() > tolerance);
                if a.position != b.position || keys_off || values_off {
                    found = Some(layer);
                    break 'layers;
                }
            }
        }
        found
    } else {
        None
    };
    Ok(CompareOutcome {
        label,
        worst,
        first_divergent_step,
        divergent_layer,
    })
}

fn cmd_compare(
    cli: &Cli,
    max_new_flag: Option<usize>,
    tolerance: f32,
    all_policies: bool,
    corrupt_cache: Option<usize>,
) -> CliResult<()> {
    let rc = load_run_config(cli.config.as_deref())?;
    let model = config::load_model(&rc.model, cli.seed)?;
    let prompt = config::build_prompt(&rc.prompt, None)?;
    let max_new = max_new_flag.unwrap_or(rc.generation.max_new_tokens);
    if max_new == 0 {
        return Err(CliError::Validation(
            "compare requires at least one decode step (max_new >= 1)".into(),
        ));
    }
    let base = config::policy_of(&rc);
    let policies: Vec<ComputePolicy> = if all_policies {
        let mut list = Vec::new();
        for mode in ALL_MODES {
            for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
                let interval = if mode == PolicyMode::ParallelBlocks {
                    base.interval.max(2)
                } else {
                    base.interval
                };
                list.push(ComputePolicy::new(mode, base.start_layer, interval, scope));
            }
        }
        list
    } else {
        vec![base]
    };
    let mut outcomes = Vec::with_capacity(policies.len());
    for policy in policies {
        outcomes.push(compare_one(
            &model,
            policy,
            &prompt,
            max_new,
            tolerance,
            corrupt_cache,
        )?);
    }
    let worst = outcomes.iter().fold(0.0f32, |w, o| w.max(o.worst));
    let failures = outcomes.iter().filter(|o| !o.ok()).count();
    if cli.json {
        let results: Vec<serde_json::Value> = outcomes
            .iter()
            .map(|o| {
                serde_json::json!({
                    "policy": o.label,
                    "worst_deviation": o.worst,
                    "first_divergent_step": o.first_divergent_step,
                    "divergent_layer": o.divergent_layer,
                    "ok": o.ok(),
                })
            })
            .collect();
        let payload = serde_json::json!({
            "results": results,
            "worst_deviation": worst,
            "tolerance": tolerance,
        });
        print!("{}", pretty(&payload));
    } else {
        for o in &outcomes {
            match (o.first_divergent_step, o.divergent_layer) {
                (None, _) => println!("{}: ok (worst deviation {:.3e})", o.label, o.worst),
                (Some(step), Some(layer)) => println!(
                    "{}: DIVERGED worst {:.3e}, first divergence at step {step}, cache first diverges at layer {layer}",
                    o.label, o.worst
                ),
                (Some(step), None) => println!(
                    "{}: DIVERGED worst {:.3e}, first divergence at step {step}",
                    o.label, o.worst
                ),
            }
        }
        println!("worst deviation: {worst:.3e} (tolerance {tolerance:.3e})");
    }
    if failures > 0 {
        return Err(CliError::Comparison(format!(
            "{failures} of {} comparisons diverged beyond tolerance {tolerance:.3e}",
            outcomes.len()
        )));
    }
    Ok(())
}

// ==== sweep ====

enum SweepAxis {
    Interval,
    StartLayer,
}

fn cmd_sweep(cli: &Cli, axis_str: &str, values_str: &str) -> CliResult<()> {
    let axis = match axis_str {
        "interval" => SweepAxis::Interval,
        "start_layer" => SweepAxis::StartLayer,
        other => {
            return Err(CliError::Validation(format!(
                "unknown sweep axis {other:?}; expected interval or start_layer"
            )));
        }
    };
    let values: Vec<usize> = values_str
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim().parse::<usize>().map_err(|e| {
                CliError::Validation(format!("sweep value {s:?}: {e}"))
            })
        })
        .collect::<CliResult<Vec<usize>>>()?;
    if values.is_empty() {
        return Err(CliError::Validation("sweep requires at least one value".into()));
    }
    let rc = load_run_config(cli.config.as_deref())?;
    let model = config::load_model(&rc.model, cli.seed)?;
    let prompt = config::build_prompt(&rc.prompt, None)?;
    let max_new = rc.generation.max_new_tokens;
    if max_new == 0 {
        return Err(CliError::Validation(
            "sweep requires max_new_tokens >= 1 for the deviation column".into(),
        ));
    }
    let base = config::policy_of(&rc);
    let n_layers = model.config.n_layers;
    // Baseline for the deviation column; eos is ignored so every run reaches
    // the same final step.
    let dense_run = generate(&model, ComputePolicy::dense(), &prompt, max_new, None)?;
    let dense_last = dense_run.step_logits.last().expect("max_new >= 1");
    let mut csv = String::from("value,skipped_fraction,flops_reduction,depth_stages,max_logit_dev\n");
    for &value in &values {
        let mut policy = base;
        match axis {
            SweepAxis::Interval => {
                policy.interval = value;
                if value > n_layers {
                    // An interval beyond the stack disables the policy; the
                    // row degenerates to dense.
                    policy.start_layer = n_layers;
                }
            }
            SweepAxis::StartLayer => policy.start_layer = value,
        }
        let schedule = resolve_schedule(&policy, n_layers)?;
        let run = generate(&model, policy, &prompt, max_new, None)?;
        let report = trace_flops(&run.trace, &model.config)?;
        let fraction = skipped_fraction(&schedule);
        let last = run.step_logits.last().expect("max_new >= 1");
        let mut deviation = 0.0f32;
        for (a, b) in last.iter().zip(dense_last) {
            deviation = deviation.max((a - b).abs());
        }
        writeln!(
            csv,
            "{value},{fraction:.6},{:.6},{},{deviation:.6e}",
            report.reduction_ratio, report.depth_stages
        )
        .expect("in-memory write");
    }
    print!("{csv}");
    if let Some(out) = cli.output.as_ref().or(rc.output.as_ref()) {
        write_output(out, &csv)?;
    }
    Ok(())
}

// ==== synth ====

fn cmd_synth(cli: &Cli) -> CliResult<()> {
    let rc = load_run_config(cli.config.as_deref())?;
    let spec = rc.model.synthetic.as_ref().ok_or_else(|| {
        CliError::Validation("synth requires a synthetic model source in the config".into())
    })?;
    let seed = cli.seed.unwrap_or(spec.seed);
    let model = model::synth_model(&spec.config, seed)
        .map_err(|e| in_field("model.synthetic.config", e))?;
    let out = cli
        .output
        .as_ref()
        .or(rc.output.as_ref())
        .ok_or_else(|| CliError::Validation("synth requires --output".into()))?;
    container::save_model(&model, out)?;
    let bytes = std::fs::metadata(out)
        .map_err(|e| CliError::Runtime(format!("output {}: {e}", out.display())))?
        .len();
    if cli.json {
        let payload = serde_json::json!({
            "path": out.display().to_string(),
            "seed": seed,
            "n_layers": model.config.n_layers,
            "d_model": model.config.d_model,
            "bytes": bytes,
        });
        print!("{}", pretty(&payload));
    } else {
        println!(
            "wrote {} ({} layers, d_model {}, seed {seed}, {bytes} bytes)",
            out.display(),
            model.config.n_layers,
            model.config.d_model
        );
    }
    Ok(())
}
