//! Acceptance gate: one test per shipped guarantee, each printing a PASS line.
//!
//! Every test is self-contained and runs on small seeded synthetic models, so
//! the whole file finishes in seconds in a debug build.

use std::path::Path;
use std::process::Command;

use skipformer_core::container::{load_model, save_model, save_perceptual};
use skipformer_core::cost::{predict_flops, trace_flops};
use skipformer_core::model::{self, synth_model, Model, ModelConfig};
use skipformer_core::numerics::Matrix;
use skipformer_core::oracle::oracle_generate;
use skipformer_core::policy::{resolve_schedule, LayerAction};
use skipformer_core::pruning::{
    apply_masks, magnitude_mask, prune_per_output, random_mask, wanda_scores, ModelMasks,
};
use skipformer_core::rng::SplitMix64;
use skipformer_core::runtime::generate;
use skipformer_core::{ActivationKind, ComputePolicy, PolicyMode, PromptInput, Session, TokenScope};

const ALL_MODES: [PolicyMode; 6] = [
    PolicyMode::Dense,
    PolicyMode::SkipBlock,
    PolicyMode::SkipFfn,
    PolicyMode::SkipSa,
    PolicyMode::ParallelFfnSa,
    PolicyMode::ParallelBlocks,
];

fn config(n_layers: usize, d_model: usize, activation: ActivationKind) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 2,
        d_ff: 4 * d_model,
        vocab_size: 32,
        max_positions: 32,
        activation,
        ln_eps: 1e-5,
    }
}

/// Ten seeded models cycling over (layers, width) in {4,6,8} x {8,16}.
fn seeded_models() -> Vec<Model> {
    let combos = [(4, 8), (4, 16), (6, 8), (6, 16), (8, 8), (8, 16)];
    (0..10)
        .map(|i| {
            let (n, d) = combos[i % combos.len()];
            let act = if i % 2 == 0 {
                ActivationKind::Relu
            } else {
                ActivationKind::Gelu
            };
            synth_model(&config(n, d, act), i as u64).expect("synth")
        })
        .collect()
}

fn perceptual_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f32> = (0..n * d)
        .map(|_| (rng.next_unit() as f32 - 0.5) * 0.2)
        .collect();
    Matrix::new(n, d, data).expect("matrix")
}

/// Four perceptual rows followed by three text tokens.
fn standard_prompt(d_model: usize, seed: u64) -> PromptInput {
    PromptInput {
        perceptual: Some(perceptual_rows(4, d_model, seed)),
        text_token_ids: vec![3, 11, 7],
    }
}

fn assert_bits_eq(a: &[f32], b: &[f32], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "{what}: element {i}: {x} vs {y}");
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

// ==== 1: schedule fidelity ====

#[test]
fn criterion_1_schedule_fidelity() {
    for n in [2usize, 4, 6, 8, 10, 12] {
        let policy = ComputePolicy::new(PolicyMode::SkipBlock, 0, 2, TokenScope::ALL);
        let schedule = resolve_schedule(&policy, n).expect("schedule");
        let skipped: Vec<usize> = schedule
            .actions()
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == LayerAction::SkipBlock)
            .map(|(l, _)| l)
            .collect();
        assert_eq!(skipped.len(), n / 2, "N={n}: exactly half the blocks skip");
        let expected: Vec<usize> = (0..n).step_by(2).collect();
        assert_eq!(skipped, expected, "N={n}: even layers are the skipped ones");
    }
    println!("criterion 1: PASS — start 0 / interval 2 skips exactly half the blocks");
}

// ==== 2: identity policy ====

#[test]
fn criterion_2_disabled_policy_is_dense_bitwise() {
    for model in seeded_models() {
        let n = model.config.n_layers;
        let prompt = standard_prompt(model.config.d_model, 77);
        let dense = generate(&model, ComputePolicy::dense(), &prompt, 8, None).expect("dense");
        for mode in ALL_MODES {
            for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
                // start_layer == n_layers is the largest accepted value and
                // leaves no affected layer.
                let policy = ComputePolicy::new(mode, n, 2, scope);
                let run = generate(&model, policy, &prompt, 8, None).expect("disabled run");
                assert_eq!(run.output_token_ids, dense.output_token_ids);
                for (step, (a, b)) in run.step_logits.iter().zip(&dense.step_logits).enumerate()
                {
                    assert_bits_eq(a, b, &format!("{mode:?} step {step}"));
                }
            }
        }
    }
    println!("criterion 2: PASS — start_layer == n_layers reproduces the dense run bitwise");
}

// ==== 3: oracle equivalence ====

#[test]
fn criterion_3_runtime_matches_full_recompute_oracle() {
    let mut worst = 0.0f32;
    for (i, model) in seeded_models().iter().enumerate() {
        let prompt = standard_prompt(model.config.d_model, 100 + i as u64);
        for mode in ALL_MODES {
            for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
                let policy = ComputePolicy::new(mode, 0, 2, scope);
                let run = generate(&model, policy, &prompt, 8, None).expect("runtime");
                let reference = oracle_generate(model, policy, &prompt, 8).expect("oracle");
                assert_eq!(
                    run.output_token_ids, reference.output_token_ids,
                    "model {i} {mode:?} {scope:?}: token streams differ"
                );
                for (a, b) in run.step_logits.iter().zip(&reference.step_logits) {
                    let dev = max_abs_diff(a, b);
                    worst = worst.max(dev);
                    assert!(
                        dev <= 1e-4,
                        "model {i} {mode:?} {scope:?}: deviation {dev}"
                    );
                }
            }
        }
    }
    println!(
        "criterion 3: PASS — 6 modes x 2 scopes x 10 models agree with the oracle (worst {worst:.3e})"
    );
}

// ==== 4: prompt preservation ====

#[test]
fn criterion_4_generated_only_scope_leaves_prompt_dense() {
    for (i, model) in seeded_models().iter().enumerate() {
        let prompt = standard_prompt(model.config.d_model, 200 + i as u64);
        let mut dense = Session::new(model, ComputePolicy::dense()).expect("dense session");
        dense.prefill(&prompt).expect("dense prefill");
        for mode in ALL_MODES {
            let policy = ComputePolicy::new(mode, 0, 2, TokenScope::GENERATED_ONLY);
            let mut session = Session::new(model, policy).expect("session");
            session.prefill(&prompt).expect("prefill");
            for (p, (a, b)) in session
                .prompt_hidden()
                .iter()
                .zip(dense.prompt_hidden())
                .enumerate()
            {
                assert_bits_eq(a, b, &format!("model {i} {mode:?} prompt hidden {p}"));
            }
            for layer in 0..model.config.n_layers {
                let got = session.cache().entries(layer);
                let want = dense.cache().entries(layer);
                assert_eq!(got.len(), want.len(), "model {i} {mode:?} layer {layer}");
                for (a, b) in got.iter().zip(want) {
                    assert_eq!(a.position, b.position);
                    assert_bits_eq(&a.key, &b.key, &format!("model {i} {mode:?} L{layer} key"));
                    assert_bits_eq(
                        &a.value,
                        &b.value,
                        &format!("model {i} {mode:?} L{layer} value"),
                    );
                }
            }
        }
    }
    println!("criterion 4: PASS — generated-only scope keeps prompt states and cache bitwise dense");
}

// ==== 5: FLOPs cross-check ====

#[test]
fn criterion_5_predicted_flops_equal_traced_flops() {
    for (i, model) in seeded_models().iter().enumerate() {
        let cfg = &model.config;
        let prompt = standard_prompt(cfg.d_model, 300 + i as u64);
        for mode in ALL_MODES {
            for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
                let policy = ComputePolicy::new(mode, 0, 2, scope);
                let run = generate(model, policy, &prompt, 8, None).expect("runtime");
                let traced = trace_flops(&run.trace, cfg).expect("trace flops");
                let schedule = resolve_schedule(&policy, cfg.n_layers).expect("schedule");
                let n_generated = run.trace.n_positions() - prompt.len();
                let predicted = predict_flops(&schedule, &policy, cfg, prompt.len(), n_generated)
                    .expect("predicted flops");
                assert_eq!(predicted, traced, "model {i} {mode:?} {scope:?}");
            }
        }
        // Skipping every other block with every token in scope halves the
        // block work exactly.
        let policy = ComputePolicy::new(PolicyMode::SkipBlock, 0, 2, TokenScope::ALL);
        let run = generate(model, policy, &prompt, 8, None).expect("runtime");
        let report = trace_flops(&run.trace, cfg).expect("trace flops");
        assert_eq!(report.policy_total * 2, report.dense_total, "model {i}");
        assert_eq!(report.reduction_ratio, 0.5, "model {i}");
    }
    println!("criterion 5: PASS — prediction equals trace on every run; half-stack reduction is exactly 0.5");
}

// ==== 6: parallel coincidence ====

#[test]
fn criterion_6_zero_projection_makes_parallel_exact() {
    let mut model = synth_model(&config(8, 8, ActivationKind::Gelu), 6).expect("synth");
    for block in &mut model.blocks {
        block.wo = Matrix::zeros(8, 8);
    }
    let prompt = standard_prompt(8, 600);
    let dense = generate(&model, ComputePolicy::dense(), &prompt, 8, None).expect("dense");
    let policy = ComputePolicy::new(PolicyMode::ParallelFfnSa, 0, 1, TokenScope::ALL);
    let parallel = generate(&model, policy, &prompt, 8, None).expect("parallel");
    assert_eq!(parallel.output_token_ids, dense.output_token_ids);
    for (step, (a, b)) in parallel.step_logits.iter().zip(&dense.step_logits).enumerate() {
        assert_bits_eq(a, b, &format!("step {step}"));
    }
    let dense_cost = trace_flops(&dense.trace, &model.config).expect("dense flops");
    let parallel_cost = trace_flops(&parallel.trace, &model.config).expect("parallel flops");
    assert_eq!(parallel_cost.policy_total, dense_cost.policy_total);
    assert!(
        parallel_cost.depth_stages < dense_cost.depth_stages,
        "depth {} should be below dense {}",
        parallel_cost.depth_stages,
        dense_cost.depth_stages
    );
    println!(
        "criterion 6: PASS — zero output projection makes the fused branch bitwise dense at equal FLOPs, depth {} vs {}",
        parallel_cost.depth_stages, dense_cost.depth_stages
    );
}

// ==== 7: pruning structure ====

#[test]
fn criterion_7_mask_structure_and_tie_rule() {
    // Exactly half of each output row drops at s = 0.5 for all three methods.
    let mut rng = SplitMix64::new(7);
    let w = Matrix::new(
        16,
        16,
        (0..256).map(|_| rng.next_unit() as f32 - 0.5).collect(),
    )
    .expect("matrix");
    let norms: Vec<f32> = (0..16).map(|_| rng.next_unit() as f32 + 0.1).collect();
    let activation_aware =
        prune_per_output(&wanda_scores(&w, &norms).expect("scores"), 0.5).expect("mask");
    let by_magnitude = magnitude_mask(&w, 0.5).expect("mask");
    let by_chance = random_mask(16, 16, 0.5, 99).expect("mask");
    for mask in [&activation_aware, &by_magnitude, &by_chance] {
        for r in 0..16 {
            assert_eq!(mask.zeros_in_row(r), 8, "row {r}");
        }
    }

    // The kept set matches brute-force bottom-k selection under the
    // documented tie rule (equal scores drop the higher column) on 100
    // instances, half of them quantized to force ties.
    for instance in 0..100u64 {
        let mut rng = SplitMix64::new(1000 + instance);
        let rows = 6;
        let cols = 12;
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                let v = rng.next_unit() as f32;
                if instance % 2 == 0 {
                    (v * 4.0).floor() // heavy ties
                } else {
                    v
                }
            })
            .collect();
        let scores = Matrix::new(rows, cols, data).expect("matrix");
        let mask = prune_per_output(&scores, 0.5).expect("mask");
        let k = cols / 2;
        for r in 0..rows {
            let row = scores.row(r);
            for j in 0..cols {
                let rank = (0..cols)
                    .filter(|&j2| {
                        row[j2] < row[j] || (row[j2] == row[j] && j2 > j)
                    })
                    .count();
                let should_drop = rank < k;
                assert_eq!(
                    !mask.keep(r, j),
                    should_drop,
                    "instance {instance} row {r} col {j}"
                );
            }
        }
    }

    // Uniformly rescaling the calibration norms changes no mask.
    for seed in 0..6u64 {
        let mut rng = SplitMix64::new(40 + seed);
        let w = Matrix::new(
            8,
            8,
            (0..64).map(|_| rng.next_unit() as f32 - 0.5).collect(),
        )
        .expect("matrix");
        let norms: Vec<f32> = (0..8).map(|_| rng.next_unit() as f32 + 0.1).collect();
        let scaled: Vec<f32> = norms.iter().map(|n| n * 7.3).collect();
        let a = prune_per_output(&wanda_scores(&w, &norms).expect("s"), 0.5).expect("mask");
        let b = prune_per_output(&wanda_scores(&w, &scaled).expect("s"), 0.5).expect("mask");
        assert_eq!(a, b, "seed {seed}");
    }
    println!("criterion 7: PASS — per-row sparsity exact, tie rule matches brute force, norm scale invariant");
}

// ==== 8: degenerate pruning ====

#[test]
fn criterion_8_all_zero_masks_reduce_blocks_to_identity() {
    let cfg = config(4, 8, ActivationKind::Relu);
    let mut base = synth_model(&cfg, 8).expect("synth");
    // The masks only reach the six weight matrices; the feed-forward biases
    // must be cleared too, otherwise the residual still adds fc2_bias.
    for block in &mut base.blocks {
        block.fc1_bias = vec![0.0; cfg.d_ff];
        block.fc2_bias = vec![0.0; cfg.d_model];
    }
    let masks = ModelMasks::zeros(&cfg);
    let pruned = apply_masks(&base, &masks).expect("apply");
    for prompt_ids in [vec![5usize], vec![2, 9, 17]] {
        let last = *prompt_ids.last().expect("non-empty");
        let last_pos = prompt_ids.len() - 1;
        let prompt = PromptInput::text_only(prompt_ids);
        let run = generate(&pruned, ComputePolicy::dense(), &prompt, 1, None).expect("run");
        let direct = model::unembed(
            &pruned,
            &model::embed(&pruned, last, last_pos).expect("embed"),
        )
        .expect("unembed");
        let dev = max_abs_diff(&run.step_logits[0], &direct);
        assert!(dev <= 1e-6, "deviation {dev}");
    }
    println!("criterion 8: PASS — zero masks turn the whole stack into embed -> unembed");
}

// ==== 9: determinism & formats ====

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_skipformer"))
        .args(args)
        .output()
        .expect("spawn CLI")
}

fn write_sweep_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("sweep.json");
    let config = serde_json::json!({
        "model": {
            "synthetic": {
                "config": {
                    "n_layers": 4, "d_model": 8, "n_heads": 2, "d_ff": 32,
                    "vocab_size": 32, "max_positions": 32, "activation": "relu"
                },
                "seed": 11
            }
        },
        "policy": { "mode": "skip_block", "start_layer": 0, "interval": 2, "scope": "all" },
        "prompt": { "text_token_ids": [1, 2, 3] },
        "generation": { "max_new_tokens": 4 }
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).expect("json")).expect("write");
    path
}

#[test]
fn criterion_9_determinism_and_format_rejection() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = config(2, 8, ActivationKind::Relu);
    let model = synth_model(&cfg, 3).expect("synth");

    // Save -> load -> save is byte stable.
    let first = dir.path().join("first.mllw");
    let second = dir.path().join("second.mllw");
    save_model(&model, &first).expect("save");
    let reloaded = load_model(&first).expect("load");
    save_model(&reloaded, &second).expect("save again");
    let first_bytes = std::fs::read(&first).expect("read");
    let second_bytes = std::fs::read(&second).expect("read");
    assert_eq!(first_bytes, second_bytes, "round trip changed bytes");

    // Repeated sweeps produce byte-identical CSV on stdout and on disk.
    let sweep_config = write_sweep_config(dir.path());
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let mut outputs = Vec::new();
    for csv in [&csv_a, &csv_b] {
        let out = run_cli(&[
            "--config",
            sweep_config.to_str().expect("utf8"),
            "--output",
            csv.to_str().expect("utf8"),
            "sweep",
            "--axis",
            "interval",
            "--values",
            "1,2,4,8",
        ]);
        assert!(out.status.success(), "sweep failed: {out:?}");
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1], "sweep stdout differs between runs");
    assert_eq!(
        std::fs::read(&csv_a).expect("read"),
        std::fs::read(&csv_b).expect("read"),
        "sweep files differ between runs"
    );

    // Five corrupted fixtures are all rejected with exit code 2.
    let perceptual = dir.path().join("rows.pemb");
    save_perceptual(&perceptual_rows(2, 8, 5), &perceptual).expect("save perceptual");
    let valid = first_bytes.clone();
    let mut bad_magic = valid.clone();
    bad_magic[0] = b'X';
    let mut bad_version = valid.clone();
    bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
    let truncated = valid[..valid.len() - 7].to_vec();
    let mut header_mismatch = valid.clone();
    let needle = b"\"n_layers\":2";
    let at = header_mismatch
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("layer count field in header");
    header_mismatch[at + needle.len() - 1] = b'3';
    let perceptual_bytes = std::fs::read(&perceptual).expect("read");
    let perceptual_truncated = perceptual_bytes[..perceptual_bytes.len() - 3].to_vec();

    let model_fixtures = [
        ("bad_magic.mllw", bad_magic),
        ("bad_version.mllw", bad_version),
        ("truncated.mllw", truncated),
        ("header_mismatch.mllw", header_mismatch),
    ];
    for (name, bytes) in model_fixtures {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).expect("write fixture");
        let config_path = dir.path().join(format!("{name}.json"));
        let config = serde_json::json!({
            "model": { "path": path.to_str().expect("utf8") },
            "prompt": { "text_token_ids": [1] },
            "generation": { "max_new_tokens": 1 }
        });
        std::fs::write(&config_path, serde_json::to_string(&config).expect("json"))
            .expect("write config");
        let out = run_cli(&["--config", config_path.to_str().expect("utf8"), "generate"]);
        assert_eq!(out.status.code(), Some(2), "{name}: {out:?}");
    }
    let bad_rows = dir.path().join("bad_rows.pemb");
    std::fs::write(&bad_rows, perceptual_truncated).expect("write fixture");
    let config_path = dir.path().join("bad_rows.json");
    let config = serde_json::json!({
        "model": { "path": first.to_str().expect("utf8") },
        "prompt": {
            "perceptual_path": bad_rows.to_str().expect("utf8"),
            "text_token_ids": [1]
        },
        "generation": { "max_new_tokens": 1 }
    });
    std::fs::write(&config_path, serde_json::to_string(&config).expect("json"))
        .expect("write config");
    let out = run_cli(&["--config", config_path.to_str().expect("utf8"), "generate"]);
    assert_eq!(out.status.code(), Some(2), "truncated perceptual file: {out:?}");

    println!("criterion 9: PASS — stable bytes, repeatable sweeps, five corrupted fixtures rejected with exit 2");
}
