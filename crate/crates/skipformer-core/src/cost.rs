//! Exact FLOP accounting and depth reporting.
//!
//! Counting rules: a multiply-accumulate is 2 FLOPs; layer norms, softmax,
//! activations, and bias adds are excluded. Attention for one query costs
//! `8*d^2` for the four projections plus `4*d*ctx` for scores and the
//! weighted sum, where `ctx` is the number of visible K/V entries. The FFN
//! costs `4*d*d_ff` per token.
//!
//! Two independent routes produce a [`FlopsReport`]: [`trace_flops`] walks a
//! recorded execution trace, and [`predict_flops`] reconstructs the same
//! numbers analytically from the schedule alone. They must agree exactly —
//! their equality is itself a correctness check on the runtime's bookkeeping.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::{action_for, ComputePolicy, LayerAction, LayerSchedule, TokenClass};
use crate::runtime::ExecutionTrace;

/// FLOP and depth totals for one generation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    /// FLOPs attributed to each layer (fused pairs bill the lead layer).
    pub per_layer: Vec<u64>,
    /// FLOPs grouped by the action that incurred them.
    pub per_action: BTreeMap<String, u64>,
    /// FLOPs spent on prompt positions.
    pub prefill_total: u64,
    /// FLOPs spent on generated positions.
    pub decode_total: u64,
    /// Total FLOPs under the active policy.
    pub policy_total: u64,
    /// Total FLOPs the same run would cost fully dense.
    pub dense_total: u64,
    /// `1 - policy_total / dense_total`.
    pub reduction_ratio: f64,
    /// Sequential stage count on the last processed position's path.
    pub depth_stages: u64,
    /// Dense stage count for the same stack: two stages per layer.
    pub dense_depth_stages: u64,
}

/// Stable accounting keys; every report carries all of them.
fn action_label(action: LayerAction) -> &'static str {
    match action {
        LayerAction::Execute => "execute",
        LayerAction::SkipBlock => "skip_block",
        LayerAction::SkipFfn => "skip_ffn",
        LayerAction::SkipSa => "skip_sa",
        LayerAction::ParallelFfnSa => "parallel_ffn_sa",
        LayerAction::ParallelLead { .. } => "parallel_lead",
        LayerAction::ParallelAbsorbed => "parallel_absorbed",
    }
}

const ALL_LABELS: [&str; 7] = [
    "execute",
    "skip_block",
    "skip_ffn",
    "skip_sa",
    "parallel_ffn_sa",
    "parallel_lead",
    "parallel_absorbed",
];

/// FLOPs for a linear map applied to `tokens` rows: 2 * out * in per row.
pub fn linear_flops(out_features: usize, in_features: usize, tokens: usize) -> u64 {
    2 * out_features as u64 * in_features as u64 * tokens as u64
}

/// Attention cost for one query over `ctx` visible entries.
pub fn attention_flops(d_model: usize, ctx: usize) -> u64 {
    let d = d_model as u64;
    8 * d * d + 4 * d * ctx as u64
}

/// FFN cost for one token.
pub fn ffn_flops(cfg: &ModelConfig) -> u64 {
    linear_flops(cfg.d_ff, cfg.d_model, 1) + linear_flops(cfg.d_model, cfg.d_ff, 1)
}

struct Accumulator {
    per_layer: Vec<u64>,
    per_action: BTreeMap<String, u64>,
    prefill_total: u64,
    decode_total: u64,
    depth_stages: u64,
}

impl Accumulator {
    fn new(n_layers: usize) -> Self {
        let mut per_action = BTreeMap::new();
        for label in ALL_LABELS {
            per_action.insert(label.to_string(), 0);
        }
        Accumulator {
            per_layer: vec![0; n_layers],
            per_action,
            prefill_total: 0,
            decode_total: 0,
            depth_stages: 0,
        }
    }

    fn charge(&mut self, layer: usize, action: LayerAction, is_prefill: bool, flops: u64) {
        self.per_layer[layer] += flops;
        *self
            .per_action
            .get_mut(action_label(action))
            .expect("all labels preseeded") += flops;
        if is_prefill {
            self.prefill_total += flops;
        } else {
            self.decode_total += flops;
        }
    }

    fn into_report(self, cfg: &ModelConfig, total_positions: usize) -> FlopsReport {
        let dense_total = dense_flops(cfg, total_positions);
        let policy_total = self.prefill_total + self.decode_total;
        let reduction_ratio = if dense_total == 0 {
            0.0
        } else {
            1.0 - policy_total as f64 / dense_total as f64
        };
        FlopsReport {
            per_layer: self.per_layer,
            per_action: self.per_action,
            prefill_total: self.prefill_total,
            decode_total: self.decode_total,
            policy_total,
            dense_total,
            reduction_ratio,
            depth_stages: self.depth_stages,
            dense_depth_stages: 2 * cfg.n_layers as u64,
        }
    }
}

/// Dense cost of processing `positions` tokens through the whole stack,
/// each attending over all prior entries plus itself.
fn dense_flops(cfg: &ModelConfig, positions: usize) -> u64 {
    let mut total = 0;
    for p in 0..positions {
        total += (attention_flops(cfg.d_model, p + 1) + ffn_flops(cfg)) * cfg.n_layers as u64;
    }
    total
}

/// Cost of one recorded trace row.
fn row_flops(
    cfg: &ModelConfig,
    action: LayerAction,
    sa_ctx: Option<usize>,
    partner_sa_ctx: Option<usize>,
) -> Result<u64> {
    let need_ctx = |ctx: Option<usize>| {
        ctx.ok_or_else(|| Error::Trace(format!("{action} row is missing its context size")))
    };
    Ok(match action {
        LayerAction::Execute => attention_flops(cfg.d_model, need_ctx(sa_ctx)?) + ffn_flops(cfg),
        LayerAction::SkipFfn => attention_flops(cfg.d_model, need_ctx(sa_ctx)?),
        LayerAction::SkipSa => ffn_flops(cfg),
        LayerAction::ParallelFfnSa => {
            attention_flops(cfg.d_model, need_ctx(sa_ctx)?) + ffn_flops(cfg)
        }
        LayerAction::ParallelLead { .. } => {
            attention_flops(cfg.d_model, need_ctx(sa_ctx)?)
                + ffn_flops(cfg)
                + attention_flops(cfg.d_model, need_ctx(partner_sa_ctx)?)
                + ffn_flops(cfg)
        }
        LayerAction::SkipBlock | LayerAction::ParallelAbsorbed => 0,
    })
}

/// Walks a recorded trace and totals its exact cost.
pub fn trace_flops(trace: &ExecutionTrace, cfg: &ModelConfig) -> Result<FlopsReport> {
    if trace.rows.is_empty() {
        return Err(Error::Trace("cannot account an empty trace".into()));
    }
    let mut acc = Accumulator::new(cfg.n_layers);
    let last_position = trace.n_positions() - 1;
    for row in &trace.rows {
        if row.layer >= cfg.n_layers {
            return Err(Error::Trace(format!(
                "trace row at layer {} exceeds stack of {}",
                row.layer, cfg.n_layers
            )));
        }
        let flops = row_flops(cfg, row.action, row.sa_ctx, row.partner_sa_ctx)?;
        acc.charge(row.layer, row.action, row.position < trace.n_prompt, flops);
        if row.position == last_position {
            acc.depth_stages += row.action.depth_stages();
        }
    }
    Ok(acc.into_report(cfg, trace.n_positions()))
}

/// Predicts the exact cost of processing `n_prompt + n_generated` positions
/// under a schedule, without running the model.
///
/// `n_generated` counts processed decode positions (the final emitted token
/// is never fed back through the stack). Prompt positions are treated as
/// in scope only when the scope covers both prompt classes — true for both
/// shipped scope presets, which either include or exclude the whole prompt.
pub fn predict_flops(
    schedule: &LayerSchedule,
    policy: &ComputePolicy,
    cfg: &ModelConfig,
    n_prompt: usize,
    n_generated: usize,
) -> Result<FlopsReport> {
    let total = n_prompt + n_generated;
    if total == 0 {
        return Err(Error::Range("cannot predict cost of an empty sequence".into()));
    }
    if schedule.n_layers() != cfg.n_layers {
        return Err(Error::Config(format!(
            "schedule covers {} layers but the model has {}",
            schedule.n_layers(),
            cfg.n_layers
        )));
    }
    let class_at = |p: usize| {
        if p < n_prompt {
            TokenClass::Text
        } else {
            TokenClass::Generated
        }
    };
    // Writer prefix counts per layer: ctx for the query at position p is the
    // number of writers at q <= p (a querying action always writes its own
    // entry, so the count includes p itself).
    let mut writers_before = vec![vec![0usize; total + 1]; cfg.n_layers];
    for layer in 0..cfg.n_layers {
        for p in 0..total {
            let writes = match action_for(schedule, layer, class_at(p), policy.scope) {
                // A lead writes at its own layer, and wrote the partner-layer
                // entry on behalf of the absorbed layer as well.
                LayerAction::ParallelLead { .. } | LayerAction::ParallelAbsorbed => true,
                other => other.writes_kv(),
            };
            writers_before[layer][p + 1] = writers_before[layer][p] + usize::from(writes);
        }
    }
    let mut acc = Accumulator::new(cfg.n_layers);
    for p in 0..total {
        let class = class_at(p);
        let is_prefill = p < n_prompt;
        let is_last = p == total - 1;
        let mut layer = 0;
        while layer < cfg.n_layers {
            let action = action_for(schedule, layer, class, policy.scope);
            match action {
                LayerAction::ParallelLead { partner } => {
                    let ctx_lead = writers_before[layer][p + 1];
                    let ctx_partner = writers_before[partner][p + 1];
                    let flops = attention_flops(cfg.d_model, ctx_lead)
                        + ffn_flops(cfg)
                        + attention_flops(cfg.d_model, ctx_partner)
                        + ffn_flops(cfg);
                    acc.charge(layer, action, is_prefill, flops);
                    if is_last {
                        acc.depth_stages += action.depth_stages()
                            + LayerAction::ParallelAbsorbed.depth_stages();
                    }
                    // The absorbed layer's zero-cost row still carries its
                    // action label; mirror the trace by charging zero there.
                    acc.charge(partner, LayerAction::ParallelAbsorbed, is_prefill, 0);
                    layer = partner + 1;
                }
                LayerAction::ParallelAbsorbed => {
                    return Err(Error::Internal(format!(
                        "prediction walk reached absorbed layer {layer} without its lead"
                    )));
                }
                _ => {
                    let ctx = writers_before[layer][p + 1];
                    let flops = match action {
                        LayerAction::Execute => {
                            attention_flops(cfg.d_model, ctx) + ffn_flops(cfg)
                        }
                        LayerAction::SkipFfn => attention_flops(cfg.d_model, ctx),
                        LayerAction::SkipSa => ffn_flops(cfg),
                        LayerAction::ParallelFfnSa => {
                            attention_flops(cfg.d_model, ctx) + ffn_flops(cfg)
                        }
                        LayerAction::SkipBlock => 0,
                        _ => unreachable!("fused actions handled above"),
                    };
                    acc.charge(layer, action, is_prefill, flops);
                    if is_last {
                        acc.depth_stages += action.depth_stages();
                    }
                    layer += 1;
                }
            }
        }
    }
    Ok(acc.into_report(cfg, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth_model;
    use crate::numerics::ActivationKind;
    use crate::policy::{resolve_schedule, PolicyMode, TokenScope};
    use crate::runtime::{generate, PromptInput};

    fn cfg(n_layers: usize, d_model: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model,
            n_heads: 2,
            d_ff: 4 * d_model,
            vocab_size: 32,
            max_positions: 64,
            activation: ActivationKind::Relu,
            ln_eps: 1e-5,
        }
    }

    // ==== primitive costs ====

    #[test]
    fn linear_flops_counts_mul_adds() {
        assert_eq!(linear_flops(4, 3, 1), 24);
        assert_eq!(linear_flops(4, 3, 5), 120);
    }

    #[test]
    fn attention_flops_known_value() {
        // d=4, ctx=2: projections 8*16 = 128, scores+mix 4*4*2 = 32.
        assert_eq!(attention_flops(4, 2), 160);
    }

    #[test]
    fn ffn_pair_known_value() {
        // 4096 -> 16384 -> 4096: two 2*4096*16384 linears.
        let c = ModelConfig {
            n_layers: 1,
            d_model: 4096,
            n_heads: 2,
            d_ff: 16384,
            vocab_size: 32,
            max_positions: 4,
            activation: ActivationKind::Relu,
            ln_eps: 1e-5,
        };
        assert_eq!(ffn_flops(&c), 268_435_456);
    }

    // ==== trace accounting ====

    #[test]
    fn dense_single_token_single_layer() {
        let c = cfg(1, 8);
        let model = synth_model(&c, 0).unwrap();
        let prompt = PromptInput::text_only(vec![3]);
        let run = generate(&model, ComputePolicy::dense(), &prompt, 0, None).unwrap();
        let report = trace_flops(&run.trace, &c).unwrap();
        let expected = attention_flops(8, 1) + ffn_flops(&c);
        assert_eq!(report.policy_total, expected);
        assert_eq!(report.dense_total, expected);
        assert_eq!(report.prefill_total, expected);
        assert_eq!(report.decode_total, 0);
        assert_eq!(report.reduction_ratio, 0.0);
        assert_eq!(report.depth_stages, 2);
        assert_eq!(report.dense_depth_stages, 2);
    }

    #[test]
    fn empty_trace_rejected() {
        let c = cfg(2, 8);
        let trace = ExecutionTrace {
            n_prompt: 0,
            rows: Vec::new(),
        };
        assert!(matches!(trace_flops(&trace, &c), Err(Error::Trace(_))));
    }

    #[test]
    fn skip_block_half_reduction_is_exact() {
        let c = cfg(6, 8);
        let model = synth_model(&c, 1).unwrap();
        let policy = ComputePolicy::new(PolicyMode::SkipBlock, 0, 2, TokenScope::ALL);
        let prompt = PromptInput::text_only(vec![1, 2, 3]);
        let run = generate(&model, policy, &prompt, 6, None).unwrap();
        let report = trace_flops(&run.trace, &c).unwrap();
        // Layers 0,2,4 skipped for every token; the surviving layers see the
        // identical context sizes a dense run would, so the ratio is exact.
        assert_eq!(report.reduction_ratio, 0.5);
        assert_eq!(report.policy_total * 2, report.dense_total);
    }

    #[test]
    fn parallel_ffn_sa_same_flops_lower_depth() {
        let c = cfg(4, 8);
        let model = synth_model(&c, 2).unwrap();
        let policy = ComputePolicy::new(PolicyMode::ParallelFfnSa, 0, 1, TokenScope::ALL);
        let prompt = PromptInput::text_only(vec![4, 5]);
        let run = generate(&model, policy, &prompt, 4, None).unwrap();
        let report = trace_flops(&run.trace, &c).unwrap();
        assert_eq!(report.policy_total, report.dense_total);
        assert_eq!(report.reduction_ratio, 0.0);
        assert_eq!(report.depth_stages, 4); // one stage per layer
        assert_eq!(report.dense_depth_stages, 8);
    }

    #[test]
    fn parallel_blocks_bills_lead_layer() {
        let c = cfg(4, 8);
        let model = synth_model(&c, 3).unwrap();
        let policy = ComputePolicy::new(PolicyMode::ParallelBlocks, 0, 2, TokenScope::ALL);
        let prompt = PromptInput::text_only(vec![1]);
        let run = generate(&model, policy, &prompt, 3, None).unwrap();
        let report = trace_flops(&run.trace, &c).unwrap();
        // Pairs (0,1) and (2,3): absorbed layers carry zero cost.
        assert_eq!(report.per_layer[1], 0);
        assert_eq!(report.per_layer[3], 0);
        assert!(report.per_layer[0] > 0);
        assert!(report.per_layer[2] > 0);
        assert_eq!(report.policy_total, report.dense_total);
        assert_eq!(report.depth_stages, 4); // two fused stages, 2 each
    }

    // ==== predictor vs trace ====

    #[test]
    fn prediction_matches_trace_across_modes_and_scopes() {
        let c = cfg(6, 8);
        let model = synth_model(&c, 4).unwrap();
        let modes = [
            PolicyMode::Dense,
            PolicyMode::SkipBlock,
            PolicyMode::SkipFfn,
            PolicyMode::SkipSa,
            PolicyMode::ParallelFfnSa,
            PolicyMode::ParallelBlocks,
        ];
        for mode in modes {
            for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
                let interval = if mode == PolicyMode::ParallelBlocks { 2 } else { 1 };
                let policy = ComputePolicy::new(mode, 1, interval, scope);
                let prompt = PromptInput::text_only(vec![2, 7, 9]);
                let run = generate(&model, policy, &prompt, 5, None).unwrap();
                let from_trace = trace_flops(&run.trace, &c).unwrap();
                let schedule = resolve_schedule(&policy, c.n_layers).unwrap();
                let predicted = predict_flops(
                    &schedule,
                    &policy,
                    &c,
                    prompt.len(),
                    run.trace.n_positions() - prompt.len(),
                )
                .unwrap();
                assert_eq!(predicted, from_trace, "mode {mode:?} scope {scope}");
            }
        }
    }

    #[test]
    fn prediction_matches_trace_with_perceptual_prompt() {
        let c = cfg(4, 8);
        let model = synth_model(&c, 5).unwrap();
        let mut rows = crate::numerics::Matrix::zeros(3, 8);
        for j in 0..8 {
            rows.set(1, j, 0.25 * j as f32);
        }
        let prompt = PromptInput {
            perceptual: Some(rows),
            text_token_ids: vec![1, 2],
        };
        for scope in [TokenScope::GENERATED_ONLY, TokenScope::ALL] {
            let policy = ComputePolicy::new(PolicyMode::SkipFfn, 0, 2, scope);
            let run = generate(&model, policy, &prompt, 4, None).unwrap();
            let from_trace = trace_flops(&run.trace, &c).unwrap();
            let schedule = resolve_schedule(&policy, c.n_layers).unwrap();
            let predicted = predict_flops(
                &schedule,
                &policy,
                &c,
                prompt.len(),
                run.trace.n_positions() - prompt.len(),
            )
            .unwrap();
            assert_eq!(predicted, from_trace, "scope {scope}");
        }
    }

    #[test]
    fn prediction_rejects_empty_and_mismatched() {
        let c = cfg(2, 8);
        let policy = ComputePolicy::dense();
        let schedule = resolve_schedule(&policy, 2).unwrap();
        assert!(matches!(
            predict_flops(&schedule, &policy, &c, 0, 0),
            Err(Error::Range(_))
        ));
        let other = cfg(3, 8);
        assert!(matches!(
            predict_flops(&schedule, &policy, &other, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn totals_grow_with_generated_tokens() {
        let c = cfg(4, 8);
        let policy = ComputePolicy::new(PolicyMode::SkipSa, 0, 2, TokenScope::GENERATED_ONLY);
        let schedule = resolve_schedule(&policy, 4).unwrap();
        let mut prev = 0;
        for n_generated in 1..6 {
            let report = predict_flops(&schedule, &policy, &c, 3, n_generated).unwrap();
            assert!(report.policy_total > prev);
            prev = report.policy_total;
        }
    }

    #[test]
    fn per_action_keys_are_stable() {
        let c = cfg(2, 8);
        let policy = ComputePolicy::dense();
        let schedule = resolve_schedule(&policy, 2).unwrap();
        let report = predict_flops(&schedule, &policy, &c, 1, 0).unwrap();
        let keys: Vec<&str> = report.per_action.keys().map(|s| s.as_str()).collect();
        assert_eq!(
            keys,
            vec![
                "execute",
                "parallel_absorbed",
                "parallel_ffn_sa",
                "parallel_lead",
                "skip_block",
                "skip_ffn",
                "skip_sa",
            ]
        );
    }
}
