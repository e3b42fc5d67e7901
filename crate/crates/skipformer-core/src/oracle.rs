//! Full-recompute reference executor.
//!
//! The oracle recomputes the entire sequence through the scheduled stack at
//! every decode step: no KV cache, no incremental state. Each layer is
//! evaluated synchronously across all positions with full-matrix causal
//! attention, where a token that wrote no K/V at a layer under its action
//! simply has no column there — mirroring the runtime's no-write rule from
//! the other direction.
//!
//! It deliberately shares the numeric kernels and the per-sub-layer forward
//! pieces (`ffn`, `embed`, `unembed`, `layer_norm`) with the model module —
//! the arithmetic must be the same — but reimplements attention composition,
//! the layer walk, and fused block pairs from scratch. Differential tests
//! between this and the incremental runtime therefore exercise exactly the
//! scheduling and cache logic, which is where the bugs of interest live.

use crate::error::{Error, Result};
use crate::model::{self, BlockWeights, Model};
use crate::numerics::{add, argmax, layer_norm, matvec, softmax, sub};
use crate::policy::{
    action_for, resolve_schedule, ComputePolicy, LayerAction, LayerSchedule, TokenClass,
};
use crate::runtime::{classify_tokens, KvEntry, PromptInput};

/// Reference generation outcome: per-step logits and the emitted tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub output_token_ids: Vec<usize>,
    pub step_logits: Vec<Vec<f32>>,
}

/// Per-position K/V columns at one layer; `None` where the token wrote
/// nothing under its action.
type KvColumns = Vec<Option<(Vec<f32>, Vec<f32>)>>;

/// Full-matrix causal attention for the query at `p`: attends over every
/// position q <= p that has a K/V column, ascending. Arithmetic matches the
/// runtime kernel step for step (scores summed then scaled, value rows
/// accumulated in position order).
fn full_attention(
    block: &BlockWeights,
    cfg: &model::ModelConfig,
    q_src: &[f32],
    p: usize,
    columns: &KvColumns,
) -> Result<Vec<f32>> {
    let q = matvec(q_src, &block.wq)?;
    let d_head = cfg.d_head();
    let scale = 1.0f32 / (d_head as f32).sqrt();
    let visible: Vec<&(Vec<f32>, Vec<f32>)> =
        columns[..=p].iter().flatten().collect();
    if visible.is_empty() {
        return Err(Error::Internal(format!(
            "query at position {p} has no visible attention column"
        )));
    }
    let mut concat = vec![0.0f32; cfg.d_model];
    for h in 0..cfg.n_heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let q_h = &q[lo..hi];
        let mut scores = Vec::with_capacity(visible.len());
        for (key, _) in &visible {
            let mut s = 0.0f32;
            for (a, b) in q_h.iter().zip(&key[lo..hi]) {
                s += a * b;
            }
            scores.push(s * scale);
        }
        let weights = softmax(&scores);
        let out = &mut concat[lo..hi];
        for (w, (_, value)) in weights.iter().zip(&visible) {
            for (o, v) in out.iter_mut().zip(&value[lo..hi]) {
                *o += w * v;
            }
        }
    }
    matvec(&concat, &block.wo)
}

/// LN1 of a hidden state plus the K/V columns it would write.
fn kv_column(block: &BlockWeights, cfg: &model::ModelConfig, hidden: &[f32]) -> Result<(Vec<f32>, (Vec<f32>, Vec<f32>))> {
    let ln1_out = layer_norm(hidden, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
    let key = matvec(&ln1_out, &block.wk)?;
    let value = matvec(&ln1_out, &block.wv)?;
    Ok((ln1_out, (key, value)))
}

/// Full standard block at one position given precomputed LN1 output and the
/// layer's K/V columns.
fn standard_from_columns(
    block: &BlockWeights,
    cfg: &model::ModelConfig,
    hidden: &[f32],
    ln1_out: &[f32],
    p: usize,
    columns: &KvColumns,
) -> Result<Vec<f32>> {
    let sa = full_attention(block, cfg, ln1_out, p, columns)?;
    let x1 = add(hidden, &sa)?;
    let ln2_out = layer_norm(&x1, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
    let f = model::ffn(block, &ln2_out, cfg)?;
    add(&x1, &f)
}

/// One ordinary (non-fused) layer, synchronously across all positions.
/// Returns the next hidden states and the K/V columns written here.
fn single_layer(
    model: &Model,
    layer: usize,
    hidden: &[Vec<f32>],
    actions: &[LayerAction],
) -> Result<(Vec<Vec<f32>>, KvColumns)> {
    let cfg = &model.config;
    let block = &model.blocks[layer];
    // Pass 1: LN1 and K/V columns for every position that writes.
    let mut ln1_outs: Vec<Option<Vec<f32>>> = vec![None; hidden.len()];
    let mut columns: KvColumns = vec![None; hidden.len()];
    for (p, h) in hidden.iter().enumerate() {
        if actions[p].writes_kv() {
            let (ln1_out, kv) = kv_column(block, cfg, h)?;
            ln1_outs[p] = Some(ln1_out);
            columns[p] = Some(kv);
        }
    }
    // Pass 2: per-position outputs under each action.
    let mut next = Vec::with_capacity(hidden.len());
    for (p, h) in hidden.iter().enumerate() {
        let out = match actions[p] {
            LayerAction::Execute => {
                let ln1_out = ln1_outs[p].as_ref().expect("writer has LN1");
                standard_from_columns(block, cfg, h, ln1_out, p, &columns)?
            }
            LayerAction::SkipFfn => {
                let ln1_out = ln1_outs[p].as_ref().expect("writer has LN1");
                let sa = full_attention(block, cfg, ln1_out, p, &columns)?;
                add(h, &sa)?
            }
            LayerAction::ParallelFfnSa => {
                let ln1_out = ln1_outs[p].as_ref().expect("writer has LN1");
                let sa = full_attention(block, cfg, ln1_out, p, &columns)?;
                let ln2_out = layer_norm(h, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
                let f = model::ffn(block, &ln2_out, cfg)?;
                add(&add(h, &f)?, &sa)?
            }
            LayerAction::SkipSa => {
                let ln1_out = layer_norm(h, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
                let ln2_out =
                    layer_norm(&ln1_out, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
                let f = model::ffn(block, &ln2_out, cfg)?;
                add(h, &f)?
            }
            LayerAction::SkipBlock => h.clone(),
            LayerAction::ParallelLead { .. } | LayerAction::ParallelAbsorbed => {
                return Err(Error::Internal(
                    "fused actions must go through the paired stage".into(),
                ));
            }
        };
        next.push(out);
    }
    Ok((next, columns))
}

/// A fused pair of layers (lead + partner). In-scope tokens take both block
/// residuals at the stage input and sum them; out-of-scope tokens run the
/// two blocks sequentially. Every token writes K/V at both layers, but
/// in-scope tokens derive their layer-(l+1) column from the stage input
/// while out-of-scope tokens derive it from their post-layer-l state.
fn fused_pair(
    model: &Model,
    lead: usize,
    partner: usize,
    hidden: &[Vec<f32>],
    fused: &[bool],
) -> Result<(Vec<Vec<f32>>, KvColumns, KvColumns)> {
    let cfg = &model.config;
    let block_a = &model.blocks[lead];
    let block_b = &model.blocks[partner];
    let n = hidden.len();

    // Layer `lead`: everyone executes the full block from the stage input.
    let mut ln1_a: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut columns_a: KvColumns = vec![None; n];
    for (p, h) in hidden.iter().enumerate() {
        let (ln1_out, kv) = kv_column(block_a, cfg, h)?;
        ln1_a[p] = Some(ln1_out);
        columns_a[p] = Some(kv);
    }
    let mut after_a = Vec::with_capacity(n);
    for (p, h) in hidden.iter().enumerate() {
        let ln1_out = ln1_a[p].as_ref().expect("all positions write");
        after_a.push(standard_from_columns(block_a, cfg, h, ln1_out, p, &columns_a)?);
    }

    // Layer `partner`: fused tokens re-enter with the stage input; others
    // carry the layer-`lead` output forward.
    let inputs_b: Vec<&Vec<f32>> = (0..n)
        .map(|p| if fused[p] { &hidden[p] } else { &after_a[p] })
        .collect();
    let mut ln1_b: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut columns_b: KvColumns = vec![None; n];
    for (p, h) in inputs_b.iter().enumerate() {
        let (ln1_out, kv) = kv_column(block_b, cfg, h)?;
        ln1_b[p] = Some(ln1_out);
        columns_b[p] = Some(kv);
    }
    let mut next = Vec::with_capacity(n);
    for (p, input_b) in inputs_b.iter().enumerate() {
        let ln1_out = ln1_b[p].as_ref().expect("all positions write");
        let out_b = standard_from_columns(block_b, cfg, input_b, ln1_out, p, &columns_b)?;
        if fused[p] {
            // x_out = (x + r_lead) + r_partner, both residuals at x.
            let r_a = sub(&after_a[p], &hidden[p])?;
            let r_b = sub(&out_b, input_b)?;
            next.push(add(&add(&hidden[p], &r_a)?, &r_b)?);
        } else {
            next.push(out_b);
        }
    }
    Ok((next, columns_a, columns_b))
}

/// K/V columns for one layer converted to cache-style entries in ascending
/// position order.
fn columns_to_entries(columns: KvColumns) -> Vec<KvEntry> {
    columns
        .into_iter()
        .enumerate()
        .filter_map(|(position, col)| {
            col.map(|(key, value)| KvEntry {
                position,
                key,
                value,
            })
        })
        .collect()
}

/// Runs the scheduled stack over a materialized sequence, returning the last
/// hidden states and the per-layer K/V entries every token wrote.
fn run_stack(
    model: &Model,
    schedule: &LayerSchedule,
    policy: &ComputePolicy,
    token_classes: &[TokenClass],
    embedded_sequence: &[Vec<f32>],
) -> Result<(Vec<Vec<f32>>, Vec<Vec<KvEntry>>)> {
    if embedded_sequence.is_empty() {
        return Err(Error::Range("oracle sequence must be non-empty".into()));
    }
    if token_classes.len() != embedded_sequence.len() {
        return Err(Error::shape(
            "oracle_forward",
            format!(
                "{} classes vs {} embedded positions",
                token_classes.len(),
                embedded_sequence.len()
            ),
        ));
    }
    let cfg = &model.config;
    let mut hidden: Vec<Vec<f32>> = embedded_sequence.to_vec();
    let mut grid: Vec<Vec<KvEntry>> = vec![Vec::new(); cfg.n_layers];
    let mut layer = 0;
    while layer < cfg.n_layers {
        match schedule.action(layer) {
            LayerAction::ParallelLead { partner } => {
                let fused: Vec<bool> = token_classes
                    .iter()
                    .map(|&c| policy.scope.contains(c))
                    .collect();
                let (next, columns_a, columns_b) =
                    fused_pair(model, layer, partner, &hidden, &fused)?;
                hidden = next;
                grid[layer] = columns_to_entries(columns_a);
                grid[partner] = columns_to_entries(columns_b);
                layer = partner + 1;
            }
            LayerAction::ParallelAbsorbed => {
                return Err(Error::Internal(format!(
                    "schedule walk reached absorbed layer {layer} without its lead"
                )));
            }
            _ => {
                let actions: Vec<LayerAction> = token_classes
                    .iter()
                    .map(|&c| action_for(schedule, layer, c, policy.scope))
                    .collect();
                let (next, columns) = single_layer(model, layer, &hidden, &actions)?;
                hidden = next;
                grid[layer] = columns_to_entries(columns);
                layer += 1;
            }
        }
    }
    Ok((hidden, grid))
}

/// Evaluates the scheduled stack over a fully materialized sequence and
/// returns the logits at the last position.
pub fn oracle_forward(
    model: &Model,
    schedule: &LayerSchedule,
    policy: &ComputePolicy,
    token_classes: &[TokenClass],
    embedded_sequence: &[Vec<f32>],
) -> Result<Vec<f32>> {
    let (hidden, _) = run_stack(model, schedule, policy, token_classes, embedded_sequence)?;
    model::unembed(model, hidden.last().expect("non-empty"))
}

/// Recomputes the K/V entries every position should hold at every layer —
/// the reference image of the runtime's ragged cache for the same sequence.
pub fn oracle_kv_grid(
    model: &Model,
    schedule: &LayerSchedule,
    policy: &ComputePolicy,
    token_classes: &[TokenClass],
    embedded_sequence: &[Vec<f32>],
) -> Result<Vec<Vec<KvEntry>>> {
    let (_, grid) = run_stack(model, schedule, policy, token_classes, embedded_sequence)?;
    Ok(grid)
}

/// Greedy reference generation: re-embeds and re-runs the whole growing
/// sequence every step. Same argmax tie-break as the runtime.
pub fn oracle_generate(
    model: &Model,
    policy: ComputePolicy,
    prompt: &PromptInput,
    max_new: usize,
) -> Result<OracleResult> {
    prompt.validate(&model.config, max_new)?;
    let schedule = resolve_schedule(&policy, model.config.n_layers)?;
    let mut classes = classify_tokens(prompt, 0);
    let mut embedded: Vec<Vec<f32>> = Vec::with_capacity(prompt.len());
    let mut position = 0;
    if let Some(rows) = &prompt.perceptual {
        for r in 0..rows.rows() {
            embedded.push(model::embed_perceptual(model, rows.row(r), position)?);
            position += 1;
        }
    }
    for &id in &prompt.text_token_ids {
        embedded.push(model::embed(model, id, position)?);
        position += 1;
    }
    let mut result = OracleResult {
        output_token_ids: Vec::new(),
        step_logits: Vec::new(),
    };
    while result.output_token_ids.len() < max_new {
        let logits = oracle_forward(model, &schedule, &policy, &classes, &embedded)?;
        let token = argmax(&logits);
        result.output_token_ids.push(token);
        result.step_logits.push(logits);
        if result.output_token_ids.len() == max_new {
            break; // the final token is never re-processed
        }
        embedded.push(model::embed(model, token, position)?);
        classes.push(TokenClass::Generated);
        position += 1;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_model, ModelConfig};
    use crate::numerics::{ActivationKind, Matrix};
    use crate::policy::PolicyMode;
    use crate::policy::TokenScope;

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 13,
            max_positions: 32,
            activation: ActivationKind::Relu,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn dense_single_token_matches_runtime_prefill() {
        let model = synth_model(&cfg(2), 3).unwrap();
        let prompt = PromptInput::text_only(vec![4]);
        let run = crate::runtime::generate(&model, ComputePolicy::dense(), &prompt, 1, None)
            .unwrap();
        let oracle = oracle_generate(&model, ComputePolicy::dense(), &prompt, 1).unwrap();
        assert_eq!(run.output_token_ids, oracle.output_token_ids);
        for (a, b) in run.step_logits[0].iter().zip(&oracle.step_logits[0]) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn all_layers_skipped_is_embedding_only() {
        let model = synth_model(&cfg(3), 5).unwrap();
        let policy = ComputePolicy::new(PolicyMode::SkipBlock, 0, 1, TokenScope::ALL);
        let schedule = resolve_schedule(&policy, 3).unwrap();
        let e0 = model::embed(&model, 2, 0).unwrap();
        let e1 = model::embed(&model, 7, 1).unwrap();
        let logits = oracle_forward(
            &model,
            &schedule,
            &policy,
            &[TokenClass::Text, TokenClass::Text],
            &[e0, e1.clone()],
        )
        .unwrap();
        let expected = model::unembed(&model, &e1).unwrap();
        assert_eq!(
            logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn masked_out_token_is_invisible_to_later_queries() {
        // Token 0 skips SA at the only layer (writes no column), so token 1
        // attends over itself alone — exactly as if it were the only token
        // in the sequence with its own embedding.
        let model = synth_model(&cfg(1), 6).unwrap();
        let policy = ComputePolicy::new(PolicyMode::SkipSa, 0, 1, TokenScope::GENERATED_ONLY);
        let schedule = resolve_schedule(&policy, 1).unwrap();
        let e0 = model::embed(&model, 1, 0).unwrap();
        let e1 = model::embed(&model, 2, 1).unwrap();
        let with_skipped = oracle_forward(
            &model,
            &schedule,
            &policy,
            &[TokenClass::Generated, TokenClass::Text],
            &[e0, e1.clone()],
        )
        .unwrap();
        let alone = oracle_forward(
            &model,
            &schedule,
            &policy,
            &[TokenClass::Text],
            &[e1],
        )
        .unwrap();
        assert_eq!(
            with_skipped.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            alone.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn oracle_is_deterministic() {
        let model = synth_model(&cfg(4), 7).unwrap();
        let policy = ComputePolicy::new(PolicyMode::ParallelBlocks, 0, 2, TokenScope::ALL);
        let prompt = PromptInput::text_only(vec![1, 2, 3]);
        let a = oracle_generate(&model, policy, &prompt, 5).unwrap();
        let b = oracle_generate(&model, policy, &prompt, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_computed_single_block_forward() {
        // d=2, N=1, vocab=3, one head, ffn identity-shaped, eps tiny enough
        // to ignore. Input x = [1, -1] (zero mean, unit variance):
        //   LN1(x) = [1, -1]
        //   wq = wk = 0          -> score 0, softmax over self = 1
        //   wv = wo = I          -> SA = LN1(x) = [1, -1]
        //   x1 = x + SA = [2, -2]
        //   LN2(x1) = [1, -1]
        //   fc1 = fc2 = I, ReLU  -> FFN = ReLU([1, -1]) = [1, 0]
        //   out = x1 + FFN = [3, -2]
        //   final LN: mean 0.5, var 6.25 -> [1, -1]
        //   unembedding [[1,0,2],[0,3,1]] -> logits [1, -3, 1]
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_ff: 2,
            vocab_size: 3,
            max_positions: 4,
            activation: ActivationKind::Relu,
            ln_eps: 1e-9,
        };
        let eye = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let block = crate::model::BlockWeights {
            ln1_gamma: vec![1.0; 2],
            ln1_beta: vec![0.0; 2],
            wq: Matrix::zeros(2, 2),
            wk: Matrix::zeros(2, 2),
            wv: eye.clone(),
            wo: eye.clone(),
            ln2_gamma: vec![1.0; 2],
            ln2_beta: vec![0.0; 2],
            fc1: eye.clone(),
            fc1_bias: vec![0.0; 2],
            fc2: eye.clone(),
            fc2_bias: vec![0.0; 2],
        };
        let model = Model {
            config: cfg,
            blocks: vec![block],
            token_embedding: Matrix::zeros(3, 2),
            position_embedding: Matrix::zeros(4, 2),
            final_ln_gamma: vec![1.0; 2],
            final_ln_beta: vec![0.0; 2],
            unembedding: Matrix::new(2, 3, vec![1.0, 0.0, 2.0, 0.0, 3.0, 1.0]).unwrap(),
        };
        let schedule = resolve_schedule(&ComputePolicy::dense(), 1).unwrap();
        let logits = oracle_forward(
            &model,
            &schedule,
            &ComputePolicy::dense(),
            &[TokenClass::Text],
            &[vec![1.0, -1.0]],
        )
        .unwrap();
        assert!((logits[0] - 1.0).abs() < 1e-5, "{logits:?}");
        assert!((logits[1] + 3.0).abs() < 1e-5, "{logits:?}");
        assert!((logits[2] - 1.0).abs() < 1e-5, "{logits:?}");
        assert_eq!(argmax(&logits), 0); // tie between 0 and 2 -> lowest
    }

    #[test]
    fn kv_grid_matches_runtime_cache_bitwise() {
        let model = synth_model(&cfg(4), 8).unwrap();
        for (mode, interval) in [
            (PolicyMode::Dense, 1),
            (PolicyMode::SkipBlock, 2),
            (PolicyMode::ParallelBlocks, 2),
        ] {
            let policy = ComputePolicy::new(mode, 0, interval, TokenScope::ALL);
            let prompt = PromptInput::text_only(vec![2, 5, 9]);
            let mut session = crate::runtime::Session::new(&model, policy).unwrap();
            session.prefill(&prompt).unwrap();
            let schedule = resolve_schedule(&policy, 4).unwrap();
            let classes = vec![TokenClass::Text; 3];
            let embedded: Vec<Vec<f32>> = (0..3)
                .map(|p| model::embed(&model, [2, 5, 9][p], p).unwrap())
                .collect();
            let grid = oracle_kv_grid(&model, &schedule, &policy, &classes, &embedded).unwrap();
            for layer in 0..4 {
                let cache_entries = session.cache().entries(layer);
                assert_eq!(cache_entries.len(), grid[layer].len(), "{mode:?} layer {layer}");
                for (a, b) in cache_entries.iter().zip(&grid[layer]) {
                    assert_eq!(a.position, b.position);
                    let ka: Vec<u32> = a.key.iter().map(|v| v.to_bits()).collect();
                    let kb: Vec<u32> = b.key.iter().map(|v| v.to_bits()).collect();
                    let va: Vec<u32> = a.value.iter().map(|v| v.to_bits()).collect();
                    let vb: Vec<u32> = b.value.iter().map(|v| v.to_bits()).collect();
                    assert_eq!(ka, kb, "{mode:?} layer {layer} keys");
                    assert_eq!(va, vb, "{mode:?} layer {layer} values");
                }
            }
        }
    }

    #[test]
    fn prompt_only_generation() {
        let model = synth_model(&cfg(2), 9).unwrap();
        let prompt = PromptInput::text_only(vec![1, 2]);
        let r = oracle_generate(&model, ComputePolicy::dense(), &prompt, 0).unwrap();
        assert!(r.output_token_ids.is_empty());
        assert!(r.step_logits.is_empty());
    }
}
