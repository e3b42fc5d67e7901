//! Decoder-only pre-LN transformer: configuration, weights, and the block
//! forward variants.
//!
//! The standard block is
//!
//! ```text
//! x1    = x  + SA(LN1(x))
//! x_out = x1 + FFN(LN2(x1))
//! ```
//!
//! with biases only on FC1/FC2 (attention projections are bias-free) and
//! learned absolute position embeddings. The structural variants rearrange
//! exactly these pieces:
//!
//! - skip FFN:  `x_out = x + SA(LN1(x))`
//! - skip SA:   `x_out = x + FFN(LN2(LN1(x)))` — the double normalisation is
//!   deliberate and implemented literally, not simplified to one LN
//! - parallel FFN+SA: `x_out = x + FFN(LN2(x)) + SA(LN1(x))`, both branches
//!   reading the same input
//! - block residual: `r = block_standard(x).x_out - x`, the building piece
//!   for running two adjacent blocks as one fused stage
//!
//! Every variant that runs self-attention also produces the token's K/V pair
//! (`KvWrite`); variants that skip SA produce none. That rule is decided
//! here and consumed by the runtime's ragged cache.
//!
//! All row vectors multiply matrices from the left (`x @ W`), so weights are
//! stored input-dim × output-dim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    activation, add, layer_norm, matvec, softmax, sub, ActivationKind, Matrix,
};
use crate::rng::SplitMix64;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

fn default_ln_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps must be finite and > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one block. Matrices are input-dim × output-dim (`x @ W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f32>, // d_model
    pub ln1_beta: Vec<f32>,  // d_model
    pub wq: Matrix,          // d_model x d_model
    pub wk: Matrix,          // d_model x d_model
    pub wv: Matrix,          // d_model x d_model
    pub wo: Matrix,          // d_model x d_model
    pub ln2_gamma: Vec<f32>, // d_model
    pub ln2_beta: Vec<f32>,  // d_model
    pub fc1: Matrix,         // d_model x d_ff
    pub fc1_bias: Vec<f32>,  // d_ff
    pub fc2: Matrix,         // d_ff x d_model
    pub fc2_bias: Vec<f32>,  // d_model
}

impl BlockWeights {
    /// All-zero block (zero LN gains included): both residual branches
    /// vanish, so the block is the identity. Test scaffolding.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        BlockWeights {
            ln1_gamma: vec![0.0; d],
            ln1_beta: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gamma: vec![0.0; d],
            ln2_beta: vec![0.0; d],
            fc1: Matrix::zeros(d, cfg.d_ff),
            fc1_bias: vec![0.0; cfg.d_ff],
            fc2: Matrix::zeros(cfg.d_ff, d),
            fc2_bias: vec![0.0; d],
        }
    }
}

/// Complete model: blocks plus embeddings and the logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<BlockWeights>,
    pub token_embedding: Matrix,    // vocab_size x d_model
    pub position_embedding: Matrix, // max_positions x d_model
    pub final_ln_gamma: Vec<f32>,   // d_model
    pub final_ln_beta: Vec<f32>,    // d_model
    pub unembedding: Matrix,        // d_model x vocab_size
}

/// The K/V pair a token contributes at a layer where it runs SA.
#[derive(Debug, Clone, PartialEq)]
pub struct KvWrite {
    pub key: Vec<f32>,   // d_model (all heads concatenated)
    pub value: Vec<f32>, // d_model
}

/// Attention context for one query: the K/V entries visible to it, in
/// ascending position order, each at most the query position. Keys and
/// values are full d_model rows; heads are sliced out inside the kernel.
#[derive(Debug, Clone)]
pub struct AttentionContext<'a> {
    query_position: usize,
    entries: Vec<(usize, &'a [f32], &'a [f32])>, // (position, key, value)
}

impl<'a> AttentionContext<'a> {
    pub fn new(query_position: usize) -> Self {
        AttentionContext {
            query_position,
            entries: Vec::new(),
        }
    }

    /// Appends an entry; positions must arrive strictly ascending and never
    /// exceed the query position (causality).
    pub fn push(&mut self, position: usize, key: &'a [f32], value: &'a [f32]) {
        debug_assert!(position <= self.query_position, "acausal attention entry");
        debug_assert!(
            self.entries.last().map_or(true, |(p, _, _)| *p < position),
            "attention entries out of order"
        );
        self.entries.push((position, key, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query_position(&self) -> usize {
        self.query_position
    }
}

/// Which linear map inside a block an activation feeds. Used by the
/// calibration tap and by pruning to address the six pruned matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Wq,
    Wk,
    Wv,
    Wo,
    Fc1,
    Fc2,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::Wq,
        LinearKind::Wk,
        LinearKind::Wv,
        LinearKind::Wo,
        LinearKind::Fc1,
        LinearKind::Fc2,
    ];

    /// Tensor-table name component ("wq", "fc1", ...).
    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Wq => "wq",
            LinearKind::Wk => "wk",
            LinearKind::Wv => "wv",
            LinearKind::Wo => "wo",
            LinearKind::Fc1 => "fc1",
            LinearKind::Fc2 => "fc2",
        }
    }
}

/// Observer for linear-layer inputs during a forward pass; receives
/// `(which linear, its input activation)` once per token per linear.
/// Calibration for pruning is the only consumer.
pub type ActivationTap<'a> = dyn FnMut(LinearKind, &[f32]) + 'a;

fn fire(tap: &mut Option<&mut ActivationTap<'_>>, kind: LinearKind, x: &[f32]) {
    if let Some(f) = tap.as_mut() {
        f(kind, x);
    }
}

fn sa_inner(
    block: &BlockWeights,
    x_norm: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
    tap: &mut Option<&mut ActivationTap<'_>>,
) -> Result<Vec<f32>> {
    if ctx.is_empty() {
        return Err(Error::Internal(
            "self-attention called with empty context".into(),
        ));
    }
    fire(tap, LinearKind::Wq, x_norm);
    let q = matvec(x_norm, &block.wq)?;
    let d_head = cfg.d_head();
    let scale = 1.0f32 / (d_head as f32).sqrt();
    // Heads are contiguous d_head slices of the projected vectors.
    let mut concat = vec![0.0f32; cfg.d_model];
    for h in 0..cfg.n_heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let q_h = &q[lo..hi];
        let mut scores = Vec::with_capacity(ctx.entries.len());
        for (_, key, _) in &ctx.entries {
            let mut s = 0.0f32;
            for (a, b) in q_h.iter().zip(&key[lo..hi]) {
                s += a * b;
            }
            scores.push(s * scale);
        }
        let weights = softmax(&scores);
        // Weighted value sum in entry order (ascending position).
        let out = &mut concat[lo..hi];
        for (w, (_, _, value)) in weights.iter().zip(&ctx.entries) {
            for (o, v) in out.iter_mut().zip(&value[lo..hi]) {
                *o += w * v;
            }
        }
    }
    fire(tap, LinearKind::Wo, &concat);
    matvec(&concat, &block.wo)
}

/// Multi-head causal self-attention over an explicit context; returns the
/// residual contribution (not yet added to x). The context must already
/// include the query's own entry when it writes one.
pub fn self_attention(
    block: &BlockWeights,
    x_norm: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
) -> Result<Vec<f32>> {
    sa_inner(block, x_norm, ctx, cfg, &mut None)
}

fn ffn_inner(
    block: &BlockWeights,
    x_norm: &[f32],
    cfg: &ModelConfig,
    tap: &mut Option<&mut ActivationTap<'_>>,
) -> Result<Vec<f32>> {
    fire(tap, LinearKind::Fc1, x_norm);
    let mut hidden = matvec(x_norm, &block.fc1)?;
    for (h, b) in hidden.iter_mut().zip(&block.fc1_bias) {
        *h += b;
    }
    let activated = activation(&hidden, cfg.activation);
    fire(tap, LinearKind::Fc2, &activated);
    let mut out = matvec(&activated, &block.fc2)?;
    for (o, b) in out.iter_mut().zip(&block.fc2_bias) {
        *o += b;
    }
    Ok(out)
}

/// Feed-forward sub-layer `FC2(g(FC1(x) + b1)) + b2`; returns the residual
/// contribution.
pub fn ffn(block: &BlockWeights, x_norm: &[f32], cfg: &ModelConfig) -> Result<Vec<f32>> {
    ffn_inner(block, x_norm, cfg, &mut None)
}

/// Computes this token's K/V from the normalised input and returns the
/// context extended with it, so SA always sees the token itself.
fn own_kv(
    block: &BlockWeights,
    ln1_out: &[f32],
    tap: &mut Option<&mut ActivationTap<'_>>,
) -> Result<KvWrite> {
    fire(tap, LinearKind::Wk, ln1_out);
    let key = matvec(ln1_out, &block.wk)?;
    fire(tap, LinearKind::Wv, ln1_out);
    let value = matvec(ln1_out, &block.wv)?;
    Ok(KvWrite { key, value })
}

fn extend_ctx<'a>(
    prior: &AttentionContext<'a>,
    own: &'a KvWrite,
) -> AttentionContext<'a> {
    let mut full = AttentionContext::new(prior.query_position);
    for (p, k, v) in &prior.entries {
        full.push(*p, k, v);
    }
    full.push(prior.query_position, &own.key, &own.value);
    full
}

fn block_standard_inner(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
    tap: &mut Option<&mut ActivationTap<'_>>,
) -> Result<(Vec<f32>, KvWrite)> {
    let ln1_out = layer_norm(x, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
    let own = own_kv(block, &ln1_out, tap)?;
    let full = extend_ctx(ctx, &own);
    let sa = sa_inner(block, &ln1_out, &full, cfg, tap)?;
    let x1 = add(x, &sa)?;
    let ln2_out = layer_norm(&x1, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
    let f = ffn_inner(block, &ln2_out, cfg, tap)?;
    let x_out = add(&x1, &f)?;
    Ok((x_out, own))
}

/// Standard pre-LN block. `ctx` holds the prior entries only (positions
/// strictly before the query); the token's own K/V is computed here, exposed
/// to its own attention, and returned for the caller to cache.
pub fn block_standard(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<f32>, KvWrite)> {
    block_standard_inner(block, x, ctx, cfg, &mut None)
}

/// [`block_standard`] with an activation tap observing every linear input.
pub fn block_standard_tapped(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
    tap: &mut ActivationTap<'_>,
) -> Result<(Vec<f32>, KvWrite)> {
    block_standard_inner(block, x, ctx, cfg, &mut Some(tap))
}

/// FFN-skipping block: `x_out = x + SA(LN1(x))`. SA still runs, so K/V is
/// still written.
pub fn block_skip_ffn(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<f32>, KvWrite)> {
    let ln1_out = layer_norm(x, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
    let own = own_kv(block, &ln1_out, &mut None)?;
    let full = extend_ctx(ctx, &own);
    let sa = sa_inner(block, &ln1_out, &full, cfg, &mut None)?;
    let x_out = add(x, &sa)?;
    Ok((x_out, own))
}

/// SA-skipping block: `x_out = x + FFN(LN2(LN1(x)))`.
///
/// The composed double normalisation is the stated formula, kept literally.
/// No K/V is written — this token is invisible to later queries at this
/// layer.
pub fn block_skip_sa(block: &BlockWeights, x: &[f32], cfg: &ModelConfig) -> Result<Vec<f32>> {
    let ln1_out = layer_norm(x, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
    let ln2_out = layer_norm(&ln1_out, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
    let f = ffn(block, &ln2_out, cfg)?;
    add(x, &f)
}

/// Parallel FFN+SA block: `x_out = (x + FFN(LN2(x))) + SA(LN1(x))`, both
/// branches reading the same input, summed left to right. Same work as the
/// standard block, one sequential stage instead of two. With Wo = 0 the SA
/// branch is exactly 0 and the output coincides bitwise with
/// [`block_standard`].
pub fn block_parallel_ffn_sa(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<f32>, KvWrite)> {
    let ln1_out = layer_norm(x, &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps)?;
    let own = own_kv(block, &ln1_out, &mut None)?;
    let full = extend_ctx(ctx, &own);
    let sa = sa_inner(block, &ln1_out, &full, cfg, &mut None)?;
    let ln2_out = layer_norm(x, &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps)?;
    let f = ffn(block, &ln2_out, cfg)?;
    let x_out = add(&add(x, &f)?, &sa)?;
    Ok((x_out, own))
}

/// Residual contribution of a full standard block:
/// `r = block_standard(x).x_out - x`. Two adjacent blocks run as one fused
/// stage by taking both residuals at the same input and summing:
/// `x_out = (x + r_l) + r_{l+1}`.
pub fn block_residual(
    block: &BlockWeights,
    x: &[f32],
    ctx: &AttentionContext<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<f32>, KvWrite)> {
    let (x_out, own) = block_standard(block, x, ctx, cfg)?;
    Ok((sub(&x_out, x)?, own))
}

/// Token embedding + absolute position embedding.
pub fn embed(model: &Model, token_id: usize, position: usize) -> Result<Vec<f32>> {
    if token_id >= model.config.vocab_size {
        return Err(Error::Range(format!(
            "token id {token_id} >= vocab_size {}",
            model.config.vocab_size
        )));
    }
    if position >= model.config.max_positions {
        return Err(Error::Range(format!(
            "position {position} >= max_positions {}",
            model.config.max_positions
        )));
    }
    add(model.token_embedding.row(token_id), model.position_embedding.row(position))
}

/// A pre-computed perceptual row entering the sequence at `position`. Gets
/// the same absolute position embedding as token rows, so the stack sees one
/// uniform positional scheme.
pub fn embed_perceptual(model: &Model, row: &[f32], position: usize) -> Result<Vec<f32>> {
    if row.len() != model.config.d_model {
        return Err(Error::shape(
            "embed_perceptual",
            format!("row dim {} vs d_model {}", row.len(), model.config.d_model),
        ));
    }
    if position >= model.config.max_positions {
        return Err(Error::Range(format!(
            "position {position} >= max_positions {}",
            model.config.max_positions
        )));
    }
    add(row, model.position_embedding.row(position))
}

/// Logit head: final layer norm then the unembedding projection.
pub fn unembed(model: &Model, x: &[f32]) -> Result<Vec<f32>> {
    let normed = layer_norm(x, &model.final_ln_gamma, &model.final_ln_beta, model.config.ln_eps)?;
    matvec(&normed, &model.unembedding)
}

// ---------------------------------------------------------------------------
// Seeded synthesis
// ---------------------------------------------------------------------------

fn synth_value(rng: &mut SplitMix64) -> f32 {
    // Map in f64, cast once: w = u01 * 0.2 - 0.1, i.e. uniform [-0.1, 0.1).
    (rng.next_unit() * 0.2 - 0.1) as f32
}

fn synth_gamma_value(rng: &mut SplitMix64) -> f32 {
    // Gains sit around identity: uniform [0.9, 1.1).
    (rng.next_unit() * 0.2 - 0.1 + 1.0) as f32
}

fn synth_vec(rng: &mut SplitMix64, len: usize) -> Vec<f32> {
    (0..len).map(|_| synth_value(rng)).collect()
}

fn synth_gamma_vec(rng: &mut SplitMix64, len: usize) -> Vec<f32> {
    (0..len).map(|_| synth_gamma_value(rng)).collect()
}

fn synth_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    // Row-major fill order, matching the serialized layout.
    let data = (0..rows * cols).map(|_| synth_value(rng)).collect();
    Matrix::new(rows, cols, data).expect("synth dimensions are consistent")
}

/// Deterministic synthetic model: one SplitMix64 stream, consumed in a fixed
/// documented order — per block `ln1_gamma, ln1_beta, wq, wk, wv, wo,
/// ln2_gamma, ln2_beta, fc1, fc1_bias, fc2, fc2_bias` (matrices row-major),
/// then token embedding, position embedding, final LN gamma, final LN beta,
/// unembedding. Same `(cfg, seed)` always yields the bitwise-same model.
pub fn synth_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let d = cfg.d_model;
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockWeights {
            ln1_gamma: synth_gamma_vec(&mut rng, d),
            ln1_beta: synth_vec(&mut rng, d),
            wq: synth_matrix(&mut rng, d, d),
            wk: synth_matrix(&mut rng, d, d),
            wv: synth_matrix(&mut rng, d, d),
            wo: synth_matrix(&mut rng, d, d),
            ln2_gamma: synth_gamma_vec(&mut rng, d),
            ln2_beta: synth_vec(&mut rng, d),
            fc1: synth_matrix(&mut rng, d, cfg.d_ff),
            fc1_bias: synth_vec(&mut rng, cfg.d_ff),
            fc2: synth_matrix(&mut rng, cfg.d_ff, d),
            fc2_bias: synth_vec(&mut rng, d),
        })
        .collect();
    Ok(Model {
        config: *cfg,
        blocks,
        token_embedding: synth_matrix(&mut rng, cfg.vocab_size, d),
        position_embedding: synth_matrix(&mut rng, cfg.max_positions, d),
        final_ln_gamma: synth_gamma_vec(&mut rng, d),
        final_ln_beta: synth_vec(&mut rng, d),
        unembedding: synth_matrix(&mut rng, d, cfg.vocab_size),
    })
}
