//! Post-training structured pruning of the six per-block linear maps.
//!
//! Three scoring methods produce binary keep/drop masks at a given sparsity:
//! activation-aware scoring (|weight| times the L2 norm of the corresponding
//! input feature over a calibration run), plain weight magnitude, and a
//! seeded random baseline. Selection is always per output feature: each
//! output row independently drops the `floor(sparsity * fan_in)` lowest-
//! scoring input connections, so every output keeps the same fan-in.
//!
//! Scoring happens in output-major orientation (rows = output features);
//! model weights are stored input-major, so matrices are transposed at this
//! module's boundary and masks are stored back in model orientation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{self, RawTensor, DTYPE_MASK_U8};
use crate::error::{Error, Result};
use crate::model::{
    self, BlockWeights, KvWrite, LinearKind, Model, ModelConfig,
};
use crate::numerics::{argmax, Matrix};
use crate::policy::TokenClass;
use crate::rng::SplitMix64;
use crate::runtime::{classify_tokens, PromptInput};

/// Decode steps appended to every calibration prompt when generated tokens
/// are in scope.
pub const CALIB_DECODE_STEPS: usize = 8;

// ==== calibration scopes ====

/// Which token classes feed calibration statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibScope {
    /// Perceptual prompt tokens only.
    Perceptual,
    /// Text prompt tokens plus generated tokens.
    Textual,
    /// Every token.
    All,
}

impl CalibScope {
    pub fn includes(self, class: TokenClass) -> bool {
        match self {
            CalibScope::Perceptual => class == TokenClass::Perceptual,
            CalibScope::Textual => {
                class == TokenClass::Text || class == TokenClass::Generated
            }
            CalibScope::All => true,
        }
    }
}

impl FromStr for CalibScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(CalibScope::Perceptual),
            "T" => Ok(CalibScope::Textual),
            "P+T" => Ok(CalibScope::All),
            other => Err(Error::Config(format!(
                "unknown calibration scope {other:?}; expected P, T, or P+T"
            ))),
        }
    }
}

impl fmt::Display for CalibScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibScope::Perceptual => "P",
            CalibScope::Textual => "T",
            CalibScope::All => "P+T",
        })
    }
}

// ==== calibration statistics ====

/// Per-input-feature L2 norms for the six linears of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNorms {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub fc1: Vec<f32>,
    pub fc2: Vec<f32>,
}

impl LinearNorms {
    pub fn for_kind(&self, kind: LinearKind) -> &[f32] {
        match kind {
            LinearKind::Wq => &self.wq,
            LinearKind::Wk => &self.wk,
            LinearKind::Wv => &self.wv,
            LinearKind::Wo => &self.wo,
            LinearKind::Fc1 => &self.fc1,
            LinearKind::Fc2 => &self.fc2,
        }
    }
}

/// Input-activation norms collected over a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub layers: Vec<LinearNorms>,
    /// Number of in-scope tokens that contributed.
    pub token_count: usize,
}

/// Running sum of squared activations per input feature.
struct SqAcc {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    fc1: Vec<f64>,
    fc2: Vec<f64>,
}

impl SqAcc {
    fn new(cfg: &ModelConfig) -> Self {
        SqAcc {
            wq: vec![0.0; cfg.d_model],
            wk: vec![0.0; cfg.d_model],
            wv: vec![0.0; cfg.d_model],
            wo: vec![0.0; cfg.d_model],
            fc1: vec![0.0; cfg.d_model],
            fc2: vec![0.0; cfg.d_ff],
        }
    }

    fn add(&mut self, kind: LinearKind, values: &[f32]) {
        let target = match kind {
            LinearKind::Wq => &mut self.wq,
            LinearKind::Wk => &mut self.wk,
            LinearKind::Wv => &mut self.wv,
            LinearKind::Wo => &mut self.wo,
            LinearKind::Fc1 => &mut self.fc1,
            LinearKind::Fc2 => &mut self.fc2,
        };
        debug_assert_eq!(target.len(), values.len());
        for (t, v) in target.iter_mut().zip(values) {
            *t += f64::from(*v) * f64::from(*v);
        }
    }

    fn into_norms(self) -> LinearNorms {
        let root = |v: Vec<f64>| v.into_iter().map(|s| s.sqrt() as f32).collect();
        LinearNorms {
            wq: root(self.wq),
            wk: root(self.wk),
            wv: root(self.wv),
            wo: root(self.wo),
            fc1: root(self.fc1),
            fc2: root(self.fc2),
        }
    }
}

/// Runs one position through the dense stack, tapping linear inputs into the
/// accumulators when the token is in scope.
fn calibration_forward(
    model: &Model,
    writes: &mut [Vec<KvWrite>],
    acc: &mut [SqAcc],
    position: usize,
    x0: Vec<f32>,
    in_scope: bool,
) -> Result<Vec<f32>> {
    let mut x = x0;
    for (layer, block) in model.blocks.iter().enumerate() {
        let (out, kv) = {
            let mut ctx = model::AttentionContext::new(position);
            for (q, w) in writes[layer].iter().enumerate() {
                ctx.push(q, &w.key, &w.value);
            }
            if in_scope {
                let layer_acc = &mut acc[layer];
                let mut tap =
                    |kind: LinearKind, values: &[f32]| layer_acc.add(kind, values);
                model::block_standard_tapped(block, &x, &ctx, &model.config, &mut tap)?
            } else {
                model::block_standard(block, &x, &ctx, &model.config)?
            }
        };
        writes[layer].push(kv);
        x = out;
    }
    Ok(x)
}

/// Collects input-activation L2 norms over a dense greedy run of each
/// calibration prompt. When generated tokens are in scope, each prompt is
/// extended by [`CALIB_DECODE_STEPS`] greedy decode steps.
pub fn collect_calibration(
    model: &Model,
    prompts: &[PromptInput],
    scope: CalibScope,
) -> Result<CalibrationStats> {
    let cfg = &model.config;
    if prompts.is_empty() {
        return Err(Error::Calibration(
            "calibration requires at least one prompt".into(),
        ));
    }
    let decode_steps = if scope.includes(TokenClass::Generated) {
        CALIB_DECODE_STEPS
    } else {
        0
    };
    let mut acc: Vec<SqAcc> = (0..cfg.n_layers).map(|_| SqAcc::new(cfg)).collect();
    let mut token_count = 0usize;
    for prompt in prompts {
        prompt.validate(cfg, decode_steps)?;
        let mut writes: Vec<Vec<KvWrite>> = vec![Vec::new(); cfg.n_layers];
        let mut inputs: Vec<Vec<f32>> = Vec::with_capacity(prompt.len());
        if let Some(rows) = &prompt.perceptual {
            for r in 0..rows.rows() {
                inputs.push(model::embed_perceptual(model, rows.row(r), inputs.len())?);
            }
        }
        for &id in &prompt.text_token_ids {
            inputs.push(model::embed(model, id, inputs.len())?);
        }
        let classes = classify_tokens(prompt, 0);
        let mut position = 0usize;
        let mut last_hidden = Vec::new();
        for (x0, class) in inputs.into_iter().zip(classes) {
            let in_scope = scope.includes(class);
            token_count += usize::from(in_scope);
            last_hidden =
                calibration_forward(model, &mut writes, &mut acc, position, x0, in_scope)?;
            position += 1;
        }
        for _ in 0..decode_steps {
            let logits = model::unembed(model, &last_hidden)?;
            let token = argmax(&logits);
            let x0 = model::embed(model, token, position)?;
            token_count += 1; // generated tokens are in scope whenever we decode
            last_hidden =
                calibration_forward(model, &mut writes, &mut acc, position, x0, true)?;
            position += 1;
        }
    }
    if token_count == 0 {
        return Err(Error::Calibration(format!(
            "scope {scope} selected no calibration tokens"
        )));
    }
    Ok(CalibrationStats {
        layers: acc.into_iter().map(SqAcc::into_norms).collect(),
        token_count,
    })
}

// ==== masks ====

/// Binary keep/drop mask; byte 1 keeps a weight, 0 drops it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl PruneMask {
    /// All-keep mask.
    pub fn ones(rows: usize, cols: usize) -> Self {
        PruneMask {
            rows,
            cols,
            data: vec![1; rows * cols],
        }
    }

    /// All-drop mask.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PruneMask {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    /// Rebuilds a mask from raw bytes (as stored in a container).
    pub fn from_bytes(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "mask from_bytes",
                format!("{} bytes for {rows}x{cols}", data.len()),
            ));
        }
        if let Some(b) = data.iter().find(|&&b| b > 1) {
            return Err(Error::Range(format!(
                "mask byte {b} out of range; masks hold only 0 or 1"
            )));
        }
        Ok(PruneMask { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// True when the weight at (row, col) is kept.
    pub fn keep(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] == 1
    }

    fn drop_at(&mut self, row: usize, col: usize) {
        self.data[row * self.cols + col] = 0;
    }

    pub fn zeros_in_row(&self, row: usize) -> usize {
        self.data[row * self.cols..(row + 1) * self.cols]
            .iter()
            .filter(|&&b| b == 0)
            .count()
    }

    pub fn total_zeros(&self) -> usize {
        self.data.iter().filter(|&&b| b == 0).count()
    }

    /// Fraction of dropped weights.
    pub fn realized_sparsity(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.total_zeros() as f64 / self.data.len() as f64
        }
    }

    pub fn transposed(&self) -> PruneMask {
        let mut out = PruneMask::ones(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Range(format!(
            "sparsity {sparsity} out of range; expected 0 <= s < 1"
        )));
    }
    Ok(())
}

/// Drops the `floor(sparsity * cols)` lowest-scoring entries of every row.
/// Score ties break toward dropping the higher column index, so the kept set
/// is fully determined.
pub fn prune_per_output(scores: &Matrix, sparsity: f64) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    let drop_per_row = (sparsity * scores.cols() as f64).floor() as usize;
    let mut mask = PruneMask::ones(scores.rows(), scores.cols());
    for row in 0..scores.rows() {
        let mut order: Vec<usize> = (0..scores.cols()).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(row, a)
                .total_cmp(&scores.get(row, b))
                .then(b.cmp(&a))
        });
        for &col in order.iter().take(drop_per_row) {
            mask.drop_at(row, col);
        }
    }
    Ok(mask)
}

/// Activation-aware scores: |weight| scaled by the input feature's norm.
/// `weight` is output-major (rows = output features); `norms` has one entry
/// per input feature.
pub fn wanda_scores(weight: &Matrix, norms: &[f32]) -> Result<Matrix> {
    if norms.len() != weight.cols() {
        return Err(Error::shape(
            "wanda_scores",
            format!("{} norms for {} input features", norms.len(), weight.cols()),
        ));
    }
    let mut scores = Matrix::zeros(weight.rows(), weight.cols());
    for r in 0..weight.rows() {
        for c in 0..weight.cols() {
            scores.set(r, c, weight.get(r, c).abs() * norms[c]);
        }
    }
    Ok(scores)
}

/// Mask from plain weight magnitude (output-major weight).
pub fn magnitude_mask(weight: &Matrix, sparsity: f64) -> Result<PruneMask> {
    let mut scores = Matrix::zeros(weight.rows(), weight.cols());
    for r in 0..weight.rows() {
        for c in 0..weight.cols() {
            scores.set(r, c, weight.get(r, c).abs());
        }
    }
    prune_per_output(&scores, sparsity)
}

/// Seeded random mask: each row independently drops a uniform sample of
/// `floor(sparsity * cols)` columns, drawn by Fisher–Yates shuffle from one
/// stream per matrix.
pub fn random_mask(rows: usize, cols: usize, sparsity: f64, seed: u64) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    let drop_per_row = (sparsity * cols as f64).floor() as usize;
    let mut rng = SplitMix64::new(seed);
    let mut mask = PruneMask::ones(rows, cols);
    for row in 0..rows {
        let mut order: Vec<usize> = (0..cols).collect();
        for i in (1..cols).rev() {
            let j = rng.next_index(i + 1);
            order.swap(i, j);
        }
        for &col in order.iter().take(drop_per_row) {
            mask.drop_at(row, col);
        }
    }
    Ok(mask)
}

// ==== whole-model mask building ====

/// Scoring method for mask construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Wanda,
    Magnitude,
    Random,
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wanda" => Ok(PruneMethod::Wanda),
            "magnitude" => Ok(PruneMethod::Magnitude),
            "random" => Ok(PruneMethod::Random),
            other => Err(Error::Config(format!(
                "unknown pruning method {other:?}; expected wanda, magnitude, or random"
            ))),
        }
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Wanda => "wanda",
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Random => "random",
        })
    }
}

/// Masks for the six linears of one block, in model orientation
/// (input-dim × output-dim, matching the stored weights).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMasks {
    pub wq: PruneMask,
    pub wk: PruneMask,
    pub wv: PruneMask,
    pub wo: PruneMask,
    pub fc1: PruneMask,
    pub fc2: PruneMask,
}

impl LayerMasks {
    pub fn for_kind(&self, kind: LinearKind) -> &PruneMask {
        match kind {
            LinearKind::Wq => &self.wq,
            LinearKind::Wk => &self.wk,
            LinearKind::Wv => &self.wv,
            LinearKind::Wo => &self.wo,
            LinearKind::Fc1 => &self.fc1,
            LinearKind::Fc2 => &self.fc2,
        }
    }

    /// All-keep masks shaped for one block.
    pub fn ones(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        LayerMasks {
            wq: PruneMask::ones(d, d),
            wk: PruneMask::ones(d, d),
            wv: PruneMask::ones(d, d),
            wo: PruneMask::ones(d, d),
            fc1: PruneMask::ones(d, cfg.d_ff),
            fc2: PruneMask::ones(cfg.d_ff, d),
        }
    }

    /// All-drop masks shaped for one block.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        LayerMasks {
            wq: PruneMask::zeros(d, d),
            wk: PruneMask::zeros(d, d),
            wv: PruneMask::zeros(d, d),
            wo: PruneMask::zeros(d, d),
            fc1: PruneMask::zeros(d, cfg.d_ff),
            fc2: PruneMask::zeros(cfg.d_ff, d),
        }
    }
}

/// Masks for every block of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelMasks {
    pub layers: Vec<LayerMasks>,
}

impl ModelMasks {
    /// All-keep masks for a whole model.
    pub fn ones(cfg: &ModelConfig) -> Self {
        ModelMasks {
            layers: (0..cfg.n_layers).map(|_| LayerMasks::ones(cfg)).collect(),
        }
    }

    /// All-drop masks for a whole model.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelMasks {
            layers: (0..cfg.n_layers).map(|_| LayerMasks::zeros(cfg)).collect(),
        }
    }
}

fn weight_of(block: &BlockWeights, kind: LinearKind) -> &Matrix {
    match kind {
        LinearKind::Wq => &block.wq,
        LinearKind::Wk => &block.wk,
        LinearKind::Wv => &block.wv,
        LinearKind::Wo => &block.wo,
        LinearKind::Fc1 => &block.fc1,
        LinearKind::Fc2 => &block.fc2,
    }
}

fn weight_of_mut(block: &mut BlockWeights, kind: LinearKind) -> &mut Matrix {
    match kind {
        LinearKind::Wq => &mut block.wq,
        LinearKind::Wk => &mut block.wk,
        LinearKind::Wv => &mut block.wv,
        LinearKind::Wo => &mut block.wo,
        LinearKind::Fc1 => &mut block.fc1,
        LinearKind::Fc2 => &mut block.fc2,
    }
}

/// Builds masks for every pruned linear in the model. The activation-aware
/// method requires calibration statistics; the random method derives one
/// seed per matrix from `base_seed` and the matrix's stable index.
pub fn build_masks(
    model: &Model,
    method: PruneMethod,
    sparsity: f64,
    stats: Option<&CalibrationStats>,
    base_seed: u64,
) -> Result<ModelMasks> {
    check_sparsity(sparsity)?;
    if method == PruneMethod::Wanda && stats.is_none() {
        return Err(Error::Calibration(
            "activation-aware pruning requires calibration statistics".into(),
        ));
    }
    if let Some(s) = stats {
        if s.layers.len() != model.blocks.len() {
            return Err(Error::Calibration(format!(
                "calibration covers {} layers but the model has {}",
                s.layers.len(),
                model.blocks.len()
            )));
        }
    }
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (layer, block) in model.blocks.iter().enumerate() {
        let mask_for = |kind: LinearKind, kind_idx: usize| -> Result<PruneMask> {
            let weight = weight_of(block, kind);
            let output_major = weight.transposed();
            let mask = match method {
                PruneMethod::Wanda => {
                    let norms = stats.expect("checked above").layers[layer].for_kind(kind);
                    let scores = wanda_scores(&output_major, norms)?;
                    prune_per_output(&scores, sparsity)?
                }
                PruneMethod::Magnitude => magnitude_mask(&output_major, sparsity)?,
                PruneMethod::Random => {
                    let seed = base_seed.wrapping_add((layer * 6 + kind_idx) as u64);
                    random_mask(output_major.rows(), output_major.cols(), sparsity, seed)?
                }
            };
            Ok(mask.transposed()) // back to model orientation
        };
        layers.push(LayerMasks {
            wq: mask_for(LinearKind::Wq, 0)?,
            wk: mask_for(LinearKind::Wk, 1)?,
            wv: mask_for(LinearKind::Wv, 2)?,
            wo: mask_for(LinearKind::Wo, 3)?,
            fc1: mask_for(LinearKind::Fc1, 4)?,
            fc2: mask_for(LinearKind::Fc2, 5)?,
        });
    }
    Ok(ModelMasks { layers })
}

/// Applies masks to a model, zeroing dropped weights. All-keep masks return
/// a bitwise-identical model, and the operation is idempotent.
pub fn apply_masks(model: &Model, masks: &ModelMasks) -> Result<Model> {
    if masks.layers.len() != model.blocks.len() {
        return Err(Error::shape(
            "apply_masks",
            format!(
                "{} mask layers for {} blocks",
                masks.layers.len(),
                model.blocks.len()
            ),
        ));
    }
    let mut pruned = model.clone();
    for (block, layer_masks) in pruned.blocks.iter_mut().zip(&masks.layers) {
        for kind in LinearKind::ALL {
            let mask = layer_masks.for_kind(kind);
            let weight = weight_of_mut(block, kind);
            if mask.rows() != weight.rows() || mask.cols() != weight.cols() {
                return Err(Error::shape(
                    "apply_masks",
                    format!(
                        "mask {}x{} for weight {}x{} ({})",
                        mask.rows(),
                        mask.cols(),
                        weight.rows(),
                        weight.cols(),
                        kind.name()
                    ),
                ));
            }
            for r in 0..weight.rows() {
                for c in 0..weight.cols() {
                    if !mask.keep(r, c) {
                        weight.set(r, c, 0.0);
                    }
                }
            }
        }
    }
    Ok(pruned)
}

// ==== sparsity reporting ====

/// Requested vs realized sparsity, per linear and overall.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub target: f64,
    pub overall_realized: f64,
    /// One map per layer: linear name -> realized sparsity.
    pub layers: Vec<BTreeMap<String, f64>>,
}

/// Summarizes a mask set against the sparsity it was built for.
pub fn sparsity_report(masks: &ModelMasks, target: f64) -> SparsityReport {
    let mut layers = Vec::with_capacity(masks.layers.len());
    let mut zeros = 0usize;
    let mut total = 0usize;
    for layer_masks in &masks.layers {
        let mut per_linear = BTreeMap::new();
        for kind in LinearKind::ALL {
            let mask = layer_masks.for_kind(kind);
            per_linear.insert(kind.name().to_string(), mask.realized_sparsity());
            zeros += mask.total_zeros();
            total += mask.rows() * mask.cols();
        }
        layers.push(per_linear);
    }
    SparsityReport {
        target,
        overall_realized: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        layers,
    }
}

// ==== mask persistence ====

/// Saves masks in the tensor container format with the mask dtype.
pub fn save_masks(masks: &ModelMasks, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if masks.layers.len() != cfg.n_layers {
        return Err(Error::shape(
            "save_masks",
            format!("{} mask layers for {} blocks", masks.layers.len(), cfg.n_layers),
        ));
    }
    let mut tensors = Vec::new();
    for (i, layer_masks) in masks.layers.iter().enumerate() {
        for kind in LinearKind::ALL {
            let mask = layer_masks.for_kind(kind);
            tensors.push((
                format!("blocks.{i}.{}", kind.name()),
                vec![mask.rows(), mask.cols()],
                mask.bytes().to_vec(),
            ));
        }
    }
    container::write_container(path, cfg, DTYPE_MASK_U8, &tensors)
}

/// Loads masks and the config they were built for, validating layout and
/// that every byte is 0 or 1.
pub fn load_masks(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelMasks)> {
    let path = path.as_ref();
    let (cfg, tensors) = container::read_container(path, DTYPE_MASK_U8)?;
    container::check_table(path, &tensors, &container::mask_tensor_table(&cfg))?;
    let mut iter = tensors.into_iter();
    let mut next_mask = |name: &str| -> Result<PruneMask> {
        let RawTensor { shape, bytes, .. } = iter.next().expect("table checked");
        PruneMask::from_bytes(shape[0], shape[1], bytes).map_err(|e| {
            Error::format(path.display().to_string(), format!("tensor {name}: {e}"))
        })
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerMasks {
            wq: next_mask(&format!("blocks.{i}.wq"))?,
            wk: next_mask(&format!("blocks.{i}.wk"))?,
            wv: next_mask(&format!("blocks.{i}.wv"))?,
            wo: next_mask(&format!("blocks.{i}.wo"))?,
            fc1: next_mask(&format!("blocks.{i}.fc1"))?,
            fc2: next_mask(&format!("blocks.{i}.fc2"))?,
        });
    }
    Ok((cfg, ModelMasks { layers }))
}
