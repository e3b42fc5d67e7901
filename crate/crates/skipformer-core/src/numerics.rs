//! Deterministic f32 kernels.
//!
//! Everything in the crate bottoms out here. Two rules make the whole stack
//! reproducible:
//!
//! 1. All arithmetic is f32 (no internal f64 accumulators).
//! 2. Every reduction runs in ascending index order, innermost over the
//!    contracted dimension.
//!
//! With those fixed, identical inputs give bitwise identical outputs across
//! runs and across call sites, which is what lets the incremental runtime be
//! compared against the full-recompute oracle token-for-token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f32 matrix.
///
/// Deliberately minimal: the runtime needs deterministic index-order
/// summation, so the kernels own their loops instead of delegating to a
/// linear-algebra library that is free to reassociate.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>, // len == rows * cols, row-major
}

impl Matrix {
    /// Builds a matrix from row-major data; `data.len()` must be `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable row-major backing slice.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Transposed copy. Used at the pruning boundary, where masks are
    /// computed per output row but weights are stored input-major.
    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// True when every element is finite. NaN/Inf anywhere is an error state;
    /// kernels check this in debug builds.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn debug_check_finite(label: &str, values: &[f32]) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "non-finite value produced by {label}"
    );
}

/// `a @ b` with the contraction innermost and ascending: for each output cell
/// the products `a[i][k] * b[k][j]` are accumulated left-to-right in `k`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} @ {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    debug_check_finite("matmul", &out.data);
    Ok(out)
}

/// Row vector times matrix: `x @ w`, accumulation order identical to
/// [`matmul`] on a 1-row matrix (bitwise, not just numerically).
pub fn matvec(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    if x.len() != w.rows {
        return Err(Error::shape(
            "matvec",
            format!("1x{} @ {}x{}", x.len(), w.rows, w.cols),
        ));
    }
    let mut out = vec![0.0f32; w.cols];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for k in 0..x.len() {
            acc += x[k] * w.data[k * w.cols + j];
        }
        *slot = acc;
    }
    debug_check_finite("matvec", &out);
    Ok(out)
}

/// Elementwise sum of two equal-length vectors.
pub fn add(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::shape("add", format!("{} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Elementwise difference `a - b` of two equal-length vectors.
pub fn sub(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::shape("sub", format!("{} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Layer normalisation with learned gain and bias.
///
/// Uses the population variance (divide by `n`, not `n - 1`); mean and
/// variance are plain ascending-order f32 sums.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let n = x.len();
    if n == 0 || gamma.len() != n || beta.len() != n {
        return Err(Error::shape(
            "layer_norm",
            format!("x={} gamma={} beta={}", n, gamma.len(), beta.len()),
        ));
    }
    let mut mean = 0.0f32;
    for v in x {
        mean += v;
    }
    mean /= n as f32;
    let mut var = 0.0f32;
    for v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n as f32;
    let inv = 1.0f32 / (var + eps).sqrt();
    let out: Vec<f32> = (0..n).map(|i| gamma[i] * ((x[i] - mean) * inv) + beta[i]).collect();
    debug_check_finite("layer_norm", &out);
    Ok(out)
}

/// Numerically stable softmax: subtracts the max before exponentiating, so
/// e.g. `softmax([1000.0; 3])` stays finite and uniform.
///
/// `x` must be non-empty.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    assert!(!x.is_empty(), "softmax of empty slice");
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f32> = x.iter().map(|v| (v - max).exp()).collect();
    let mut sum = 0.0f32;
    for e in &exps {
        sum += e;
    }
    exps.iter().map(|e| e / sum).collect()
}

/// FFN activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// max(0, x). Default for the synthetic model family.
    Relu,
    /// Tanh-approximated GELU: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))`.
    Gelu,
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::Relu
    }
}

/// Applies `kind` elementwise.
pub fn activation(x: &[f32], kind: ActivationKind) -> Vec<f32> {
    const SQRT_2_OVER_PI: f32 = 0.797_884_56;
    match kind {
        ActivationKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        ActivationKind::Gelu => x
            .iter()
            .map(|&v| {
                let inner = SQRT_2_OVER_PI * (v + 0.044_715 * v * v * v);
                0.5 * v * (1.0 + inner.tanh())
            })
            .collect(),
    }
}

/// Index of the largest value; ties resolve to the lowest index. Used for
/// greedy decoding, where the runtime and the oracle must agree exactly.
pub fn argmax(x: &[f32]) -> usize {
    assert!(!x.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
