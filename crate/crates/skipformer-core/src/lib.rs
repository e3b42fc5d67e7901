//! Decoder-only transformer inference runtime with structural compute-skipping.
//!
//! The crate is organised around a small set of modules with one-way
//! dependencies:
//!
//! - [`numerics`]: deterministic f32 kernels (matmul, layer norm, softmax,
//!   activations). Everything above is expressed in terms of these.
//! - [`model`]: weight containers, the standard pre-LN block and its
//!   structural variants, seeded synthesis, and the binary weight container.
//! - [`policy`]: compute policies (which layers skip / parallelise, for which
//!   token classes) resolved into per-layer schedules.
//! - [`runtime`]: incremental execution — ragged KV cache, prefill, greedy
//!   decode, execution traces.
//! - [`oracle`]: a full-recompute reference implementation used to check the
//!   incremental runtime differentially. It shares kernels and policy
//!   resolution with the runtime but none of the caching machinery.
//! - [`cost`]: exact FLOPs accounting, both from recorded traces and from
//!   analytic prediction, plus sequential-depth reporting.
//! - [`pruning`]: post-training per-output weight pruning (Wanda, magnitude,
//!   random) with activation-norm calibration.
//!
//! All floating-point computation is f32 with a fixed summation order, so
//! identical inputs produce bitwise identical outputs on every run.

pub mod container;
pub mod cost;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod pruning;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use numerics::{ActivationKind, Matrix};
pub use policy::{ComputePolicy, LayerAction, LayerSchedule, PolicyMode, TokenClass, TokenScope};
pub use runtime::{GenerationResult, PromptInput, Session};
