//! Compute policies and their resolution into per-layer schedules.
//!
//! A [`ComputePolicy`] is the user-facing knob: a mode (skip or parallelise
//! what), a start layer `sl`, an interval `I`, and a token scope. Resolution
//! turns it into a [`LayerSchedule`] — an explicit per-layer action table that
//! both the runtime executes and the cost model counts. The affected layer
//! set is
//!
//! ```text
//! A = { l : sl <= l < N  and  (l - sl) % I == 0 }
//! ```
//!
//! so affecting starts exactly at `sl` and recurs every `I` layers; `sl = 0`,
//! `I = 2` affects half the layers of an even-depth stack. Out-of-scope
//! tokens always execute the full block regardless of the schedule.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Which kind of token a sequence position holds.
///
/// Perceptual and Text occur only in the prompt; Generated only at decode
/// positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    /// Pre-computed modality-encoder rows at the front of the prompt.
    Perceptual,
    /// Prompt token ids (BOS and question text included).
    Text,
    /// Tokens produced autoregressively at decode time.
    Generated,
}

/// Non-empty set of token classes a policy applies to.
///
/// JSON exposes the two named presets only: `"generated"` for
/// [`TokenScope::GENERATED_ONLY`] and `"all"` for [`TokenScope::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenScope(u8);

const BIT_PERCEPTUAL: u8 = 1;
const BIT_TEXT: u8 = 2;
const BIT_GENERATED: u8 = 4;

impl TokenScope {
    /// `{Generated}` — policies touch only decode positions.
    pub const GENERATED_ONLY: TokenScope = TokenScope(BIT_GENERATED);
    /// `{Perceptual, Text, Generated}` — policies touch the prompt too.
    pub const ALL: TokenScope = TokenScope(BIT_PERCEPTUAL | BIT_TEXT | BIT_GENERATED);

    /// Builds a scope from an explicit non-empty class list.
    pub fn new(classes: &[TokenClass]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Policy("token scope must be non-empty".into()));
        }
        let mut bits = 0;
        for c in classes {
            bits |= match c {
                TokenClass::Perceptual => BIT_PERCEPTUAL,
                TokenClass::Text => BIT_TEXT,
                TokenClass::Generated => BIT_GENERATED,
            };
        }
        Ok(TokenScope(bits))
    }

    pub fn contains(self, class: TokenClass) -> bool {
        let bit = match class {
            TokenClass::Perceptual => BIT_PERCEPTUAL,
            TokenClass::Text => BIT_TEXT,
            TokenClass::Generated => BIT_GENERATED,
        };
        self.0 & bit != 0
    }
}

impl fmt::Display for TokenScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TokenScope::GENERATED_ONLY => write!(f, "generated"),
            TokenScope::ALL => write!(f, "all"),
            TokenScope(bits) => write!(f, "scope({bits:#05b})"),
        }
    }
}

impl Serialize for TokenScope {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            TokenScope::GENERATED_ONLY => serializer.serialize_str("generated"),
            TokenScope::ALL => serializer.serialize_str("all"),
            other => Err(serde::ser::Error::custom(format!(
                "token scope {other} has no JSON name; only the presets serialize"
            ))),
        }
    }
}

impl<'de> Deserialize<'de> for TokenScope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        match name.as_str() {
            "generated" => Ok(TokenScope::GENERATED_ONLY),
            "all" => Ok(TokenScope::ALL),
            other => Err(D::Error::custom(format!(
                "unknown scope {other:?}; expected \"generated\" or \"all\""
            ))),
        }
    }
}

/// Structural compute mode, before resolution against a concrete depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// No structural change; the baseline every reduction is measured against.
    Dense,
    /// Affected layers become the identity for in-scope tokens.
    SkipBlock,
    /// Affected layers drop the FFN sub-layer: `x_out = x + SA(LN1(x))`.
    SkipFfn,
    /// Affected layers drop the SA sub-layer: `x_out = x + FFN(LN2(LN1(x)))`.
    SkipSa,
    /// Affected layers evaluate both branches from the same input:
    /// `x_out = x + FFN(LN2(x)) + SA(LN1(x))` — same work, one stage.
    ParallelFfnSa,
    /// Affected layer l and its successor run as one fused stage from the
    /// same input: `x_out = x + r_l + r_{l+1}` with both residuals taken at x.
    ParallelBlocks,
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PolicyMode::Dense => "dense",
            PolicyMode::SkipBlock => "skip_block",
            PolicyMode::SkipFfn => "skip_ffn",
            PolicyMode::SkipSa => "skip_sa",
            PolicyMode::ParallelFfnSa => "parallel_ffn_sa",
            PolicyMode::ParallelBlocks => "parallel_blocks",
        };
        f.write_str(name)
    }
}

fn default_interval() -> usize {
    1
}

fn default_scope() -> TokenScope {
    TokenScope::GENERATED_ONLY
}

/// Full policy: what to do, where it starts, how often, and to whom.
///
/// The JSON form (inside a run config) is
/// `{"mode": "...", "start_layer": 0, "interval": 2, "scope": "generated"}`
/// with `start_layer`, `interval`, and `scope` optional (defaults 0, 1,
/// `"generated"`). Dense ignores the other three fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputePolicy {
    pub mode: PolicyMode,
    /// First affected layer; `start_layer = N` disables the policy.
    #[serde(default)]
    pub start_layer: usize,
    /// Distance between affected layers; must be >= 1 (>= 2 for ParallelBlocks).
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_scope")]
    pub scope: TokenScope,
}

impl ComputePolicy {
    /// Dense baseline policy.
    pub fn dense() -> Self {
        ComputePolicy {
            mode: PolicyMode::Dense,
            start_layer: 0,
            interval: 1,
            scope: TokenScope::ALL,
        }
    }

    pub fn new(mode: PolicyMode, start_layer: usize, interval: usize, scope: TokenScope) -> Self {
        ComputePolicy {
            mode,
            start_layer,
            interval,
            scope,
        }
    }

    /// Checks the policy against a concrete depth; Dense always passes.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.mode == PolicyMode::Dense {
            return Ok(());
        }
        if self.interval < 1 {
            return Err(Error::Policy("interval must be >= 1".into()));
        }
        if self.mode == PolicyMode::ParallelBlocks && self.interval < 2 {
            return Err(Error::Policy(
                "parallel_blocks requires interval >= 2 (pairs must not overlap)".into(),
            ));
        }
        if self.start_layer > n_layers {
            return Err(Error::Policy(format!(
                "start_layer {} exceeds n_layers {}",
                self.start_layer, n_layers
            )));
        }
        Ok(())
    }
}

/// Action a single layer takes for an in-scope token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAction {
    /// Full block: SA then FFN, two sequential stages.
    Execute,
    /// Whole block is the identity; nothing computed, no K/V written.
    SkipBlock,
    /// SA only; K/V still written.
    SkipFfn,
    /// FFN only (on the doubly-normalised input); no K/V written.
    SkipSa,
    /// Both sub-layers from the same input in one stage; K/V written.
    ParallelFfnSa,
    /// This layer and `partner` (always this layer + 1) run as one fused
    /// two-block stage; K/V written at both layers.
    ParallelLead { partner: usize },
    /// Layer already accounted for by the preceding ParallelLead.
    ParallelAbsorbed,
}

impl LayerAction {
    /// True when this action runs self-attention and therefore writes K/V.
    pub fn writes_kv(self) -> bool {
        !matches!(self, LayerAction::SkipBlock | LayerAction::SkipSa | LayerAction::ParallelAbsorbed)
    }

    /// Sequential sub-layer stages this action contributes to the critical
    /// path: a full block is 2 (SA then FFN), a fused parallel stage is 1 per
    /// block paired into it, skipped work is 0.
    pub fn depth_stages(self) -> u64 {
        match self {
            LayerAction::Execute => 2,
            LayerAction::SkipBlock => 0,
            LayerAction::SkipFfn => 1,
            LayerAction::SkipSa => 1,
            LayerAction::ParallelFfnSa => 1,
            // Two blocks, each internally sequential (SA then FFN), run
            // side by side: the pair costs one block's worth of stages.
            LayerAction::ParallelLead { .. } => 2,
            LayerAction::ParallelAbsorbed => 0,
        }
    }
}

impl fmt::Display for LayerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerAction::Execute => f.write_str("execute"),
            LayerAction::SkipBlock => f.write_str("skip_block"),
            LayerAction::SkipFfn => f.write_str("skip_ffn"),
            LayerAction::SkipSa => f.write_str("skip_sa"),
            LayerAction::ParallelFfnSa => f.write_str("parallel_ffn_sa"),
            LayerAction::ParallelLead { partner } => write!(f, "parallel_lead({partner})"),
            LayerAction::ParallelAbsorbed => f.write_str("parallel_absorbed"),
        }
    }
}

/// Resolved per-layer action table for in-scope tokens.
///
/// Out-of-scope tokens ignore the table and always Execute; that indirection
/// lives in [`action_for`], not here.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    n_layers: usize,
    in_scope_actions: Vec<LayerAction>,
}

impl LayerSchedule {
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Scheduled action for in-scope tokens at `layer`.
    pub fn action(&self, layer: usize) -> LayerAction {
        self.in_scope_actions[layer]
    }

    pub fn actions(&self) -> &[LayerAction] {
        &self.in_scope_actions
    }
}

/// Resolves a policy against a concrete depth into an explicit action table.
///
/// For the skip modes and ParallelFfnSa every layer in the affected set gets
/// the corresponding action. For ParallelBlocks each affected layer l with a
/// successor becomes `ParallelLead {partner: l + 1}` and the successor
/// becomes ParallelAbsorbed; an affected layer whose partner would fall off
/// the end stays Execute. `interval >= 2` keeps pairs disjoint.
pub fn resolve_schedule(policy: &ComputePolicy, n_layers: usize) -> Result<LayerSchedule> {
    if n_layers == 0 {
        return Err(Error::Policy("n_layers must be >= 1".into()));
    }
    policy.validate(n_layers)?;
    let mut actions = vec![LayerAction::Execute; n_layers];
    if policy.mode == PolicyMode::Dense {
        return Ok(LayerSchedule {
            n_layers,
            in_scope_actions: actions,
        });
    }
    let affected =
        (policy.start_layer..n_layers).filter(|l| (l - policy.start_layer) % policy.interval == 0);
    match policy.mode {
        PolicyMode::Dense => unreachable!("handled above"),
        PolicyMode::SkipBlock => {
            for l in affected {
                actions[l] = LayerAction::SkipBlock;
            }
        }
        PolicyMode::SkipFfn => {
            for l in affected {
                actions[l] = LayerAction::SkipFfn;
            }
        }
        PolicyMode::SkipSa => {
            for l in affected {
                actions[l] = LayerAction::SkipSa;
            }
        }
        PolicyMode::ParallelFfnSa => {
            for l in affected {
                actions[l] = LayerAction::ParallelFfnSa;
            }
        }
        PolicyMode::ParallelBlocks => {
            for l in affected {
                // interval >= 2 means l is never itself absorbed, but keep the
                // guard so the pairing invariant holds under any future mode.
                if l + 1 < n_layers && actions[l] == LayerAction::Execute {
                    actions[l] = LayerAction::ParallelLead { partner: l + 1 };
                    actions[l + 1] = LayerAction::ParallelAbsorbed;
                }
            }
        }
    }
    Ok(LayerSchedule {
        n_layers,
        in_scope_actions: actions,
    })
}

/// The action `token_class` takes at `layer`: the scheduled action when the
/// class is in scope, Execute otherwise.
pub fn action_for(
    schedule: &LayerSchedule,
    layer: usize,
    token_class: TokenClass,
    scope: TokenScope,
) -> LayerAction {
    if scope.contains(token_class) {
        schedule.action(layer)
    } else {
        LayerAction::Execute
    }
}

/// Fraction of the N blocks (or, for the sub-layer skip modes, of that
/// sub-layer kind) removed by the schedule. Parallel modes move no work, so
/// they report 0.
pub fn skipped_fraction(schedule: &LayerSchedule) -> f64 {
    let skipped = schedule
        .in_scope_actions
        .iter()
        .filter(|a| {
            matches!(
                a,
                LayerAction::SkipBlock | LayerAction::SkipFfn | LayerAction::SkipSa
            )
        })
        .count();
    skipped as f64 / schedule.n_layers as f64
}
