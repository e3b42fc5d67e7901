//! Autoregressive generation engine.
//!
//! A [`Session`] owns the mutable state of one generation run: the ragged KV
//! cache, the execution trace, and the position counter. Prefill processes
//! the multimodal prompt token-major (each position runs through all layers
//! before the next position starts), then each decode step embeds the
//! previously emitted token and produces the next one by greedy argmax.
//!
//! The cache is *ragged*: an entry exists at (layer, position) exactly when
//! the token at that position ran self-attention at that layer under its
//! action. Tokens that skip a layer write nothing there and are invisible to
//! later queries at that layer. A token that runs SA always sees at least
//! its own freshly written entry, so attention contexts are never empty.
//!
//! For fused block pairs (ParallelLead/ParallelAbsorbed), both blocks'
//! residuals are taken at the same stage input and summed:
//! `x_out = (x + r_l) + r_{l+1})`; K/V is written at both layers. An
//! out-of-scope token at the same layers simply executes both blocks in
//! sequence.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, AttentionContext, KvWrite, Model};
use crate::numerics::{argmax, Matrix};
use crate::policy::{
    action_for, resolve_schedule, ComputePolicy, LayerAction, LayerSchedule, TokenClass,
};

/// The multimodal prompt: optional pre-computed perceptual rows followed by
/// text token ids (BOS and question text included).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    /// n_P × d_model rows from a modality encoder; `None` for text-only runs.
    pub perceptual: Option<Matrix>,
    pub text_token_ids: Vec<usize>,
}

impl PromptInput {
    pub fn text_only(text_token_ids: Vec<usize>) -> Self {
        PromptInput {
            perceptual: None,
            text_token_ids,
        }
    }

    pub fn n_perceptual(&self) -> usize {
        self.perceptual.as_ref().map_or(0, |m| m.rows())
    }

    /// Total prompt length (perceptual rows + text tokens).
    pub fn len(&self) -> usize {
        self.n_perceptual() + self.text_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the prompt against a model: non-empty, perceptual width =
    /// d_model, and prompt + planned generation fit in the position table.
    pub fn validate(&self, cfg: &model::ModelConfig, max_new_tokens: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Range("prompt must contain at least one token".into()));
        }
        if let Some(p) = &self.perceptual {
            if p.rows() > 0 && p.cols() != cfg.d_model {
                return Err(Error::shape(
                    "PromptInput::validate",
                    format!("perceptual dim {} vs d_model {}", p.cols(), cfg.d_model),
                ));
            }
        }
        if self.len() + max_new_tokens > cfg.max_positions {
            return Err(Error::Capacity(format!(
                "prompt {} + max_new_tokens {max_new_tokens} exceeds max_positions {}",
                self.len(),
                cfg.max_positions
            )));
        }
        Ok(())
    }
}

/// Token classes position by position: perceptual rows, then prompt text,
/// then `n_generated` decode positions.
pub fn classify_tokens(prompt: &PromptInput, n_generated: usize) -> Vec<TokenClass> {
    let mut classes = Vec::with_capacity(prompt.len() + n_generated);
    classes.extend(std::iter::repeat(TokenClass::Perceptual).take(prompt.n_perceptual()));
    classes.extend(std::iter::repeat(TokenClass::Text).take(prompt.text_token_ids.len()));
    classes.extend(std::iter::repeat(TokenClass::Generated).take(n_generated));
    classes
}

/// One cached K/V pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub position: usize,
    pub key: Vec<f32>,   // d_model
    pub value: Vec<f32>, // d_model
}

/// Per-layer lists of K/V entries with strictly increasing positions; layers
/// hold different subsets of positions when tokens skip layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedKvCache {
    layers: Vec<Vec<KvEntry>>,
}

impl RaggedKvCache {
    fn new(n_layers: usize) -> Self {
        RaggedKvCache {
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Entries at `layer`, ascending by position.
    pub fn entries(&self, layer: usize) -> &[KvEntry] {
        &self.layers[layer]
    }

    pub fn has_entry(&self, layer: usize, position: usize) -> bool {
        self.layers[layer].iter().any(|e| e.position == position)
    }

    fn push(&mut self, layer: usize, position: usize, kv: KvWrite) {
        debug_assert!(
            self.layers[layer].last().map_or(true, |e| e.position < position),
            "cache positions must be strictly increasing"
        );
        self.layers[layer].push(KvEntry {
            position,
            key: kv.key,
            value: kv.value,
        });
    }

    /// Test hook: additively perturbs the first cached key at `layer`. Used
    /// by the comparison harness to demonstrate divergence detection.
    pub fn corrupt_first_key(&mut self, layer: usize, delta: f32) -> Result<()> {
        let entry = self
            .layers
            .get_mut(layer)
            .and_then(|l| l.first_mut())
            .ok_or_else(|| Error::Range(format!("no cache entry to corrupt at layer {layer}")))?;
        entry.key[0] += delta;
        Ok(())
    }
}

/// What one (position, layer) visit did. Fused pairs produce two rows: the
/// lead row carries both context sizes, the absorbed row carries none.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub position: usize,
    pub layer: usize,
    pub class: TokenClass,
    pub action: LayerAction,
    /// Attention context size (own entry included) when SA ran at this layer.
    pub sa_ctx: Option<usize>,
    /// For ParallelLead rows: context size at the partner layer.
    pub partner_sa_ctx: Option<usize>,
}

/// Complete record of a run: one row per (processed position, layer).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub n_prompt: usize,
    pub rows: Vec<TraceRow>,
}

impl ExecutionTrace {
    /// Positions actually processed (the last generated token never is).
    pub fn n_positions(&self) -> usize {
        self.rows.last().map_or(0, |r| r.position + 1)
    }
}

/// Outcome of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub output_token_ids: Vec<usize>,
    /// Logits each output token was argmaxed from (one vector per token).
    pub step_logits: Vec<Vec<f32>>,
    pub trace: ExecutionTrace,
}

/// Mutable state of one generation run over an immutable model.
pub struct Session<'m> {
    model: &'m Model,
    policy: ComputePolicy,
    schedule: LayerSchedule,
    cache: RaggedKvCache,
    rows: Vec<TraceRow>,
    prompt_hidden: Vec<Vec<f32>>,
    n_prompt: usize,
    next_position: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, policy: ComputePolicy) -> Result<Self> {
        model.config.validate()?;
        let schedule = resolve_schedule(&policy, model.config.n_layers)?;
        Ok(Session {
            model,
            policy,
            schedule,
            cache: RaggedKvCache::new(model.config.n_layers),
            rows: Vec::new(),
            prompt_hidden: Vec::new(),
            n_prompt: 0,
            next_position: 0,
        })
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn cache(&self) -> &RaggedKvCache {
        &self.cache
    }

    /// Mutable cache access for the corruption test hook.
    pub fn cache_mut(&mut self) -> &mut RaggedKvCache {
        &mut self.cache
    }

    /// Final hidden states of the prompt positions (set by prefill).
    pub fn prompt_hidden(&self) -> &[Vec<f32>] {
        &self.prompt_hidden
    }

    pub fn trace(&self) -> ExecutionTrace {
        ExecutionTrace {
            n_prompt: self.n_prompt,
            rows: self.rows.clone(),
        }
    }

    /// Runs the prompt through the stack position by position and returns
    /// the final hidden state of the last prompt position (final LN not yet
    /// applied — `unembed` owns that).
    pub fn prefill(&mut self, prompt: &PromptInput) -> Result<Vec<f32>> {
        if self.next_position != 0 {
            return Err(Error::Internal("prefill called on a started session".into()));
        }
        prompt.validate(&self.model.config, 0)?;
        self.n_prompt = prompt.len();
        if let Some(p) = &prompt.perceptual {
            for r in 0..p.rows() {
                let x = model::embed_perceptual(self.model, p.row(r), self.next_position)?;
                let hidden = self.process_position(x, TokenClass::Perceptual)?;
                self.prompt_hidden.push(hidden);
            }
        }
        for &id in &prompt.text_token_ids {
            let x = model::embed(self.model, id, self.next_position)?;
            let hidden = self.process_position(x, TokenClass::Text)?;
            self.prompt_hidden.push(hidden);
        }
        Ok(self.prompt_hidden.last().expect("prompt non-empty").clone())
    }

    /// Embeds the previously emitted token at the next position, runs the
    /// stack under the Generated-class actions, and greedily picks the next
    /// token (lowest index wins ties). Returns `(token_id, logits)`.
    pub fn decode_step(&mut self, prev_token: usize) -> Result<(usize, Vec<f32>)> {
        if self.next_position == 0 {
            return Err(Error::Internal("decode_step before prefill".into()));
        }
        if self.next_position >= self.model.config.max_positions {
            return Err(Error::Capacity(format!(
                "position {} reached max_positions {}",
                self.next_position, self.model.config.max_positions
            )));
        }
        let x = model::embed(self.model, prev_token, self.next_position)?;
        let hidden = self.process_position(x, TokenClass::Generated)?;
        let logits = model::unembed(self.model, &hidden)?;
        Ok((argmax(&logits), logits))
    }

    /// Runs one token through all layers, applying its per-layer actions,
    /// writing K/V and trace rows as it goes.
    fn process_position(&mut self, x: Vec<f32>, class: TokenClass) -> Result<Vec<f32>> {
        let position = self.next_position;
        let cfg = &self.model.config;
        let mut x = x;
        let mut layer = 0;
        while layer < cfg.n_layers {
            let action = action_for(&self.schedule, layer, class, self.policy.scope);
            match action {
                LayerAction::Execute => {
                    let (out, kv, ctx_len) = {
                        let ctx = prior_context(&self.cache, layer, position);
                        let n = ctx.len() + 1;
                        let (out, kv) =
                            model::block_standard(&self.model.blocks[layer], &x, &ctx, cfg)?;
                        (out, kv, n)
                    };
                    self.cache.push(layer, position, kv);
                    self.record(position, layer, class, action, Some(ctx_len), None);
                    x = out;
                    layer += 1;
                }
                LayerAction::SkipFfn => {
                    let (out, kv, ctx_len) = {
                        let ctx = prior_context(&self.cache, layer, position);
                        let n = ctx.len() + 1;
                        let (out, kv) =
                            model::block_skip_ffn(&self.model.blocks[layer], &x, &ctx, cfg)?;
                        (out, kv, n)
                    };
                    self.cache.push(layer, position, kv);
                    self.record(position, layer, class, action, Some(ctx_len), None);
                    x = out;
                    layer += 1;
                }
                LayerAction::ParallelFfnSa => {
                    let (out, kv, ctx_len) = {
                        let ctx = prior_context(&self.cache, layer, position);
                        let n = ctx.len() + 1;
                        let (out, kv) =
                            model::block_parallel_ffn_sa(&self.model.blocks[layer], &x, &ctx, cfg)?;
                        (out, kv, n)
                    };
                    self.cache.push(layer, position, kv);
                    self.record(position, layer, class, action, Some(ctx_len), None);
                    x = out;
                    layer += 1;
                }
                LayerAction::SkipSa => {
                    x = model::block_skip_sa(&self.model.blocks[layer], &x, cfg)?;
                    self.record(position, layer, class, action, None, None);
                    layer += 1;
                }
                LayerAction::SkipBlock => {
                    self.record(position, layer, class, action, None, None);
                    layer += 1;
                }
                LayerAction::ParallelLead { partner } => {
                    // Both residuals from the same stage input x.
                    let (r_lead, kv_lead, ctx_lead) = {
                        let ctx = prior_context(&self.cache, layer, position);
                        let n = ctx.len() + 1;
                        let (r, kv) =
                            model::block_residual(&self.model.blocks[layer], &x, &ctx, cfg)?;
                        (r, kv, n)
                    };
                    self.cache.push(layer, position, kv_lead);
                    let (r_partner, kv_partner, ctx_partner) = {
                        let ctx = prior_context(&self.cache, partner, position);
                        let n = ctx.len() + 1;
                        let (r, kv) =
                            model::block_residual(&self.model.blocks[partner], &x, &ctx, cfg)?;
                        (r, kv, n)
                    };
                    self.cache.push(partner, position, kv_partner);
                    x = crate::numerics::add(&crate::numerics::add(&x, &r_lead)?, &r_partner)?;
                    self.record(position, layer, class, action, Some(ctx_lead), Some(ctx_partner));
                    self.record(
                        position,
                        partner,
                        class,
                        LayerAction::ParallelAbsorbed,
                        None,
                        None,
                    );
                    layer = partner + 1;
                }
                LayerAction::ParallelAbsorbed => {
                    // The walk jumps over absorbed layers after their lead;
                    // landing here means the schedule pairing is broken.
                    return Err(Error::Internal(format!(
                        "reached absorbed layer {layer} without its lead"
                    )));
                }
            }
        }
        self.next_position += 1;
        Ok(x)
    }

    fn record(
        &mut self,
        position: usize,
        layer: usize,
        class: TokenClass,
        action: LayerAction,
        sa_ctx: Option<usize>,
        partner_sa_ctx: Option<usize>,
    ) {
        self.rows.push(TraceRow {
            position,
            layer,
            class,
            action,
            sa_ctx,
            partner_sa_ctx,
        });
    }
}

/// Builds the attention context of prior entries (positions strictly before
/// the query's) at a layer; the block ops append the query's own entry.
fn prior_context<'c>(cache: &'c RaggedKvCache, layer: usize, position: usize) -> AttentionContext<'c> {
    let mut ctx = AttentionContext::new(position);
    for e in cache.entries(layer) {
        debug_assert!(e.position < position);
        ctx.push(e.position, &e.key, &e.value);
    }
    ctx
}

/// Prefill + greedy decode loop. Emits up to `max_new_tokens` tokens,
/// stopping after `eos_id` when given (the eos token is included in the
/// output). The last emitted token is never fed back through the stack, so a
/// run processes `prompt.len() + emitted - 1` positions.
pub fn generate(
    model: &Model,
    policy: ComputePolicy,
    prompt: &PromptInput,
    max_new_tokens: usize,
    eos_id: Option<usize>,
) -> Result<GenerationResult> {
    prompt.validate(&model.config, max_new_tokens)?;
    let mut session = Session::new(model, policy)?;
    let last_hidden = session.prefill(prompt)?;
    let mut output_token_ids = Vec::new();
    let mut step_logits = Vec::new();
    if max_new_tokens > 0 {
        let logits = model::unembed(model, &last_hidden)?;
        let token = argmax(&logits);
        output_token_ids.push(token);
        step_logits.push(logits);
        while output_token_ids.len() < max_new_tokens
            && Some(*output_token_ids.last().expect("non-empty")) != eos_id
        {
            let prev = *output_token_ids.last().expect("non-empty");
            let (token, logits) = session.decode_step(prev)?;
            output_token_ids.push(token);
            step_logits.push(logits);
        }
    }
    Ok(GenerationResult {
        output_token_ids,
        step_logits,
        trace: session.trace(),
    })
}
