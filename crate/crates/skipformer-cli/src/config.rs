//! Run configuration: a JSON file naming the model source, compute policy,
//! prompt, and generation settings shared by the subcommands.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use skipformer_core::container;
use skipformer_core::model::synth_model;
use skipformer_core::{ComputePolicy, Model, ModelConfig, PromptInput};

use crate::{in_field, CliError, CliResult};

/// Top-level run configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RunConfig {
    pub model: ModelSource,
    /// Compute policy; omitted means dense.
    #[serde(default)]
    pub policy: Option<ComputePolicy>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub generation: GenerationSpec,
    /// Default output path, overridden by --output.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Where the model comes from: exactly one of a container file or a seeded
/// synthetic spec.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct SyntheticSpec {
    pub config: ModelConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub(crate) struct PromptSpec {
    /// Perceptual embedding rows ("PEMB" file), prepended to the prompt.
    pub perceptual_path: Option<PathBuf>,
    pub text_token_ids: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub(crate) struct GenerationSpec {
    pub max_new_tokens: usize,
    pub eos_id: Option<usize>,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            max_new_tokens: 8,
            eos_id: None,
        }
    }
}

impl ModelSource {
    pub fn validate(&self) -> CliResult<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => Err(CliError::Validation(
                "model: give either path or synthetic, not both".into(),
            )),
            (None, None) => Err(CliError::Validation(
                "model: one of path or synthetic is required".into(),
            )),
        }
    }
}

/// Loads and validates the run configuration named by --config.
pub(crate) fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let path = path.ok_or_else(|| {
        CliError::Validation("--config is required for this command".into())
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    config.model.validate()?;
    Ok(config)
}

/// Materializes the model: loads the container file or synthesizes from the
/// spec. --seed overrides the synthetic seed.
pub(crate) fn load_model(source: &ModelSource, seed_override: Option<u64>) -> CliResult<Model> {
    if let Some(path) = &source.path {
        return container::load_model(path).map_err(|e| in_field("model.path", e));
    }
    let spec = source.synthetic.as_ref().expect("validated source");
    let seed = seed_override.unwrap_or(spec.seed);
    synth_model(&spec.config, seed).map_err(|e| in_field("model.synthetic.config", e))
}

/// Builds the prompt, loading perceptual rows when configured. Relative
/// perceptual paths are resolved against `base_dir` when given.
pub(crate) fn build_prompt(spec: &PromptSpec, base_dir: Option<&Path>) -> CliResult<PromptInput> {
    let perceptual = match &spec.perceptual_path {
        Some(p) => {
            let resolved = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            Some(
                container::load_perceptual(&resolved)
                    .map_err(|e| in_field("prompt.perceptual_path", e))?,
            )
        }
        None => None,
    };
    Ok(PromptInput {
        perceptual,
        text_token_ids: spec.text_token_ids.clone(),
    })
}

/// The configured policy, defaulting to dense.
pub(crate) fn policy_of(config: &RunConfig) -> ComputePolicy {
    config.policy.unwrap_or_else(ComputePolicy::dense)
}
