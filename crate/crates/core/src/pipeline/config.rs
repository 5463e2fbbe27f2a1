//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gatedopt::{AdamWConfig, GateSchedule, TrainingConfig};
use crate::modelhub::{BackendKind, RemoteConfig, ToyModelConfig};
use crate::verifier::{AcceptPolicy, CorpusOptions, VerifierConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,

    pub window_w: usize,
    pub lambda: f64,
    pub source_window_tokens: usize,

    pub c: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub gen_temperature: f64,
    pub check_temperature: f64,
    pub gen_max_tokens: usize,
    pub check_max_tokens: usize,
    pub accept_policy: AcceptPolicy,
    pub include_source_windows: bool,
    pub discard_zero_conviction: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,

    pub stage3: bool,
    pub r: f64,
    pub beta2_floor: f64,
    pub lr: f64,
    pub beta1: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps_per_item: usize,
    pub shuffle: bool,

    pub answer_max_tokens: usize,

    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub toy_vocab_size: usize,
    pub toy_context_length: usize,
    pub toy_embed_dim: usize,
    pub toy_n_layers: usize,
    pub toy_n_heads: usize,
    pub toy_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_url: Option<String>,
    pub remote_model: String,
    pub remote_timeout_secs: u64,
    pub remote_max_retries: u32,
    pub remote_max_in_flight: usize,
    pub remote_embeddings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let toy = ToyModelConfig::default();
        let remote = RemoteConfig::default();
        let verifier = VerifierConfig::default();
        let adam = AdamWConfig::default();
        Self {
            seed: 0,
            workers: 4,
            window_w: 64,
            lambda: 2.48,
            source_window_tokens: crate::grounding::DEFAULT_SOURCE_WINDOW,
            c: verifier.c,
            n_min: verifier.n_min,
            n_max: verifier.n_max,
            gen_temperature: verifier.gen_temperature,
            check_temperature: verifier.check_temperature,
            gen_max_tokens: verifier.gen_max_tokens,
            check_max_tokens: verifier.check_max_tokens,
            accept_policy: AcceptPolicy::Graduated,
            include_source_windows: true,
            discard_zero_conviction: false,
            templates_dir: None,
            stage3: true,
            r: 0.98,
            beta2_floor: crate::gatedopt::DEFAULT_BETA2_FLOOR,
            lr: adam.lr,
            beta1: adam.beta1,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            epochs: 3,
            steps_per_item: 1,
            shuffle: true,
            answer_max_tokens: 64,
            backend: BackendKind::Toy,
            script: None,
            toy_vocab_size: toy.vocab_size,
            toy_context_length: toy.context_length,
            toy_embed_dim: toy.embed_dim,
            toy_n_layers: toy.n_layers,
            toy_n_heads: toy.n_heads,
            toy_seed: toy.seed,
            toy_checkpoint: None,
            remote_url: None,
            remote_model: remote.model,
            remote_timeout_secs: remote.timeout_secs,
            remote_max_retries: remote.max_retries,
            remote_max_in_flight: remote.max_in_flight,
            remote_embeddings: remote.embeddings,
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.templates_dir,
            &mut self.script,
            &mut self.toy_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_override_value(value.trim()));
        }
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.r > 0.0 && self.r <= 1.0) {
            return fail(format!("r must be in (0, 1], got {}", self.r));
        }
        if !self.lambda.is_finite() {
            return fail("lambda must be finite".into());
        }
        if self.window_w == 0 || self.source_window_tokens == 0 {
            return fail("window_w and source_window_tokens must be positive".into());
        }
        if !(self.c > 0.0) {
            return fail(format!("c must be positive, got {}", self.c));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return fail(format!(
                "need 1 <= n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            ));
        }
        if self.epochs == 0 || self.steps_per_item == 0 || self.workers == 0 {
            return fail("epochs, steps_per_item and workers must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr must be positive and weight_decay non-negative".into());
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.eps > 0.0) {
            return fail("beta1 must be in (0, 1) and eps positive".into());
        }
        if !(self.beta2_floor > 0.0 && self.beta2_floor < 1.0) {
            return fail("beta2_floor must be in (0, 1)".into());
        }
        if !(self.gen_temperature >= 0.0) || !(self.check_temperature >= 0.0) {
            return fail("temperatures must be non-negative".into());
        }
        if self.gen_max_tokens == 0 || self.check_max_tokens == 0 || self.answer_max_tokens == 0 {
            return fail("token budgets must be positive".into());
        }
        if self.backend == BackendKind::Scripted && self.script.is_none() {
            return fail("backend = \"scripted\" requires `script`".into());
        }
        if self.backend == BackendKind::Toy {
            self.toy_config()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn toy_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: self.toy_vocab_size,
            context_length: self.toy_context_length,
            embed_dim: self.toy_embed_dim,
            n_layers: self.toy_n_layers,
            n_heads: self.toy_n_heads,
            seed: self.toy_seed,
        }
    }

    /// Remote settings. The URL falls back to `LSCP_REMOTE_URL`; the key
    /// comes only from `LSCP_REMOTE_KEY`.
    pub fn remote_config(&self) -> RemoteConfig {
        let env = RemoteConfig::default().with_env();
        RemoteConfig {
            base_url: self.remote_url.clone().unwrap_or(env.base_url),
            api_key: env.api_key,
            model: self.remote_model.clone(),
            timeout_secs: self.remote_timeout_secs,
            max_retries: self.remote_max_retries,
            max_in_flight: self.remote_max_in_flight,
            embeddings: self.remote_embeddings,
        }
    }

    pub fn verifier_config(&self) -> VerifierConfig {
        VerifierConfig {
            c: self.c,
            n_min: self.n_min,
            n_max: self.n_max,
            gen_temperature: self.gen_temperature,
            check_temperature: self.check_temperature,
            gen_max_tokens: self.gen_max_tokens,
            check_max_tokens: self.check_max_tokens,
            workers: self.workers,
        }
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            accept_policy: self.accept_policy,
            include_source_windows: self.include_source_windows,
            discard_zero_conviction: self.discard_zero_conviction,
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: crate::gatedopt::DEFAULT_BETA2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        Ok(TrainingConfig {
            epochs: self.epochs,
            steps_per_item: self.steps_per_item,
            seed: self.seed,
            shuffle: self.shuffle,
            optimizer: self.optimizer_config(),
            schedule: GateSchedule::new(self.r, self.beta2_floor)?,
        })
    }
}
