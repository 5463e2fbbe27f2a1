//! Replayable backend driven by a JSON script.
//!
//! Generation looks up `sha256(prompt)` in `responses`, then falls back to the
//! first `rules` entry whose `contains` text occurs in the prompt. Scoring
//! splits text into whitespace-led word pieces and looks up `sha256(text)` in
//! `scores` (a per-token list or one constant), then `score_rules`, then a
//! uniform distribution over `uniform_vocab` tokens. In strict mode a miss is
//! an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{word_pieces, Backend, BackendDescriptor, BackendKind, Capability, ScoredText};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRule {
    pub contains: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    pub contains: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreEntry {
    Constant(f64),
    PerToken(Vec<f64>),
}

fn default_strict() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default = "default_strict")]
    pub strict: bool,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ResponseRule>,
    #[serde(default)]
    pub scores: BTreeMap<String, ScoreEntry>,
    #[serde(default)]
    pub score_rules: Vec<ScoreRule>,
    #[serde(default)]
    pub uniform_vocab: Option<usize>,
}

impl Default for ScriptFile {
    fn default() -> Self {
        Self {
            strict: true,
            responses: BTreeMap::new(),
            rules: Vec::new(),
            scores: BTreeMap::new(),
            score_rules: Vec::new(),
            uniform_vocab: None,
        }
    }
}

pub fn prompt_key(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct ScriptedBackend {
    script: ScriptFile,
    instance_id: String,
    calls: Mutex<Vec<String>>,
}

impl Clone for ScriptedBackend {
    fn clone(&self) -> Self {
        Self::new(self.script.clone())
    }
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new(ScriptFile::default())
    }
}

impl ScriptedBackend {
    pub fn new(script: ScriptFile) -> Self {
        let json = serde_json::to_vec(&script).unwrap_or_default();
        let instance_id = format!("scripted-{}", &prompt_key_bytes(&json)[..16]);
        Self {
            script,
            instance_id,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let script: ScriptFile = serde_json::from_str(&text)?;
        Ok(Self::new(script))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.script)?)?;
        Ok(())
    }

    pub fn script(&self) -> &ScriptFile {
        &self.script
    }

    pub fn with_response(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.script
            .responses
            .insert(prompt_key(prompt), response.into());
        Self::new(self.script)
    }

    pub fn with_rule(mut self, contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.rules.push(ResponseRule {
            contains: contains.into(),
            response: response.into(),
        });
        Self::new(self.script)
    }

    pub fn with_scores(mut self, text: &str, entry: ScoreEntry) -> Self {
        self.script.scores.insert(prompt_key(text), entry);
        Self::new(self.script)
    }

    pub fn with_score_rule(mut self, contains: impl Into<String>, logprob: f64) -> Self {
        self.script.score_rules.push(ScoreRule {
            contains: contains.into(),
            logprob,
        });
        Self::new(self.script)
    }

    pub fn with_uniform_vocab(mut self, vocab: usize) -> Self {
        self.script.uniform_vocab = Some(vocab);
        Self::new(self.script)
    }

    pub fn lenient(mut self) -> Self {
        self.script.strict = false;
        Self::new(self.script)
    }

    /// Prompts passed to `generate`, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().map(|c| c.clone()).unwrap_or_default()
    }

    pub fn clear_calls(&self) {
        if let Ok(mut c) = self.calls.lock() {
            c.clear();
        }
    }

    fn lookup_response(&self, prompt: &str) -> Option<&str> {
        self.script
            .responses
            .get(&prompt_key(prompt))
            .map(String::as_str)
            .or_else(|| {
                self.script
                    .rules
                    .iter()
                    .find(|r| prompt.contains(&r.contains))
                    .map(|r| r.response.as_str())
            })
    }
}

fn prompt_key_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::new(
            BackendKind::Scripted,
            [Capability::Score, Capability::Generate, Capability::Embed],
            "word-pieces-v1",
        )
    }

    fn instance_id(&self) -> String {
        self.instance_id.clone()
    }

    fn score(&self, text: &str) -> Result<ScoredText> {
        let offsets = word_pieces(text);
        if offsets.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let n = offsets.len();
        let logprobs = match self.script.scores.get(&prompt_key(text)) {
            Some(ScoreEntry::Constant(lp)) => vec![*lp; n],
            Some(ScoreEntry::PerToken(lps)) if lps.len() == n => lps.clone(),
            Some(ScoreEntry::PerToken(lps)) => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: lps.len(),
                })
            }
            None => {
                if let Some(rule) = self
                    .script
                    .score_rules
                    .iter()
                    .find(|r| text.contains(&r.contains))
                {
                    vec![rule.logprob; n]
                } else if let Some(v) = self.script.uniform_vocab.filter(|v| *v > 0) {
                    vec![-(v as f64).ln(); n]
                } else {
                    return Err(Error::MissingScript(format!("score:{}", prompt_key(text))));
                }
            }
        };
        if logprobs.iter().any(|lp| *lp > 0.0 || lp.is_nan()) {
            return Err(Error::InvalidParameter(
                "scripted logprobs must be <= 0".into(),
            ));
        }
        Ok(ScoredText {
            text: text.to_string(),
            offsets,
            logprobs,
        })
    }

    fn generate(&self, prompt: &str, _temperature: f64, _max_tokens: usize) -> Result<String> {
        if let Ok(mut calls) = self.calls.lock() {
            calls.push(prompt.to_string());
        }
        match self.lookup_response(prompt) {
            Some(r) => Ok(r.to_string()),
            None if self.script.strict => Err(Error::MissingScript(prompt_key(prompt))),
            None => Ok(String::new()),
        }
    }
}
