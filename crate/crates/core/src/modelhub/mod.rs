//! Model backends: scoring, generation, embeddings and, for the toy model,
//! training.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod remote;
pub mod scripted;
pub mod toy;

pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::ScriptedBackend;
pub use toy::{ToyModel, ToyModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Scripted,
    Remote,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::Scripted => "scripted",
            BackendKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Score,
    Generate,
    Embed,
    Train,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Capability::Score => "score",
            Capability::Generate => "generate",
            Capability::Embed => "embed",
            Capability::Train => "train",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub capabilities: BTreeSet<Capability>,
    pub tokenizer_id: String,
}

impl BackendDescriptor {
    pub fn new(
        kind: BackendKind,
        capabilities: impl IntoIterator<Item = Capability>,
        tokenizer_id: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            capabilities: capabilities.into_iter().collect(),
            tokenizer_id: tokenizer_id.into(),
        }
    }

    pub fn supports(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn require(&self, caps: &[Capability]) -> Result<()> {
        match caps.iter().find(|c| !self.supports(**c)) {
            Some(missing) => Err(Error::MissingCapability {
                backend: self.kind.to_string(),
                capability: missing.to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Per-token log-probabilities of a text, with each token's byte span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub offsets: Vec<Range<usize>>,
    pub logprobs: Vec<f64>,
}

impl ScoredText {
    pub fn surprisals(&self) -> Vec<f64> {
        self.logprobs.iter().map(|lp| -lp).collect()
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }
}

/// Receives `(params, grads)` once per training step.
pub type ParamHook<'a> = dyn FnMut(&mut [f64], &[f64]) -> Result<()> + 'a;

/// A parameter vector that can be trained one sequence at a time.
pub trait Trainable {
    fn parameters(&self) -> &[f64];
    /// Tokenises `text` and applies the truncation policy for training.
    fn encode_for_training(&self, text: &str) -> Result<Vec<u32>>;
    fn loss(&self, ids: &[u32]) -> Result<f64>;
    /// Computes the loss and gradient of `ids` and passes both to `hook`
    /// exactly once. Parameters change only through the hook.
    fn train_step(&mut self, ids: &[u32], hook: &mut ParamHook<'_>) -> Result<f64>;
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Stable identifier of this backend instance, recorded by every stage.
    fn instance_id(&self) -> String;

    fn score(&self, text: &str) -> Result<ScoredText>;

    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String>;

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(overlap_embedding(text))
    }

    fn as_trainable(&mut self) -> Option<&mut dyn Trainable> {
        None
    }

    fn as_toy(&self) -> Option<&ToyModel> {
        None
    }
}

pub const OVERLAP_DIM: usize = 64;

/// L2-normalised hashed bag of lower-cased words, for backends without
/// native embeddings.
pub fn overlap_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; OVERLAP_DIM];
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        v[(h % OVERLAP_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Splits text into whitespace-led word pieces whose concatenation is the
/// original text.
pub fn word_pieces(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(start..i);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        match (in_word, out.last_mut()) {
            (false, Some(last)) => last.end = text.len(),
            _ => out.push(start..text.len()),
        }
    }
    out
}
