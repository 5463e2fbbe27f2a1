//! Synthetic corpora and backends shared by the integration and acceptance
//! tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lscp::evalkit::{EvalCategory, EvalRecord};
use lscp::gatedopt::{self, AdamWConfig, GateSchedule, OptimizerState, TrainingConfig};
use lscp::modelhub::{
    Backend, BackendDescriptor, BackendKind, Capability, ScoredText, ScriptedBackend, ToyModel,
    ToyModelConfig, Trainable,
};
use lscp::pipeline::{Document, PipelineConfig};
use lscp::Result;
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ANIMALS: [&str; 8] = ["cat", "dog", "hen", "cow", "pig", "owl", "rat", "bee"];
pub const KINDS: [&str; 4] = ["pet", "bird", "beast", "friend"];
pub const FOODS: [&str; 6] = ["corn", "seed", "grass", "fish", "bread", "rice"];
pub const PLACES: [&str; 8] = [
    "barn", "pond", "farm", "tree", "hill", "road", "house", "field",
];

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn known_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "the {} is a {} that eats {} near the {}.",
        ANIMALS.choose(rng).unwrap(),
        KINDS.choose(rng).unwrap(),
        FOODS.choose(rng).unwrap(),
        PLACES.choose(rng).unwrap()
    )
}

pub fn known_sentences(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| known_sentence(&mut rng)).collect()
}

/// Words built only from letters that never occur in the known vocabulary.
fn novel_word(rng: &mut ChaCha8Rng) -> String {
    const CONS: &[u8] = b"qxzjvk";
    const VOWELS: &[u8] = b"aeiou";
    let mut w = String::new();
    for i in 0..5 {
        let set = if i % 2 == 0 { CONS } else { VOWELS };
        w.push(set[rng.random_range(0..set.len())] as char);
    }
    w
}

#[derive(Debug, Clone)]
pub struct NovelFact {
    pub animal: String,
    pub kind: String,
    pub food: String,
    pub place: String,
}

impl NovelFact {
    pub fn passage(&self) -> String {
        format!(
            "the {} is a {} that eats {} near the {}.",
            self.animal, self.kind, self.food, self.place
        )
    }

    pub fn paraphrase(&self) -> String {
        format!(
            "near the {} lives the {}, a {} eating {}.",
            self.place, self.animal, self.kind, self.food
        )
    }

    /// A three-pair chain in the generation output format.
    pub fn chain(&self) -> String {
        format!(
            "[existing] Q: what do animals need to live? A: animals need food and a place to live.\n\
             [mechanism] Q: what does the {a} eat? A: the {a} eats {f}.\n\
             [implication] Q: where is the {a} found? A: the {a} is found near the {p}.\n",
            a = self.animal,
            f = self.food,
            p = self.place
        )
    }
}

pub fn novel_facts(seed: u64, n: usize) -> Vec<NovelFact> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = novel_word(rng);
        if seen.insert(w.clone()) {
            return w;
        }
    };
    (0..n)
        .map(|_| NovelFact {
            animal: fresh(&mut rng),
            kind: fresh(&mut rng),
            food: fresh(&mut rng),
            place: fresh(&mut rng),
        })
        .collect()
}

pub fn documents(prefix: &str, texts: impl IntoIterator<Item = String>) -> Vec<Document> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Document {
            id: format!("{prefix}-{i:03}"),
            text,
            metadata: None,
        })
        .collect()
}

pub fn novel_eval_records(facts: &[NovelFact]) -> Vec<EvalRecord> {
    facts
        .iter()
        .enumerate()
        .map(|(i, f)| EvalRecord {
            id: format!("novel-{i:03}"),
            category: EvalCategory::Novel,
            text: f.passage(),
            paraphrase: f.paraphrase(),
            metadata: None,
            five_way: Vec::new(),
        })
        .collect()
}

/// Scripted generation that answers every chain request with the fact's
/// chain and passes every consistency check.
pub fn chain_script(facts: &[NovelFact]) -> ScriptedBackend {
    let mut b = ScriptedBackend::default();
    for f in facts {
        b = b.with_rule(f.passage(), f.chain());
    }
    b.with_rule("Verdict:", "PASS")
}

pub fn small_toy_config(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        vocab_size: 256,
        context_length: 128,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 2,
        seed,
    }
}

/// A toy model trained on known sentences, with its warmed optimizer.
pub fn pretrained_toy(seed: u64, sentences: usize, epochs: usize) -> (ToyModel, OptimizerState) {
    let mut model = ToyModel::new(small_toy_config(seed)).unwrap();
    let items: Vec<_> = known_sentences(seed ^ 0x5eed, sentences)
        .into_iter()
        .enumerate()
        .map(|(i, s)| gatedopt::raw_item(format!("pre-{i}"), s))
        .collect();
    let config = TrainingConfig {
        epochs,
        steps_per_item: 1,
        seed,
        shuffle: true,
        optimizer: AdamWConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        schedule: GateSchedule::closed(),
    };
    let (_, state) = gatedopt::train_fresh(&mut model, &items, &config).unwrap();
    (model, state)
}

/// Toy model for scoring and training, scripted text for generation.
#[derive(Debug, Clone)]
pub struct ToyWithScript {
    pub toy: ToyModel,
    pub script: ScriptedBackend,
}

impl Backend for ToyWithScript {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::new(
            BackendKind::Toy,
            [
                Capability::Score,
                Capability::Generate,
                Capability::Embed,
                Capability::Train,
            ],
            "byte-level-v1",
        )
    }

    fn instance_id(&self) -> String {
        format!("{}+{}", self.toy.instance_id(), self.script.instance_id())
    }

    fn score(&self, text: &str) -> Result<ScoredText> {
        self.toy.score(text)
    }

    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String> {
        self.script.generate(prompt, temperature, max_tokens)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.toy.embed(text)
    }

    fn as_trainable(&mut self) -> Option<&mut dyn Trainable> {
        Some(&mut self.toy)
    }

    fn as_toy(&self) -> Option<&ToyModel> {
        Some(&self.toy)
    }
}

/// Pipeline settings for toy runs: one passage per document, three-pair
/// chains, and a learning rate large enough to matter at this scale.
pub fn toy_pipeline_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig {
        seed,
        workers: 2,
        window_w: 128,
        lambda: 2.48,
        n_min: 3,
        n_max: 3,
        lr: 1e-3,
        epochs: 3,
        ..PipelineConfig::default()
    };
    c.toy_context_length = 128;
    c.toy_embed_dim = 32;
    c.toy_n_layers = 2;
    c.toy_n_heads = 2;
    c
}
