//! End-to-end runs: detect surprising passages, verify them, train on the
//! verified corpus and evaluate, all on one backend instance.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{self, EvalOptions, EvalRecord, EvalReport, SelfExtinguish};
use crate::gatedopt::{self, GateSchedule, OptimizerState, TrainingReport};
use crate::grounding::{
    build_grounding, record_id, Grounding, GroundingStore, PassageRef, PassageTokens,
};
use crate::modelhub::{
    checkpoint, Backend, BackendDescriptor, BackendKind, Capability, RemoteBackend, ScoredText,
    ScriptedBackend, ToyModel,
};
use crate::textstat::{
    self, flag_passages, surprisal_profile, PassageFlag, ReferenceStats, SurprisalProfile,
};
use crate::verifier::{
    self, composition, fan_out, generate_chain, ChainOutcome, CorpusComposition, ParsedChain,
    PassageFailure, PromptTemplates, TrainItem, VerifyBatch,
};

pub mod config;
pub mod io;
pub mod report;

pub use config::PipelineConfig;
pub use io::Document;
pub use report::{render_report, RenderedReport, Table};

pub const REPORT_FORMAT: &str = "lscp-run-v1";

pub fn build_backend(
    config: &PipelineConfig,
) -> Result<(Box<dyn Backend>, Option<OptimizerState>)> {
    match config.backend {
        BackendKind::Toy => match &config.toy_checkpoint {
            Some(dir) => {
                let (model, state) = checkpoint::load(dir)?;
                Ok((Box::new(model), state))
            }
            None => Ok((Box::new(ToyModel::new(config.toy_config())?), None)),
        },
        BackendKind::Scripted => {
            let path = config
                .script
                .as_ref()
                .ok_or_else(|| Error::Config("scripted backend needs `script`".into()))?;
            let backend = ScriptedBackend::load(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            Ok((Box::new(backend), None))
        }
        BackendKind::Remote => Ok((Box::new(RemoteBackend::new(config.remote_config())), None)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocFlags {
    pub doc_id: String,
    pub flags: Vec<PassageFlag>,
}

/// Everything Stage 1 produces; `verify` reads it back from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Output {
    pub instance_id: String,
    pub stats: ReferenceStats,
    pub threshold: f64,
    pub profiles: Vec<SurprisalProfile>,
    pub flags: Vec<DocFlags>,
    pub groundings: Vec<Grounding>,
    pub skipped: Vec<Skipped>,
}

impl Stage1Output {
    pub fn flagged_count(&self) -> usize {
        self.flags
            .iter()
            .flat_map(|d| &d.flags)
            .filter(|f| f.flagged)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub passage_ref: PassageRef,
    pub record_id: String,
    pub surprisal: f64,
    pub drop_ratio: f64,
    pub peaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub instance_id: String,
    pub reference: ReferenceStats,
    pub threshold: f64,
    pub documents: usize,
    pub passages: usize,
    /// Flagged passages that yielded a grounding.
    pub flagged: usize,
    pub flags: Vec<DocFlags>,
    pub groundings: Vec<GroundingSummary>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub instance_id: String,
    pub inputs: usize,
    pub outcomes: Vec<ChainOutcome>,
    pub skipped: Vec<PassageFailure>,
    pub k_histogram: BTreeMap<u32, usize>,
    pub composition: CorpusComposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Report {
    pub instance_id: String,
    pub items: usize,
    pub beta2_by_k: BTreeMap<u32, f64>,
    pub training: TrainingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub passages: usize,
    pub mean_surprisal_before: f64,
    pub ppl_before: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_surprisal_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_extinguish: Option<SelfExtinguish>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSection {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Lscp,
    /// Plain fine-tuning on raw passage text at the default beta2.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub arm: Arm,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub config: PipelineConfig,
    pub backend: BackendDescriptor,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    pub stage3: Option<Stage3Report>,
    pub eval: Option<EvalSection>,
    /// Wall-clock seconds per stage. Everything else is deterministic.
    pub timing: BTreeMap<String, f64>,
}

impl RunReport {
    fn empty(config: &PipelineConfig, backend: BackendDescriptor, arm: Arm) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            arm,
            complete: false,
            failed_stage: None,
            error: None,
            warnings: Vec::new(),
            config: config.clone(),
            backend,
            stage1: None,
            stage2: None,
            stage3: None,
            eval: None,
            timing: BTreeMap::new(),
        }
    }

    /// Canonical JSON with the timing section removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing.clear();
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    /// Instance ids recorded by the stages that ran.
    pub fn instance_ids(&self) -> Vec<&str> {
        let mut ids = Vec::new();
        if let Some(s) = &self.stage1 {
            ids.push(s.instance_id.as_str());
        }
        if let Some(s) = &self.stage2 {
            ids.push(s.instance_id.as_str());
        }
        if let Some(s) = &self.stage3 {
            ids.push(s.instance_id.as_str());
        }
        if let Some(s) = &self.eval {
            ids.push(s.instance_id.as_str());
        }
        ids
    }

    /// Checks that stage counts agree with one another.
    pub fn reconcile(&self) -> Result<()> {
        let mismatch =
            |what: &str, a: usize, b: usize| Err(Error::StageOrder(format!("{what}: {a} != {b}")));
        if let (Some(s1), Some(s2)) = (&self.stage1, &self.stage2) {
            if s1.flagged != s2.inputs {
                return mismatch("flagged vs stage 2 inputs", s1.flagged, s2.inputs);
            }
            if s2.outcomes.len() + s2.skipped.len() != s2.inputs {
                return mismatch(
                    "stage 2 outcomes",
                    s2.outcomes.len() + s2.skipped.len(),
                    s2.inputs,
                );
            }
        }
        if let (Some(s2), Some(s3)) = (&self.stage2, &self.stage3) {
            if s2.composition.total != s3.items {
                return mismatch("corpus vs stage 3 items", s2.composition.total, s3.items);
            }
        }
        let ids = self.instance_ids();
        if ids.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::StageOrder(
                "stages ran on different backend instances".into(),
            ));
        }
        Ok(())
    }
}

/// Where the reference statistics come from.
#[derive(Debug, Clone)]
pub enum Reference {
    Documents(Vec<Document>),
    Stats(ReferenceStats),
}

#[derive(Debug, Clone)]
pub struct RunInputs {
    pub documents: Vec<Document>,
    pub reference: Reference,
    pub eval: Vec<EvalRecord>,
}

pub struct Pipeline {
    config: PipelineConfig,
    backend: Box<dyn Backend>,
    optimizer: Option<OptimizerState>,
    templates: PromptTemplates,
    store: Option<GroundingStore>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("backend", &self.backend.instance_id())
            .finish_non_exhaustive()
    }
}

fn timed<T>(timing: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *timing.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
    out
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (backend, optimizer) = build_backend(&config)?;
        let mut p = Self::with_backend(config, backend)?;
        p.optimizer = optimizer;
        Ok(p)
    }

    pub fn with_backend(config: PipelineConfig, backend: Box<dyn Backend>) -> Result<Self> {
        config.validate()?;
        let templates = match &config.templates_dir {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            config,
            backend,
            optimizer: None,
            templates,
            store: None,
        })
    }

    /// Groundings from every later `run` are appended to `store`.
    pub fn with_store(mut self, store: GroundingStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn store(&self) -> Option<&GroundingStore> {
        self.store.as_ref()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn optimizer(&self) -> Option<&OptimizerState> {
        self.optimizer.as_ref()
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn require(&self, caps: &[Capability]) -> Result<()> {
        self.backend.descriptor().require(caps)
    }

    fn run_capabilities(&self, train: bool) -> Vec<Capability> {
        let mut caps = vec![Capability::Score, Capability::Generate];
        if self.store.is_some() {
            caps.push(Capability::Embed);
        }
        if train {
            caps.push(Capability::Train);
        }
        caps
    }

    fn score_documents(
        &self,
        docs: &[Document],
    ) -> Result<Vec<Result<(ScoredText, SurprisalProfile)>>> {
        let w = self.config.window_w;
        let backend = self.backend.as_ref();
        fan_out(docs, self.config.workers, |doc| {
            let scored = backend.score(&doc.text)?;
            let profile = surprisal_profile(doc.id.clone(), &scored.logprobs, w)?;
            Ok((scored, profile))
        })
    }

    /// Fits reference statistics over every passage of `reference`.
    pub fn calibrate(&self, reference: &[Document]) -> Result<ReferenceStats> {
        self.require(&[Capability::Score])?;
        let profiles = self
            .score_documents(reference)?
            .into_iter()
            .map(|r| r.map(|(_, p)| p))
            .collect::<Result<Vec<_>>>()?;
        textstat::fit_reference(&profiles, self.config.lambda)
    }

    /// Scores, flags and grounds every document. Documents that cannot be
    /// scored and flagged passages too short to ground are recorded as
    /// skipped. Scoring capability errors abort.
    pub fn detect(&self, docs: &[Document], stats: &ReferenceStats) -> Result<Stage1Output> {
        self.require(&[Capability::Score])?;
        let scored = self.score_documents(docs)?;
        let mut out = Stage1Output {
            instance_id: self.backend.instance_id(),
            stats: *stats,
            threshold: stats.threshold(),
            profiles: Vec::new(),
            flags: Vec::new(),
            groundings: Vec::new(),
            skipped: Vec::new(),
        };
        for (doc, result) in docs.iter().zip(scored) {
            let (scored, profile) = match result {
                Ok(v) => v,
                Err(e @ (Error::LogprobsUnavailable(_) | Error::MissingCapability { .. })) => {
                    return Err(e)
                }
                Err(e) => {
                    tracing::warn!(doc = %doc.id, "document skipped: {e}");
                    out.skipped.push(Skipped {
                        id: doc.id.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            let flags = flag_passages(&profile, stats);
            let ranges = profile.passage_ranges();
            for flag in flags.iter().filter(|f| f.flagged) {
                let range = ranges[flag.passage_index].clone();
                let passage_ref = PassageRef::new(doc.id.clone(), flag.passage_index);
                let tokens = PassageTokens {
                    text: &scored.text,
                    offsets: &scored.offsets[range.clone()],
                };
                match build_grounding(
                    passage_ref.clone(),
                    tokens,
                    &profile.token_surprisals[range],
                    doc.metadata.clone(),
                    self.config.source_window_tokens,
                ) {
                    Ok(g) => out.groundings.push(g),
                    Err(e) => out.skipped.push(Skipped {
                        id: passage_ref.to_string(),
                        reason: e.to_string(),
                    }),
                }
            }
            out.flags.push(DocFlags {
                doc_id: doc.id.clone(),
                flags,
            });
            out.profiles.push(profile);
        }
        Ok(out)
    }

    /// Persists groundings with backend embeddings; returns record ids.
    pub fn store_groundings(
        &self,
        store: &mut GroundingStore,
        groundings: &[Grounding],
    ) -> Result<Vec<String>> {
        groundings
            .iter()
            .map(|g| {
                let embedding = self.backend.embed(&g.contextual_text())?;
                store.insert(g.clone(), embedding)
            })
            .collect()
    }

    pub fn verify(&self, groundings: &[Grounding]) -> Result<VerifyBatch> {
        self.require(&[Capability::Generate])?;
        verifier::verify_all(
            self.backend.as_ref(),
            groundings,
            &self.templates,
            &self.config.verifier_config(),
        )
    }

    pub fn build_corpus(
        &self,
        outcomes: &[ChainOutcome],
        groundings: &[Grounding],
    ) -> Vec<TrainItem> {
        verifier::build_corpus(outcomes, groundings, &self.config.corpus_options())
    }

    /// Trains on `items` with the configured gate. The optimizer state
    /// persists across calls and across checkpoint saves.
    pub fn train(&mut self, items: &[TrainItem]) -> Result<TrainingReport> {
        let config = self.config.training_config()?;
        self.train_with(items, &config)
    }

    fn train_with(
        &mut self,
        items: &[TrainItem],
        config: &gatedopt::TrainingConfig,
    ) -> Result<TrainingReport> {
        self.require(&[Capability::Train])?;
        let kind = self.backend.descriptor().kind;
        let model = self
            .backend
            .as_trainable()
            .ok_or(Error::MissingCapability {
                backend: kind.to_string(),
                capability: Capability::Train.to_string(),
            })?;
        let mut state = match self.optimizer.take() {
            Some(mut s) if s.m.len() == model.parameters().len() => {
                s.lr = config.optimizer.lr;
                s.beta1 = config.optimizer.beta1;
                s.eps = config.optimizer.eps;
                s.weight_decay = config.optimizer.weight_decay;
                s
            }
            _ => OptimizerState::new(model.parameters().len(), config.optimizer)?,
        };
        let result = gatedopt::train_corpus(model, &mut state, items, config);
        self.optimizer = Some(state);
        result
    }

    pub fn evaluate(&self, records: &[EvalRecord]) -> Result<EvalReport> {
        evalkit::evaluate(
            self.backend.as_ref(),
            records,
            &EvalOptions {
                answer_max_tokens: self.config.answer_max_tokens,
                workers: self.config.workers,
            },
        )
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let toy = self
            .backend
            .as_toy()
            .ok_or_else(|| Error::MissingCapability {
                backend: self.backend.descriptor().kind.to_string(),
                capability: "checkpoint".into(),
            })?;
        checkpoint::save(dir, toy, self.optimizer.as_ref())
    }

    /// Target-passage surprisal and perplexity from `stage1`, and after
    /// rescoring when `rescore` is set.
    pub fn target_metrics(
        &self,
        docs: &[Document],
        stage1: &Stage1Output,
        rescore: bool,
    ) -> Result<Option<TargetMetrics>> {
        let refs: Vec<&PassageRef> = stage1.groundings.iter().map(|g| &g.passage_ref).collect();
        if refs.is_empty() {
            return Ok(None);
        }
        let collect = |profiles: &[SurprisalProfile]| -> Result<(Vec<f64>, Vec<f64>)> {
            let by_doc: BTreeMap<&str, &SurprisalProfile> =
                profiles.iter().map(|p| (p.doc_id.as_str(), p)).collect();
            let mut passage = Vec::new();
            let mut tokens = Vec::new();
            for r in &refs {
                let p = by_doc
                    .get(r.doc_id.as_str())
                    .ok_or_else(|| Error::StageOrder(format!("no profile for {r}")))?;
                let range = p
                    .passage_ranges()
                    .get(r.passage_index)
                    .cloned()
                    .ok_or_else(|| Error::StageOrder(format!("passage {r} out of range")))?;
                passage.push(p.passage_surprisals[r.passage_index]);
                tokens.extend_from_slice(&p.token_surprisals[range]);
            }
            Ok((passage, tokens))
        };
        let (before, before_tokens) = collect(&stage1.profiles)?;
        let mut metrics = TargetMetrics {
            passages: before.len(),
            mean_surprisal_before: textstat::mean(&before).unwrap_or(0.0),
            ppl_before: textstat::perplexity(&before_tokens)?,
            mean_surprisal_after: None,
            ppl_after: None,
            self_extinguish: None,
        };
        if rescore {
            let wanted: Vec<Document> = docs
                .iter()
                .filter(|d| refs.iter().any(|r| r.doc_id == d.id))
                .cloned()
                .collect();
            let profiles = self
                .score_documents(&wanted)?
                .into_iter()
                .map(|r| r.map(|(_, p)| p))
                .collect::<Result<Vec<_>>>()?;
            let (after, after_tokens) = collect(&profiles)?;
            metrics.mean_surprisal_after = textstat::mean(&after);
            metrics.ppl_after = Some(textstat::perplexity(&after_tokens)?);
            metrics.self_extinguish =
                evalkit::self_extinguish_values(&before, &after, stage1.threshold).ok();
        }
        Ok(Some(metrics))
    }

    fn stats_for(&self, reference: &Reference) -> Result<ReferenceStats> {
        match reference {
            Reference::Documents(docs) => self.calibrate(docs),
            Reference::Stats(s) => Ok(*s),
        }
    }

    /// Full LSCP run. Errors before any work (missing capability) are
    /// returned as `Err`; a stage failure returns a report marked incomplete.
    pub fn run(&mut self, inputs: &RunInputs) -> Result<RunReport> {
        self.run_arm(inputs, Arm::Lscp)
    }

    /// The memorization control: same detection and evaluation, but trains
    /// on the raw text of the flagged passages at beta2 = 0.999.
    pub fn run_normal_baseline(&mut self, inputs: &RunInputs) -> Result<RunReport> {
        self.run_arm(inputs, Arm::Normal)
    }

    fn run_arm(&mut self, inputs: &RunInputs, arm: Arm) -> Result<RunReport> {
        let train = self.config.stage3 || arm == Arm::Normal;
        self.require(&self.run_capabilities(train))?;
        let mut report = RunReport::empty(&self.config, self.backend.descriptor(), arm);
        if inputs.documents.is_empty() {
            tracing::warn!("document corpus is empty; nothing to do");
            report.warnings.push("document corpus is empty".into());
            report.complete = true;
            return Ok(report);
        }
        match self.run_stages(inputs, arm, train, &mut report) {
            Ok(()) => report.complete = true,
            Err((stage, e)) => {
                tracing::error!(stage, "run aborted: {e}");
                report.failed_stage = Some(stage.to_string());
                report.error = Some(e.to_string());
            }
        }
        Ok(report)
    }

    fn run_stages(
        &mut self,
        inputs: &RunInputs,
        arm: Arm,
        train: bool,
        report: &mut RunReport,
    ) -> std::result::Result<(), (&'static str, Error)> {
        let instance_id = self.backend.instance_id();
        let mut timing = BTreeMap::new();

        let stage1 = timed(&mut timing, "stage1", || {
            let stats = self.stats_for(&inputs.reference)?;
            let out = self.detect(&inputs.documents, &stats)?;
            if let Some(mut store) = self.store.take() {
                let stored = self.store_groundings(&mut store, &out.groundings);
                self.store = Some(store);
                stored?;
            }
            Ok(out)
        });
        report.timing.append(&mut timing);
        let stage1 = stage1.map_err(|e| ("stage1", e))?;
        report.stage1 = Some(summarize_stage1(&stage1, inputs.documents.len()));
        let groundings = &stage1.groundings;

        let items = match arm {
            Arm::Lscp => {
                let batch = timed(&mut timing, "stage2", || self.verify(groundings));
                report.timing.append(&mut timing);
                let batch = batch.map_err(|e| ("stage2", e))?;
                let items = self.build_corpus(&batch.outcomes, groundings);
                report.stage2 = Some(summarize_stage2(
                    &instance_id,
                    groundings.len(),
                    batch,
                    &items,
                ));
                items
            }
            Arm::Normal => groundings
                .iter()
                .map(|g| gatedopt::raw_item(g.passage_ref.to_string(), g.passage_text.clone()))
                .collect(),
        };

        let before = if inputs.eval.is_empty() {
            None
        } else {
            let r = timed(&mut timing, "eval", || self.evaluate(&inputs.eval));
            report.timing.append(&mut timing);
            Some(r.map_err(|e| ("eval", e))?)
        };

        let mut trained = false;
        if train && items.is_empty() {
            tracing::warn!("training corpus is empty; stage 3 skipped");
            report
                .warnings
                .push("training corpus is empty; stage 3 skipped".into());
        } else if train {
            let mut config = self.config.training_config().map_err(|e| ("stage3", e))?;
            if arm == Arm::Normal {
                config.schedule = GateSchedule::closed();
            }
            let training = timed(&mut timing, "stage3", || self.train_with(&items, &config));
            report.timing.append(&mut timing);
            let training = training.map_err(|e| ("stage3", e))?;
            let mut beta2_by_k = BTreeMap::new();
            for it in &items {
                beta2_by_k.insert(it.conviction_k, config.schedule.beta2_for(it.conviction_k));
            }
            report.stage3 = Some(Stage3Report {
                instance_id: instance_id.clone(),
                items: items.len(),
                beta2_by_k,
                training,
            });
            trained = true;
        }

        let eval = timed(&mut timing, "eval", || -> Result<EvalSection> {
            let after = match (&before, trained) {
                (Some(_), true) => Some(self.evaluate(&inputs.eval)?),
                _ => None,
            };
            Ok(EvalSection {
                instance_id: instance_id.clone(),
                before,
                after,
                target: self.target_metrics(&inputs.documents, &stage1, trained)?,
            })
        });
        report.timing.append(&mut timing);
        report.eval = Some(eval.map_err(|e| ("eval", e))?);
        Ok(())
    }
}

fn summarize_stage1(s: &Stage1Output, documents: usize) -> Stage1Report {
    Stage1Report {
        instance_id: s.instance_id.clone(),
        reference: s.stats,
        threshold: s.threshold,
        documents,
        passages: s.profiles.iter().map(|p| p.passage_count()).sum(),
        flagged: s.groundings.len(),
        flags: s.flags.clone(),
        groundings: s
            .groundings
            .iter()
            .map(|g| GroundingSummary {
                passage_ref: g.passage_ref.clone(),
                record_id: record_id(&g.passage_ref),
                surprisal: g.surprisal,
                drop_ratio: g.drop_ratio,
                peaks: g.peak_positions.len(),
            })
            .collect(),
        skipped: s.skipped.clone(),
    }
}

fn summarize_stage2(
    instance_id: &str,
    inputs: usize,
    batch: VerifyBatch,
    items: &[TrainItem],
) -> Stage2Report {
    let mut k_histogram = BTreeMap::new();
    for o in &batch.outcomes {
        *k_histogram.entry(o.k).or_insert(0) += 1;
    }
    Stage2Report {
        instance_id: instance_id.to_string(),
        inputs,
        outcomes: batch.outcomes,
        skipped: batch.skipped,
        k_histogram,
        composition: composition(items),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub r: f64,
    pub k_histogram: BTreeMap<u32, usize>,
    pub composition: CorpusComposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_after: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub stage1: Stage1Report,
    pub chains: usize,
    pub chain_failures: Vec<PassageFailure>,
    pub entries: Vec<SweepEntry>,
}

/// Runs the pipeline once per `r`. Stage 1 and chain generation happen once
/// on the initial model; each `r` starts from a freshly built backend,
/// reruns the consistency checks on the cached chains and trains.
pub fn sweep(config: &PipelineConfig, inputs: &RunInputs, rs: &[f64]) -> Result<SweepReport> {
    let base = Pipeline::new(config.clone())?;
    base.require(&base.run_capabilities(config.stage3))?;
    let stats = base.stats_for(&inputs.reference)?;
    let stage1 = base.detect(&inputs.documents, &stats)?;
    let vcfg = config.verifier_config();

    let generated = fan_out(
        &stage1.groundings,
        config.workers,
        |g| -> Result<(usize, ParsedChain)> {
            let n = verifier::chain_length(g.surprisal, vcfg.c, vcfg.n_min, vcfg.n_max)?;
            Ok((
                n,
                generate_chain(base.backend(), g, n, base.templates(), &vcfg)?,
            ))
        },
    )?;
    let mut chains = Vec::new();
    let mut chain_failures = Vec::new();
    for (g, r) in stage1.groundings.iter().zip(generated) {
        match r {
            Ok((n, chain)) => chains.push((g, n, chain)),
            Err(e) => chain_failures.push(PassageFailure {
                passage_ref: g.passage_ref.clone(),
                reason: e.to_string(),
            }),
        }
    }

    let mut entries = Vec::new();
    for &r in rs {
        let mut cfg = config.clone();
        cfg.r = r;
        let mut p = Pipeline::new(cfg)?;
        let checked = fan_out(&chains, config.workers, |(g, n, chain)| {
            verifier::check_chain(
                p.backend(),
                g.passage_ref.clone(),
                *n,
                chain,
                p.templates(),
                &vcfg,
            )
        })?;
        let outcomes = checked.into_iter().collect::<Result<Vec<_>>>()?;
        let items = p.build_corpus(&outcomes, &stage1.groundings);
        let mut k_histogram = BTreeMap::new();
        for o in &outcomes {
            *k_histogram.entry(o.k).or_insert(0) += 1;
        }
        let trained = config.stage3 && !items.is_empty();
        let mean_final_loss = if trained {
            p.train(&items)?.mean_final_loss()
        } else {
            None
        };
        let eval_after = if inputs.eval.is_empty() {
            None
        } else {
            Some(p.evaluate(&inputs.eval)?)
        };
        entries.push(SweepEntry {
            r,
            k_histogram,
            composition: composition(&items),
            mean_final_loss,
            eval_after,
            target: p.target_metrics(&inputs.documents, &stage1, trained)?,
        });
    }
    Ok(SweepReport {
        stage1: summarize_stage1(&stage1, inputs.documents.len()),
        chains: chains.len(),
        chain_failures,
        entries,
    })
}
