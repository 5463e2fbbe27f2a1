//! Self-verification of flagged passages.
//!
//! For each passage the backend writes a tagged question-answer chain in a
//! single call. Every pair is then checked against the backend's own
//! knowledge with the passage withheld. Walking the chain in order, a PASS
//! adds one to the conviction depth `k`; a FAIL on an `existing` question is
//! noted and skipped; a FAIL on a `mechanism` or `implication` question ends
//! the chain and produces a strangeness record.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{metadata_line, Grounding, PassageRef};
use crate::modelhub::Backend;

pub const UNCERTAINTY_PHRASE: &str = "I cannot confirm or rule this out";

const DEFAULT_GENERATION: &str = include_str!("../templates/chain_generation.txt");
const DEFAULT_CONSISTENCY: &str = include_str!("../templates/consistency_check.txt");
const DEFAULT_STRANGENESS: &str = include_str!("../templates/strangeness.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaTag {
    Existing,
    Mechanism,
    Implication,
}

impl QaTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "existing" => Some(QaTag::Existing),
            "mechanism" => Some(QaTag::Mechanism),
            "implication" => Some(QaTag::Implication),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QaTag::Existing => "existing",
            QaTag::Mechanism => "mechanism",
            QaTag::Implication => "implication",
        }
    }

    /// Whether a failed check on this tag ends the chain.
    pub fn breaks_on_fail(self) -> bool {
        !matches!(self, QaTag::Existing)
    }

    fn criterion(self) -> &'static str {
        match self {
            QaTag::Existing => {
                "Is the answer consistent with established background knowledge?"
            }
            QaTag::Mechanism => {
                "Is the specific causal step scientifically plausible? Would known physical or \
                 biological constraints prevent it? Is the claimed magnitude or efficiency realistic?"
            }
            QaTag::Implication => {
                "If the claim holds, does the stated consequence follow, and does it conflict \
                 with anything known?"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub tag: QaTag,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepVerdict {
    Pass,
    FailLenient,
    FailBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub verdict: Verdict,
    pub reason: Option<String>,
}

impl CheckResult {
    pub fn pass() -> Self {
        Self {
            verdict: Verdict::Pass,
            reason: None,
        }
    }

    pub fn fail(reason: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Fail,
            reason: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrangenessRecord {
    pub passage_ref: PassageRef,
    pub claim_summary: String,
    pub failure_reasoning: String,
    pub text: String,
    pub k_at_break: u32,
}

/// Audit form of a verified chain: `pairs`, `verdicts` and `reasons` are
/// parallel and cover only the evaluated steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub passage_ref: PassageRef,
    pub n_requested: usize,
    pub pairs: Vec<QaPair>,
    pub verdicts: Vec<StepVerdict>,
    pub reasons: Vec<Option<String>>,
    pub k: u32,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strangeness: Option<StrangenessRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainItemKind {
    QaPair,
    SourceWindow,
    Strangeness,
    /// Raw passage text, used only by the plain fine-tuning control.
    RawPassage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub id: String,
    pub kind: TrainItemKind,
    pub text: String,
    pub conviction_k: u32,
    pub passage_ref: Option<PassageRef>,
    pub importance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptPolicy {
    #[default]
    Graduated,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub accept_policy: AcceptPolicy,
    pub include_source_windows: bool,
    /// Drop passages whose chain broke before any PASS instead of training on
    /// their strangeness record.
    pub discard_zero_conviction: bool,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            accept_policy: AcceptPolicy::Graduated,
            include_source_windows: true,
            discard_zero_conviction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub c: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub gen_temperature: f64,
    pub check_temperature: f64,
    pub gen_max_tokens: usize,
    pub check_max_tokens: usize,
    pub workers: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            c: 5.0,
            n_min: 3,
            n_max: 20,
            gen_temperature: 0.7,
            check_temperature: 0.1,
            gen_max_tokens: 2048,
            check_max_tokens: 256,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub generation: String,
    pub consistency: String,
    pub strangeness: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_sources(DEFAULT_GENERATION, DEFAULT_CONSISTENCY, DEFAULT_STRANGENESS)
            .expect("bundled templates are valid")
    }
}

fn strip_header(text: &str) -> String {
    let body: Vec<&str> = text.lines().skip_while(|l| l.starts_with('#')).collect();
    body.join("\n").trim_end().to_string()
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

impl PromptTemplates {
    pub fn from_sources(generation: &str, consistency: &str, strangeness: &str) -> Result<Self> {
        let t = Self {
            generation: strip_header(generation),
            consistency: strip_header(consistency),
            strangeness: strip_header(strangeness),
        };
        t.validate()?;
        Ok(t)
    }

    /// Loads `chain_generation.txt`, `consistency_check.txt` and
    /// `strangeness.txt` from `dir`, keeping the bundled version of any file
    /// that is absent.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str, fallback: &str| -> Result<String> {
            let path = dir.join(name);
            if path.exists() {
                Ok(std::fs::read_to_string(path)?)
            } else {
                Ok(fallback.to_string())
            }
        };
        Self::from_sources(
            &read("chain_generation.txt", DEFAULT_GENERATION)?,
            &read("consistency_check.txt", DEFAULT_CONSISTENCY)?,
            &read("strangeness.txt", DEFAULT_STRANGENESS)?,
        )
    }

    fn validate(&self) -> Result<()> {
        let need = |text: &str, name: &str, keys: &[&str]| -> Result<()> {
            for key in keys {
                if !text.contains(&format!("{{{{{key}}}}}")) {
                    return Err(Error::Template(format!(
                        "{name} template lacks {{{{{key}}}}}"
                    )));
                }
            }
            Ok(())
        };
        need(&self.generation, "generation", &["passage", "n_questions"])?;
        need(&self.consistency, "consistency", &["question", "answer"])?;
        need(&self.strangeness, "strangeness", &["claim", "reasoning"])?;
        if self.consistency.contains("{{passage}}") {
            return Err(Error::Template(
                "consistency template must not include the passage".into(),
            ));
        }
        if !self.strangeness.contains(UNCERTAINTY_PHRASE) {
            return Err(Error::Template(format!(
                "strangeness template must contain \"{UNCERTAINTY_PHRASE}\""
            )));
        }
        Ok(())
    }

    pub fn generation_prompt(&self, grounding: &Grounding, n: usize) -> String {
        let meta = metadata_line(grounding.metadata.as_ref());
        let meta = if meta.is_empty() {
            "unknown".to_string()
        } else {
            meta
        };
        render(
            &self.generation,
            &[
                ("metadata", &meta),
                ("passage", &grounding.passage_text),
                ("n_questions", &n.to_string()),
            ],
        )
    }

    pub fn consistency_prompt(&self, pair: &QaPair) -> String {
        render(
            &self.consistency,
            &[
                ("tag", pair.tag.as_str()),
                ("criterion", pair.tag.criterion()),
                ("question", &pair.question),
                ("answer", &pair.answer),
            ],
        )
    }

    pub fn strangeness_text(&self, claim: &str, reasoning: &str) -> String {
        let claim = claim.trim().trim_end_matches('.');
        let reasoning = reasoning.trim().trim_end_matches('.');
        render(
            &self.strangeness,
            &[("claim", claim), ("reasoning", reasoning)],
        )
    }
}

/// `clamp(ceil(surprisal * c), n_min, n_max)`.
pub fn chain_length(surprisal: f64, c: f64, n_min: usize, n_max: usize) -> Result<usize> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "c must be positive, got {c}"
        )));
    }
    if n_min == 0 || n_min > n_max {
        return Err(Error::InvalidParameter(format!(
            "invalid chain bounds [{n_min}, {n_max}]"
        )));
    }
    let raw = (surprisal * c).ceil();
    let raw = if raw.is_finite() && raw > 0.0 {
        raw as usize
    } else {
        0
    };
    Ok(raw.clamp(n_min, n_max))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedChain {
    pub pairs: Vec<QaPair>,
    pub warnings: Vec<String>,
}

fn parse_pair_line(line: &str) -> std::result::Result<(QaTag, String, String), String> {
    let line = line
        .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
        .trim_start();
    let rest = line
        .strip_prefix('[')
        .ok_or_else(|| "missing [tag] prefix".to_string())?;
    let close = rest
        .find(']')
        .ok_or_else(|| "unterminated tag".to_string())?;
    let tag =
        QaTag::parse(&rest[..close]).ok_or_else(|| format!("unknown tag [{}]", &rest[..close]))?;
    let body = &rest[close + 1..];
    let q = body.find("Q:").ok_or_else(|| "missing Q:".to_string())?;
    let a = body[q..]
        .find("A:")
        .map(|i| q + i)
        .ok_or_else(|| "missing A:".to_string())?;
    let question = body[q + 2..a].trim().to_string();
    let answer = body[a + 2..].trim().to_string();
    if question.is_empty() || answer.is_empty() {
        return Err("empty question or answer".into());
    }
    Ok((tag, question, answer))
}

/// Parses `[tag] Q: ... A: ...` lines. Lines that do not parse are dropped
/// with a warning; at most `n` pairs are kept.
pub fn parse_chain(text: &str, n: usize) -> ParsedChain {
    let mut parsed = ParsedChain::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_pair_line(line) {
            Ok((tag, question, answer)) => {
                if parsed.pairs.len() == n {
                    parsed.warnings.push(format!(
                        "line {}: beyond the {n} requested pairs",
                        lineno + 1
                    ));
                    continue;
                }
                parsed.pairs.push(QaPair {
                    question,
                    answer,
                    tag,
                    position: parsed.pairs.len() + 1,
                });
            }
            Err(why) => parsed.warnings.push(format!("line {}: {why}", lineno + 1)),
        }
    }
    parsed
}

/// One generation request for the whole chain, plus one retry when nothing
/// parses.
pub fn generate_chain(
    backend: &dyn Backend,
    grounding: &Grounding,
    n: usize,
    templates: &PromptTemplates,
    config: &VerifierConfig,
) -> Result<ParsedChain> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "chain length must be at least 1".into(),
        ));
    }
    let prompt = templates.generation_prompt(grounding, n);
    let mut warnings = Vec::new();
    for attempt in 0..2 {
        let response = backend.generate(&prompt, config.gen_temperature, config.gen_max_tokens)?;
        let mut parsed = parse_chain(&response, n);
        for w in &parsed.warnings {
            tracing::warn!(passage = %grounding.passage_ref, attempt, "{w}");
        }
        warnings.append(&mut parsed.warnings);
        if !parsed.pairs.is_empty() {
            parsed.warnings = warnings;
            return Ok(parsed);
        }
    }
    Err(Error::ChainGenerationFailed(
        grounding.passage_ref.to_string(),
    ))
}

/// First `PASS` or `FAIL` token in the reply; for FAIL, the text after it.
pub fn parse_verdict(text: &str) -> Option<CheckResult> {
    let is_word_char = |c: char| c.is_ascii_alphanumeric() || c == '_';
    let find_word = |word: &str| {
        text.match_indices(word).map(|(i, _)| i).find(|&i| {
            let before = text[..i].chars().next_back();
            let after = text[i + word.len()..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
    };
    match (find_word("PASS"), find_word("FAIL")) {
        (Some(p), f) if f.is_none_or(|f| p < f) => Some(CheckResult::pass()),
        (_, Some(f)) => {
            let rest = text[f + 4..].trim_start_matches([':', '-', ' ', '\t']);
            let reason = rest.lines().next().unwrap_or("").trim();
            let reason = if reason.is_empty() {
                rest.trim()
            } else {
                reason
            };
            Some(CheckResult::fail(if reason.is_empty() {
                "no reason given"
            } else {
                reason
            }))
        }
        _ => None,
    }
}

/// Checks one pair with the passage absent from the prompt. An unparsable
/// reply is retried once and then treated as FAIL.
pub fn check_consistency(
    backend: &dyn Backend,
    pair: &QaPair,
    templates: &PromptTemplates,
    config: &VerifierConfig,
) -> Result<CheckResult> {
    let prompt = templates.consistency_prompt(pair);
    for _ in 0..2 {
        let reply = backend.generate(&prompt, config.check_temperature, config.check_max_tokens)?;
        if let Some(result) = parse_verdict(&reply) {
            return Ok(result);
        }
    }
    Ok(CheckResult::fail("unparsable"))
}

/// Walks `steps` in order and stops consuming at the first breaking FAIL, so
/// checks that are computed lazily are never run past the break.
pub fn run_break_policy<I>(
    passage_ref: PassageRef,
    n_requested: usize,
    steps: I,
    templates: &PromptTemplates,
) -> ChainOutcome
where
    I: IntoIterator<Item = (QaPair, CheckResult)>,
{
    let mut outcome = ChainOutcome {
        passage_ref,
        n_requested,
        pairs: Vec::new(),
        verdicts: Vec::new(),
        reasons: Vec::new(),
        k: 0,
        completed: true,
        strangeness: None,
        warnings: Vec::new(),
    };
    for (pair, check) in steps {
        let verdict = match check.verdict {
            Verdict::Pass => {
                outcome.k += 1;
                StepVerdict::Pass
            }
            Verdict::Fail if pair.tag.breaks_on_fail() => StepVerdict::FailBreak,
            Verdict::Fail => StepVerdict::FailLenient,
        };
        if verdict == StepVerdict::FailBreak {
            let reasoning = check
                .reason
                .clone()
                .unwrap_or_else(|| "no reason given".into());
            outcome.strangeness = Some(StrangenessRecord {
                passage_ref: outcome.passage_ref.clone(),
                claim_summary: pair.answer.clone(),
                text: templates.strangeness_text(&pair.answer, &reasoning),
                failure_reasoning: reasoning,
                k_at_break: outcome.k,
            });
            outcome.completed = false;
        }
        outcome.pairs.push(pair);
        outcome.verdicts.push(verdict);
        outcome.reasons.push(check.reason);
        if !outcome.completed {
            break;
        }
    }
    outcome
}

pub fn check_chain(
    backend: &dyn Backend,
    passage_ref: PassageRef,
    n_requested: usize,
    chain: &ParsedChain,
    templates: &PromptTemplates,
    config: &VerifierConfig,
) -> Result<ChainOutcome> {
    let mut error = None;
    let steps = chain.pairs.iter().map_while(|pair| {
        match check_consistency(backend, pair, templates, config) {
            Ok(check) => Some((pair.clone(), check)),
            Err(e) => {
                error = Some(e);
                None
            }
        }
    });
    let mut outcome = run_break_policy(passage_ref, n_requested, steps, templates);
    if let Some(e) = error {
        return Err(e);
    }
    outcome.warnings = chain.warnings.clone();
    Ok(outcome)
}

pub fn verify_passage(
    backend: &dyn Backend,
    grounding: &Grounding,
    templates: &PromptTemplates,
    config: &VerifierConfig,
) -> Result<ChainOutcome> {
    let n = chain_length(grounding.surprisal, config.c, config.n_min, config.n_max)?;
    let chain = generate_chain(backend, grounding, n, templates, config)?;
    check_chain(
        backend,
        grounding.passage_ref.clone(),
        n,
        &chain,
        templates,
        config,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageFailure {
    pub passage_ref: PassageRef,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyBatch {
    pub outcomes: Vec<ChainOutcome>,
    pub skipped: Vec<PassageFailure>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs `f` over `items` on a bounded pool; results keep input order.
pub(crate) fn fan_out<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    Ok(pool(workers)?.install(|| items.par_iter().map(f).collect()))
}

/// Verifies every grounding. Passages whose chain cannot be generated or
/// checked are skipped and recorded.
pub fn verify_all(
    backend: &dyn Backend,
    groundings: &[Grounding],
    templates: &PromptTemplates,
    config: &VerifierConfig,
) -> Result<VerifyBatch> {
    let results = fan_out(groundings, config.workers, |g| {
        verify_passage(backend, g, templates, config)
    })?;
    let mut batch = VerifyBatch::default();
    for (g, r) in groundings.iter().zip(results) {
        match r {
            Ok(outcome) => batch.outcomes.push(outcome),
            Err(e @ (Error::InvalidParameter(_) | Error::Template(_))) => return Err(e),
            Err(e) => {
                tracing::warn!(passage = %g.passage_ref, "verification skipped: {e}");
                batch.skipped.push(PassageFailure {
                    passage_ref: g.passage_ref.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(batch)
}

fn qa_text(pair: &QaPair) -> String {
    format!("Q: {}\nA: {}", pair.question, pair.answer)
}

/// Assembles the training corpus from chain outcomes.
///
/// Graduated: a passage with `k > 0` contributes its passed mechanism and
/// implication pairs, its source window (when enabled) and its strangeness
/// record, all at conviction `k`; a passage with `k = 0` contributes only its
/// strangeness record. Threshold: completed chains with `k > 0` contribute
/// pairs and window; broken chains contribute only their strangeness record.
pub fn build_corpus(
    outcomes: &[ChainOutcome],
    groundings: &[Grounding],
    options: &CorpusOptions,
) -> Vec<TrainItem> {
    let by_ref: HashMap<&PassageRef, &Grounding> =
        groundings.iter().map(|g| (&g.passage_ref, g)).collect();
    let mut items = Vec::new();
    for outcome in outcomes {
        let grounding = by_ref.get(&outcome.passage_ref).copied();
        let importance = grounding.map_or(1.0, |g| g.surprisal);
        let base = outcome.passage_ref.to_string();
        let k = outcome.k;
        if k == 0 && options.discard_zero_conviction {
            continue;
        }
        let trains_content = k > 0
            && match options.accept_policy {
                AcceptPolicy::Graduated => true,
                AcceptPolicy::Threshold => outcome.completed,
            };
        if trains_content {
            for (pair, verdict) in outcome.pairs.iter().zip(&outcome.verdicts) {
                if *verdict == StepVerdict::Pass && pair.tag != QaTag::Existing {
                    items.push(TrainItem {
                        id: format!("{base}/qa/{}", pair.position),
                        kind: TrainItemKind::QaPair,
                        text: qa_text(pair),
                        conviction_k: k,
                        passage_ref: Some(outcome.passage_ref.clone()),
                        importance,
                    });
                }
            }
            if options.include_source_windows {
                if let Some(g) = grounding {
                    items.push(TrainItem {
                        id: format!("{base}/window"),
                        kind: TrainItemKind::SourceWindow,
                        text: g.contextual_source_window(),
                        conviction_k: k,
                        passage_ref: Some(outcome.passage_ref.clone()),
                        importance,
                    });
                }
            }
        }
        if let Some(s) = &outcome.strangeness {
            items.push(TrainItem {
                id: format!("{base}/strangeness"),
                kind: TrainItemKind::Strangeness,
                text: s.text.clone(),
                conviction_k: s.k_at_break,
                passage_ref: Some(outcome.passage_ref.clone()),
                importance,
            });
        }
    }
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusComposition {
    pub qa_pair: usize,
    pub source_window: usize,
    pub strangeness: usize,
    pub raw_passage: usize,
    pub total: usize,
}

pub fn composition(items: &[TrainItem]) -> CorpusComposition {
    let mut c = CorpusComposition::default();
    for it in items {
        match it.kind {
            TrainItemKind::QaPair => c.qa_pair += 1,
            TrainItemKind::SourceWindow => c.source_window += 1,
            TrainItemKind::Strangeness => c.strangeness += 1,
            TrainItemKind::RawPassage => c.raw_passage += 1,
        }
        c.total += 1;
    }
    c
}

pub fn write_outcomes_jsonl<W: std::io::Write>(
    mut out: W,
    outcomes: &[ChainOutcome],
) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut out, o)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
