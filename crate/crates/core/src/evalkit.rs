//! Evaluation: perplexity per category, perturbation gap, five-way QA
//! accuracy and the self-extinguishing fraction.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::Metadata;
use crate::modelhub::Backend;
use crate::textstat::{mean, perplexity, SurprisalProfile};
use crate::verifier::fan_out;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCategory {
    Known,
    Novel,
    Corrupt,
}

impl EvalCategory {
    pub const ALL: [EvalCategory; 3] = [
        EvalCategory::Known,
        EvalCategory::Novel,
        EvalCategory::Corrupt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalCategory::Known => "known",
            EvalCategory::Novel => "novel",
            EvalCategory::Corrupt => "corrupt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiveWayCategory {
    NovelDirect,
    NovelAdjacent,
    CorruptDirect,
    CorruptAdjacent,
    Unrelated,
}

impl FiveWayCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FiveWayCategory::NovelDirect => "novel_direct",
            FiveWayCategory::NovelAdjacent => "novel_adjacent",
            FiveWayCategory::CorruptDirect => "corrupt_direct",
            FiveWayCategory::CorruptAdjacent => "corrupt_adjacent",
            FiveWayCategory::Unrelated => "unrelated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveWayItem {
    pub question: String,
    pub expected_keyphrases: Vec<String>,
    pub category: FiveWayCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub category: EvalCategory,
    pub text: String,
    pub paraphrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Metadata>,
    #[serde(default)]
    pub five_way: Vec<FiveWayItem>,
}

pub fn read_eval_jsonl<R: BufRead>(input: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("eval corpus line {}: {e}", i + 1)))?;
        if let Some(item) = rec
            .five_way
            .iter()
            .find(|f| f.expected_keyphrases.is_empty())
        {
            return Err(Error::Config(format!(
                "eval record {}: question {:?} has no expected keyphrases",
                rec.id, item.question
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub passage_ref: String,
    pub ppl_original: f64,
    pub ppl_paraphrase: f64,
    pub gap: f64,
}

pub fn text_perplexity(backend: &dyn Backend, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    perplexity(&backend.score(text)?.surprisals())
}

/// `PPL(paraphrase) / PPL(original)`.
pub fn perturbation_gap(
    backend: &dyn Backend,
    passage_ref: impl Into<String>,
    original: &str,
    paraphrase: &str,
) -> Result<PerturbationResult> {
    let ppl_original = text_perplexity(backend, original)?;
    let ppl_paraphrase = text_perplexity(backend, paraphrase)?;
    Ok(PerturbationResult {
        passage_ref: passage_ref.into(),
        ppl_original,
        ppl_paraphrase,
        gap: ppl_paraphrase / ppl_original,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveWayOutcome {
    pub question: String,
    pub category: FiveWayCategory,
    pub correct: bool,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ungraded {
    pub question: String,
    pub category: FiveWayCategory,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub graded: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FiveWayReport {
    pub per_category: BTreeMap<FiveWayCategory, Accuracy>,
    pub items: Vec<FiveWayOutcome>,
    pub ungraded: Vec<Ungraded>,
}

pub fn keyphrase_match(response: &str, keyphrases: &[String]) -> bool {
    let response = response.to_lowercase();
    keyphrases
        .iter()
        .any(|k| !k.trim().is_empty() && response.contains(&k.to_lowercase()))
}

/// Generates an answer for each item at temperature 0 and grades it by
/// case-insensitive keyphrase match. Failed generations are listed as
/// ungraded and left out of the accuracy.
pub fn score_five_way(
    backend: &dyn Backend,
    items: &[FiveWayItem],
    max_tokens: usize,
    workers: usize,
) -> Result<FiveWayReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput("five-way items"));
    }
    let responses = fan_out(items, workers, |item| {
        backend.generate(&item.question, 0.0, max_tokens)
    })?;
    let mut report = FiveWayReport::default();
    for (item, response) in items.iter().zip(responses) {
        match response {
            Ok(response) => {
                let correct = keyphrase_match(&response, &item.expected_keyphrases);
                let acc = report
                    .per_category
                    .entry(item.category)
                    .or_insert(Accuracy {
                        correct: 0,
                        graded: 0,
                        accuracy: 0.0,
                    });
                acc.graded += 1;
                acc.correct += usize::from(correct);
                report.items.push(FiveWayOutcome {
                    question: item.question.clone(),
                    category: item.category,
                    correct,
                    response,
                });
            }
            Err(e) => report.ungraded.push(Ungraded {
                question: item.question.clone(),
                category: item.category,
                reason: e.to_string(),
            }),
        }
    }
    for acc in report.per_category.values_mut() {
        acc.accuracy = acc.correct as f64 / acc.graded as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfExtinguish {
    pub mean_before: f64,
    pub mean_after: f64,
    pub threshold: f64,
    pub fraction: f64,
}

/// `(before - after) / (before - threshold)`. Overshoot and regression are
/// reported as is.
pub fn distance_covered(mean_before: f64, mean_after: f64, threshold: f64) -> Result<f64> {
    if !(mean_before > threshold) {
        return Err(Error::NotFlagged {
            before: mean_before,
            threshold,
        });
    }
    Ok((mean_before - mean_after) / (mean_before - threshold))
}

pub fn self_extinguish_values(
    before: &[f64],
    after: &[f64],
    threshold: f64,
) -> Result<SelfExtinguish> {
    if before.len() != after.len() {
        return Err(Error::DimensionMismatch {
            expected: before.len(),
            got: after.len(),
        });
    }
    let mean_before = mean(before).ok_or(Error::EmptyInput("passage surprisals"))?;
    let mean_after = mean(after).ok_or(Error::EmptyInput("passage surprisals"))?;
    Ok(SelfExtinguish {
        mean_before,
        mean_after,
        threshold,
        fraction: distance_covered(mean_before, mean_after, threshold)?,
    })
}

pub fn self_extinguish_report(
    before: &SurprisalProfile,
    after: &SurprisalProfile,
    threshold: f64,
) -> Result<SelfExtinguish> {
    self_extinguish_values(
        &before.passage_surprisals,
        &after.passage_surprisals,
        threshold,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: EvalCategory,
    pub n: usize,
    pub mean_ppl: f64,
    pub mean_ppl_paraphrase: f64,
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryMetrics>,
    pub perturbation: Vec<PerturbationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub five_way: Option<FiveWayReport>,
}

impl EvalReport {
    pub fn category(&self, c: EvalCategory) -> Option<&CategoryMetrics> {
        self.categories.iter().find(|m| m.category == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub answer_max_tokens: usize,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            answer_max_tokens: 64,
            workers: 4,
        }
    }
}

/// Perturbation gap for every record, summarised per category, plus
/// five-way accuracy over all attached questions.
pub fn evaluate(
    backend: &dyn Backend,
    records: &[EvalRecord],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let results = fan_out(records, options.workers, |r| {
        perturbation_gap(backend, r.id.clone(), &r.text, &r.paraphrase)
    })?;
    let perturbation = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut categories = Vec::new();
    for cat in EvalCategory::ALL {
        let rows: Vec<&PerturbationResult> = records
            .iter()
            .zip(&perturbation)
            .filter(|(r, _)| r.category == cat)
            .map(|(_, p)| p)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let avg = |f: fn(&PerturbationResult) -> f64| {
            rows.iter().map(|p| f(p)).sum::<f64>() / rows.len() as f64
        };
        categories.push(CategoryMetrics {
            category: cat,
            n: rows.len(),
            mean_ppl: avg(|p| p.ppl_original),
            mean_ppl_paraphrase: avg(|p| p.ppl_paraphrase),
            mean_gap: avg(|p| p.gap),
        });
    }
    let items: Vec<FiveWayItem> = records
        .iter()
        .flat_map(|r| r.five_way.iter().cloned())
        .collect();
    let five_way = if items.is_empty() {
        None
    } else {
        Some(score_five_way(
            backend,
            &items,
            options.answer_max_tokens,
            options.workers,
        )?)
    };
    Ok(EvalReport {
        categories,
        perturbation,
        five_way,
    })
}
