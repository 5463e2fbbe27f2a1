//! Plain-text rendering of a run report.

use std::fmt;

use crate::evalkit::{EvalCategory, EvalReport, FiveWayCategory};

use super::RunReport;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate().take(cols) {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(f, "{}", self.title)?;
        writeln!(f, "{}", line(&self.header))?;
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        writeln!(f, "{}", rule.join("  "))?;
        for row in &self.rows {
            writeln!(f, "{}", line(row))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderedReport {
    pub summary: Vec<String>,
    pub tables: Vec<Table>,
}

impl RenderedReport {
    pub fn table(&self, title: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.title == title)
    }
}

impl fmt::Display for RenderedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.summary {
            writeln!(f, "{line}")?;
        }
        for t in &self.tables {
            writeln!(f)?;
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

pub const GAP_TABLE: &str = "Perturbation gap";
pub const FIVE_WAY_TABLE: &str = "Five-way QA accuracy";
pub const PPL_TABLE: &str = "Perplexity";

fn num(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

fn pct_change(before: Option<f64>, after: Option<f64>) -> String {
    match (before, after) {
        (Some(b), Some(a)) if b != 0.0 => format!("{:+.1}%", 100.0 * (a - b) / b),
        _ => "-".into(),
    }
}

fn eval_categories(before: Option<&EvalReport>, after: Option<&EvalReport>) -> Vec<EvalCategory> {
    EvalCategory::ALL
        .into_iter()
        .filter(|c| {
            before.is_some_and(|r| r.category(*c).is_some())
                || after.is_some_and(|r| r.category(*c).is_some())
        })
        .collect()
}

pub fn render_report(report: &RunReport) -> RenderedReport {
    let mut out = RenderedReport::default();
    let arm = match report.arm {
        super::Arm::Lscp => "lscp",
        super::Arm::Normal => "normal",
    };
    out.summary.push(format!(
        "run: {} arm, backend {} ({}), {}",
        arm,
        report.backend.kind,
        report.backend.tokenizer_id,
        if report.complete {
            "complete"
        } else {
            "INCOMPLETE"
        }
    ));
    if let (Some(stage), Some(err)) = (&report.failed_stage, &report.error) {
        out.summary.push(format!("failed in {stage}: {err}"));
    }
    for w in &report.warnings {
        out.summary.push(format!("warning: {w}"));
    }
    if let Some(s1) = &report.stage1 {
        out.summary.push(format!(
            "stage 1: {} documents, {} passages, {} flagged (threshold {:.4} = {:.4} + {} x {:.4})",
            s1.documents,
            s1.passages,
            s1.flagged,
            s1.threshold,
            s1.reference.mu,
            s1.reference.lambda,
            s1.reference.sigma
        ));
    }
    if let Some(s2) = &report.stage2 {
        let hist: Vec<String> = s2
            .k_histogram
            .iter()
            .map(|(k, n)| format!("k={k}:{n}"))
            .collect();
        out.summary.push(format!(
            "stage 2: {} chains, {} skipped; {} items ({} qa, {} windows, {} strangeness); {}",
            s2.outcomes.len(),
            s2.skipped.len(),
            s2.composition.total,
            s2.composition.qa_pair,
            s2.composition.source_window,
            s2.composition.strangeness,
            if hist.is_empty() {
                "no chains".to_string()
            } else {
                hist.join(" ")
            }
        ));
    }
    if let Some(s3) = &report.stage3 {
        out.summary.push(format!(
            "stage 3: {} items, {} epochs, {} steps, mean final loss {}",
            s3.items,
            s3.training.epochs,
            s3.training.steps.len(),
            num(s3.training.mean_final_loss(), 4)
        ));
    }
    let Some(eval) = &report.eval else {
        return out;
    };
    if let Some(t) = &eval.target {
        let mut line = format!(
            "target passages: {}, mean S {:.4} -> {}, PPL {:.4} -> {} ({})",
            t.passages,
            t.mean_surprisal_before,
            num(t.mean_surprisal_after, 4),
            t.ppl_before,
            num(t.ppl_after, 4),
            pct_change(Some(t.ppl_before), t.ppl_after)
        );
        if let Some(se) = &t.self_extinguish {
            line.push_str(&format!(", distance covered {:.3}", se.fraction));
        }
        out.summary.push(line);
    }

    let before = eval.before.as_ref();
    let after = eval.after.as_ref();
    let cats = eval_categories(before, after);
    if !cats.is_empty() {
        let metric = |r: Option<&EvalReport>,
                      c: EvalCategory,
                      f: fn(&crate::evalkit::CategoryMetrics) -> f64| {
            r.and_then(|r| r.category(c)).map(f)
        };
        out.tables.push(Table {
            title: GAP_TABLE.into(),
            header: ["category", "n", "gap before", "gap after"]
                .map(String::from)
                .to_vec(),
            rows: cats
                .iter()
                .map(|&c| {
                    let n = before
                        .or(after)
                        .and_then(|r| r.category(c))
                        .map_or(0, |m| m.n);
                    vec![
                        c.as_str().to_string(),
                        n.to_string(),
                        num(metric(before, c, |m| m.mean_gap), 3),
                        num(metric(after, c, |m| m.mean_gap), 3),
                    ]
                })
                .collect(),
        });
        out.tables.push(Table {
            title: PPL_TABLE.into(),
            header: ["category", "ppl before", "ppl after", "change"]
                .map(String::from)
                .to_vec(),
            rows: cats
                .iter()
                .map(|&c| {
                    let b = metric(before, c, |m| m.mean_ppl);
                    let a = metric(after, c, |m| m.mean_ppl);
                    vec![
                        c.as_str().to_string(),
                        num(b, 3),
                        num(a, 3),
                        pct_change(b, a),
                    ]
                })
                .collect(),
        });
    }

    let five = |r: Option<&EvalReport>, c: FiveWayCategory| {
        r.and_then(|r| r.five_way.as_ref())
            .and_then(|f| f.per_category.get(&c))
            .map(|a| a.accuracy * 100.0)
    };
    let five_cats: Vec<FiveWayCategory> = [
        FiveWayCategory::NovelDirect,
        FiveWayCategory::NovelAdjacent,
        FiveWayCategory::CorruptDirect,
        FiveWayCategory::CorruptAdjacent,
        FiveWayCategory::Unrelated,
    ]
    .into_iter()
    .filter(|c| five(before, *c).is_some() || five(after, *c).is_some())
    .collect();
    if !five_cats.is_empty() {
        out.tables.push(Table {
            title: FIVE_WAY_TABLE.into(),
            header: ["category", "before %", "after %"]
                .map(String::from)
                .to_vec(),
            rows: five_cats
                .iter()
                .map(|&c| {
                    vec![
                        c.as_str().to_string(),
                        num(five(before, c), 1),
                        num(five(after, c), 1),
                    ]
                })
                .collect(),
        });
    }
    out
}
