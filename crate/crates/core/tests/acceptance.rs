//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use lscp::evalkit::{self, EvalCategory};
use lscp::gatedopt::{self, AdamWConfig, GateSchedule, OptimizerState, TrainingConfig};
use lscp::grounding::PassageRef;
use lscp::modelhub::{ScriptedBackend, ToyModel, ToyModelConfig};
use lscp::pipeline::{Pipeline, Reference, RunInputs, RunReport};
use lscp::verifier::{
    run_break_policy, CheckResult, PromptTemplates, QaPair, QaTag, TrainItem, TrainItemKind,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ac1_beta2_table() -> Result<String, String> {
    let s = GateSchedule::new(0.9, 0.1).map_err(|e| e.to_string())?;
    let mut got = Vec::new();
    for (k, want) in [(3, 0.728), (7, 0.478), (13, 0.254)] {
        let b = s.beta2_for(k);
        ensure((b - want).abs() <= 1e-3, format!("k={k}: {b} vs {want}"))?;
        got.push(format!("k={k}:{b:.4}"));
    }
    for r in [0.5, 0.9, 0.98, 1.0] {
        let b = GateSchedule::new(r, 0.1)
            .map_err(|e| e.to_string())?
            .beta2_for(0);
        ensure(b == 0.999, format!("r={r}, k=0 gave {b}"))?;
    }
    Ok(got.join(" "))
}

/// Reference AdamW, written out separately from the library.
fn reference_adamw(
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    t: i32,
    (lr, b1, b2, eps, wd): (f64, f64, f64, f64, f64),
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        let decayed = p[i] - lr * wd * p[i];
        p[i] = decayed - lr * mh / (vh.sqrt() + eps);
    }
}

fn ac2_adamw_equivalence() -> Result<String, String> {
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = AdamWConfig {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut state = OptimizerState::new(n, cfg).map_err(|e| e.to_string())?;
    let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = p.clone();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        state
            .apply_step(&mut p, &g, 0.999)
            .map_err(|e| e.to_string())?;
        reference_adamw(
            &mut q,
            &mut m,
            &mut v,
            &g,
            t,
            (1e-3, 0.9, 0.999, 1e-8, 0.01),
        );
        for (a, b) in p.iter().zip(&q) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-6, format!("max relative error {worst:.3e}"))?;
    Ok(format!("1000 steps, max relative error {worst:.2e}"))
}

fn ac3_gradient_check() -> Result<String, String> {
    let config = ToyModelConfig {
        vocab_size: 32,
        context_length: 16,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        seed: 3,
    };
    let mut model = ToyModel::new(config).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Perturb away from the structured init so every tensor carries signal.
    for p in model.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let ids: Vec<u32> = (0..12).map(|_| rng.random_range(1..32)).collect();
    let (_, grad) = model.loss_and_grad(&ids).map_err(|e| e.to_string())?;
    let ranges: Vec<_> = model.tensors().iter().map(|t| t.range()).collect();
    let mut coords = Vec::new();
    for r in &ranges {
        for _ in 0..3 {
            coords.push(rng.random_range(r.clone()));
        }
    }
    while coords.len() < 64 {
        coords.push(rng.random_range(0..model.param_count()));
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = model.loss_ids(&ids).map_err(|e| e.to_string())?;
        model.params_mut()[i] = orig - h;
        let down = model.loss_ids(&ids).map_err(|e| e.to_string())?;
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - grad[i]).abs();
        let scale = numeric.abs().max(grad[i].abs());
        // Coordinates whose gradient is at rounding level are compared absolutely.
        let rel = if scale < 1e-7 {
            err / 1e-7 * 1e-5
        } else {
            err / scale
        };
        ensure(
            rel <= 1e-4,
            format!(
                "coordinate {i}: analytic {:.6e}, numeric {numeric:.6e}",
                grad[i]
            ),
        )?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "{} coordinates over {} tensors, max rel error {worst:.2e}",
        coords.len(),
        ranges.len()
    ))
}

fn ac4_break_policy_oracle() -> Result<String, String> {
    let templates = PromptTemplates::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tags = [QaTag::Existing, QaTag::Mechanism, QaTag::Implication];
    for case in 0..10_000 {
        let len = rng.random_range(0..=12);
        let seq: Vec<(QaTag, bool)> = (0..len)
            .map(|_| (tags[rng.random_range(0..3)], rng.random_bool(0.7)))
            .collect();

        let mut k = 0u32;
        let mut completed = true;
        let mut consumed = 0;
        for &(tag, pass) in &seq {
            consumed += 1;
            if pass {
                k += 1;
            } else if tag != QaTag::Existing {
                completed = false;
                break;
            }
        }

        let steps = seq.iter().enumerate().map(|(i, &(tag, pass))| {
            let pair = QaPair {
                question: format!("q{i}"),
                answer: format!("a{i}"),
                tag,
                position: i,
            };
            let check = if pass {
                CheckResult::pass()
            } else {
                CheckResult::fail("r")
            };
            (pair, check)
        });
        let out = run_break_policy(PassageRef::new("d", case), len, steps, &templates);
        ensure(
            out.k == k && out.completed == completed && out.verdicts.len() == consumed,
            format!(
                "case {case}: got k={} completed={} consumed={}, want {k} {completed} {consumed}",
                out.k,
                out.completed,
                out.verdicts.len()
            ),
        )?;
        ensure(
            out.strangeness.as_ref().map(|s| s.k_at_break) == (!completed).then_some(k),
            format!("case {case}: strangeness record disagrees with the break"),
        )?;
    }
    Ok("10000 sequences agree".into())
}

fn run_fixture(out: &std::path::Path) -> Result<serde_json::Value, String> {
    let dir = fixtures_dir().join("scripted");
    let status = Command::new(env!("CARGO_BIN_EXE_lscp"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("run")
        .arg("--corpus")
        .arg(dir.join("docs.jsonl"))
        .arg("--reference")
        .arg(dir.join("reference.jsonl"))
        .arg("--eval")
        .arg(dir.join("eval.jsonl"))
        .arg("--seed")
        .arg("11")
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        status.status.success(),
        format!("run exited with {}", status.status),
    )?;
    let text = std::fs::read_to_string(out).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v.as_object_mut()
        .ok_or("report is not an object")?
        .remove("timing");
    Ok(v)
}

fn ac5_determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_fixture(&tmp.path().join("a.json"))?;
    let b = run_fixture(&tmp.path().join("b.json"))?;
    let (a, b) = (
        serde_json::to_vec_pretty(&a).unwrap(),
        serde_json::to_vec_pretty(&b).unwrap(),
    );
    ensure(a == b, "reports differ")?;
    Ok(format!("two runs, {} identical bytes", a.len()))
}

struct ToyWorld {
    pretrained: ToyModel,
    facts: Vec<NovelFact>,
    reference: Vec<lscp::pipeline::Document>,
}

fn world() -> &'static ToyWorld {
    static WORLD: OnceLock<ToyWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let (pretrained, _) = pretrained_toy(1, 300, 6);
        ToyWorld {
            pretrained,
            facts: novel_facts(100, 20),
            reference: documents("ref", known_sentences(200, 60)),
        }
    })
}

fn toy_inputs(w: &ToyWorld) -> RunInputs {
    RunInputs {
        documents: documents("novel", w.facts.iter().map(|f| f.passage())),
        reference: Reference::Documents(w.reference.clone()),
        eval: novel_eval_records(&w.facts[..10]),
    }
}

fn toy_run(normal_epochs: Option<usize>) -> Result<RunReport, String> {
    let w = world();
    let backend = ToyWithScript {
        toy: w.pretrained.clone(),
        script: chain_script(&w.facts),
    };
    let mut config = toy_pipeline_config(5);
    if let Some(e) = normal_epochs {
        config.epochs = e;
    }
    let mut p = Pipeline::with_backend(config, Box::new(backend)).map_err(|e| e.to_string())?;
    let inputs = toy_inputs(w);
    let report = match normal_epochs {
        Some(_) => p.run_normal_baseline(&inputs),
        None => p.run(&inputs),
    }
    .map_err(|e| e.to_string())?;
    ensure(
        report.complete,
        format!("run incomplete: {:?}", report.error),
    )?;
    Ok(report)
}

fn lscp_toy_run() -> Result<&'static RunReport, String> {
    static RUN: OnceLock<Result<RunReport, String>> = OnceLock::new();
    RUN.get_or_init(|| toy_run(None))
        .as_ref()
        .map_err(Clone::clone)
}

fn ac6_self_extinguish() -> Result<String, String> {
    let report = lscp_toy_run()?;
    let flagged = report.stage1.as_ref().map_or(0, |s| s.flagged);
    let target = report
        .eval
        .as_ref()
        .and_then(|e| e.target.as_ref())
        .ok_or("no target metrics")?;
    let se = target.self_extinguish.ok_or("no self-extinguish result")?;
    ensure(flagged == 20, format!("{flagged} of 20 passages flagged"))?;
    ensure(
        se.mean_after < se.mean_before,
        format!("mean S {:.4} -> {:.4}", se.mean_before, se.mean_after),
    )?;
    ensure(
        se.fraction > 0.3,
        format!("distance covered {:.3}", se.fraction),
    )?;
    Ok(format!(
        "{flagged} passages, mean S {:.3} -> {:.3} (threshold {:.3}), distance covered {:.3}",
        se.mean_before, se.mean_after, se.threshold, se.fraction
    ))
}

fn gate_items(facts: &[NovelFact]) -> Vec<TrainItem> {
    let mut items = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let k = 5 + (i % 4) as u32;
        let texts = [
            f.passage(),
            format!(
                "Q: what does the {} eat?\nA: the {} eats {}.",
                f.animal, f.animal, f.food
            ),
            format!(
                "Q: where is the {} found?\nA: near the {}.",
                f.animal, f.place
            ),
        ];
        for (j, text) in texts.into_iter().enumerate() {
            items.push(TrainItem {
                id: format!("g{i}/{j}"),
                kind: if j == 0 {
                    TrainItemKind::SourceWindow
                } else {
                    TrainItemKind::QaPair
                },
                text,
                conviction_k: k,
                passage_ref: None,
                importance: 1.0,
            });
        }
    }
    items
}

fn ac7_gate_effect() -> Result<String, String> {
    let w = world();
    let items = gate_items(&w.facts[..10]);
    let optimizer = AdamWConfig {
        lr: 1e-3,
        ..AdamWConfig::default()
    };
    let base = TrainingConfig {
        epochs: 2,
        steps_per_item: 1,
        seed: 7,
        shuffle: true,
        optimizer,
        schedule: GateSchedule::closed(),
    };
    // Saturate v on this corpus at the default beta2 first.
    let mut model = w.pretrained.clone();
    let mut state =
        OptimizerState::new(model.param_count(), optimizer).map_err(|e| e.to_string())?;
    gatedopt::train_corpus(&mut model, &mut state, &items, &base).map_err(|e| e.to_string())?;

    let mean_delta = |r: f64| -> Result<f64, String> {
        let mut m = model.clone();
        let mut s = state.clone();
        let cfg = TrainingConfig {
            epochs: 3,
            schedule: GateSchedule::new(r, 0.1).map_err(|e| e.to_string())?,
            ..base
        };
        let rep =
            gatedopt::train_corpus(&mut m, &mut s, &items, &cfg).map_err(|e| e.to_string())?;
        let d: Vec<f64> = rep.steps.iter().map(|t| t.mean_abs_delta).collect();
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    };
    let open = mean_delta(0.9)?;
    let closed = mean_delta(1.0)?;
    ensure(
        open > closed,
        format!("r=0.9 {open:.3e} vs r=1.0 {closed:.3e}"),
    )?;
    Ok(format!(
        "mean |dtheta| r=0.9 {open:.3e} > r=1.0 {closed:.3e} ({:.2}x)",
        open / closed
    ))
}

fn ac8_memorization_control() -> Result<String, String> {
    let lscp = lscp_toy_run()?;
    let lscp_steps = lscp
        .stage3
        .as_ref()
        .ok_or("lscp did not train")?
        .training
        .steps
        .len();
    let flagged = lscp.stage1.as_ref().map_or(0, |s| s.flagged);
    ensure(
        flagged > 0 && lscp_steps % flagged == 0,
        format!("{lscp_steps} steps over {flagged} passages"),
    )?;
    let normal = toy_run(Some(lscp_steps / flagged))?;
    let normal_steps = normal
        .stage3
        .as_ref()
        .ok_or("normal did not train")?
        .training
        .steps
        .len();
    ensure(
        normal_steps == lscp_steps,
        format!("step budgets {lscp_steps} vs {normal_steps}"),
    )?;

    let ppl = |r: &RunReport| -> Result<(f64, f64), String> {
        let t = r
            .eval
            .as_ref()
            .and_then(|e| e.target.as_ref())
            .ok_or("no target metrics")?;
        Ok((t.ppl_before, t.ppl_after.ok_or("no ppl after")?))
    };
    let gap = |r: &RunReport| -> Result<f64, String> {
        r.eval
            .as_ref()
            .and_then(|e| e.after.as_ref())
            .and_then(|a| a.category(EvalCategory::Novel))
            .map(|m| m.mean_gap)
            .ok_or_else(|| "no novel gap".to_string())
    };
    let ((bl, al), (bn, an)) = (ppl(lscp)?, ppl(&normal)?);
    let (dl, dn) = (bl - al, bn - an);
    let (gl, gn) = (gap(lscp)?, gap(&normal)?);
    ensure(dn > dl, format!("PPL drop normal {dn:.3} vs lscp {dl:.3}"))?;
    ensure(gl <= gn, format!("gap lscp {gl:.3} vs normal {gn:.3}"))?;
    Ok(format!(
        "{lscp_steps} steps each; PPL {bl:.1} -> normal {an:.3}, lscp {al:.3}; gap lscp {gl:.3} <= normal {gn:.3}"
    ))
}

fn ac9_metric_identities() -> Result<String, String> {
    let text = "the quick brown fox jumps over the lazy dog";
    let scripted = ScriptedBackend::default().with_uniform_vocab(50);
    let g = evalkit::perturbation_gap(&scripted, "a", text, text).map_err(|e| e.to_string())?;
    ensure(g.gap == 1.0, format!("scripted gap(A,A) = {}", g.gap))?;
    let ppl = evalkit::text_perplexity(&scripted, text).map_err(|e| e.to_string())?;
    ensure(
        (ppl - 50.0).abs() < 1e-9,
        format!("uniform PPL {ppl} vs 50"),
    )?;

    let mut toy = ToyModel::new(small_toy_config(9)).map_err(|e| e.to_string())?;
    let g = evalkit::perturbation_gap(&toy, "a", text, text).map_err(|e| e.to_string())?;
    ensure(g.gap == 1.0, format!("toy gap(A,A) = {}", g.gap))?;
    toy.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let ppl = evalkit::text_perplexity(&toy, text).map_err(|e| e.to_string())?;
    ensure(
        (ppl - 256.0).abs() < 1e-9,
        format!("zeroed toy PPL {ppl} vs 256"),
    )?;

    let f = evalkit::distance_covered(2.19, 1.77, 1.65).map_err(|e| e.to_string())?;
    ensure((f - 0.78).abs() <= 0.005, format!("distance covered {f}"))?;
    Ok(format!(
        "gap(A,A)=1, uniform PPL=V (50, 256), distance covered {f:.4}"
    ))
}

fn ac10_stage1_separation() -> Result<String, String> {
    let w = world();
    let p = Pipeline::with_backend(toy_pipeline_config(5), Box::new(w.pretrained.clone()))
        .map_err(|e| e.to_string())?;
    let stats = p.calibrate(&w.reference).map_err(|e| e.to_string())?;
    let known = documents("known", known_sentences(400, 20));
    let novel = documents("novel", novel_facts(500, 20).iter().map(|f| f.passage()));
    let flags = |docs: &[lscp::pipeline::Document]| -> Result<Vec<(f64, bool)>, String> {
        let out = p.detect(docs, &stats).map_err(|e| e.to_string())?;
        Ok(out
            .flags
            .iter()
            .flat_map(|d| d.flags.iter().map(|f| (f.surprisal, f.flagged)))
            .collect())
    };
    let k = flags(&known)?;
    let n = flags(&novel)?;
    let false_pos = k.iter().filter(|f| f.1).count();
    let hits = n.iter().filter(|f| f.1).count();
    let recall = hits as f64 / n.len() as f64;
    let max_known = k.iter().map(|f| f.0).fold(f64::MIN, f64::max);
    let min_novel = n.iter().map(|f| f.0).fold(f64::MAX, f64::min);
    ensure(
        false_pos == 0,
        format!(
            "{false_pos} known passages above threshold {:.3}",
            stats.threshold()
        ),
    )?;
    ensure(recall >= 0.9, format!("recall {recall:.2}"))?;
    Ok(format!(
        "threshold {:.3}; known max S {max_known:.3}, novel min S {min_novel:.3}; recall {hits}/{}",
        stats.threshold(),
        n.len()
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, &str, Check, Duration); 10] = [
        (
            "AC1",
            "beta2 schedule table",
            ac1_beta2_table,
            Duration::from_secs(1),
        ),
        (
            "AC2",
            "AdamW baseline equivalence",
            ac2_adamw_equivalence,
            Duration::from_secs(10),
        ),
        (
            "AC3",
            "toy gradient check",
            ac3_gradient_check,
            Duration::from_secs(60),
        ),
        (
            "AC4",
            "break policy oracle",
            ac4_break_policy_oracle,
            Duration::from_secs(5),
        ),
        (
            "AC5",
            "pipeline determinism",
            ac5_determinism,
            Duration::from_secs(30),
        ),
        (
            "AC6",
            "toy self-extinguishing",
            ac6_self_extinguish,
            Duration::from_secs(600),
        ),
        (
            "AC7",
            "gate effect",
            ac7_gate_effect,
            Duration::from_secs(300),
        ),
        (
            "AC8",
            "memorization control",
            ac8_memorization_control,
            Duration::from_secs(900),
        ),
        (
            "AC9",
            "metric identities",
            ac9_metric_identities,
            Duration::from_secs(1),
        ),
        (
            "AC10",
            "stage 1 separation",
            ac10_stage1_separation,
            Duration::from_secs(600),
        ),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC"))
        .collect();
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>())));
        let took = start.elapsed();
        let result = result.and_then(|detail| {
            if took > budget {
                Err(format!("{detail}; took {took:.1?}, budget {budget:?}"))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("{id:<4} PASS  {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("{id:<4} FAIL  {name}: {why} [{took:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
