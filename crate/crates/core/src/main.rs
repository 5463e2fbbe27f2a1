use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lscp::evalkit;
use lscp::grounding::GroundingStore;
use lscp::pipeline::{
    self, io, render_report, Pipeline, PipelineConfig, Reference, RunInputs, RunReport,
    Stage1Output,
};
use lscp::textstat::ReferenceStats;
use lscp::verifier::{self, TrainItem};
use lscp::Error;

#[derive(Parser, Debug)]
#[command(name = "lscp", version, about = "Learn by surprise, commit by proof")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set r=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ReferenceArgs {
    /// Reference documents (JSONL) to fit the surprisal threshold on.
    #[arg(long, conflicts_with = "stats")]
    reference: Option<PathBuf>,
    /// Previously fitted reference statistics (JSON).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Threshold multiplier; replaces the one in the config or stats file.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ArmArg {
    Lscp,
    Normal,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit reference statistics.
    Calibrate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score documents, flag surprising passages and build groundings.
    Detect {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        reference: ReferenceArgs,
        #[arg(long)]
        out: PathBuf,
        /// Grounding store (JSONL) to append flagged passages to.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Verify flagged passages and assemble the training corpus.
    Verify {
        /// Output of `detect`.
        #[arg(long)]
        input: PathBuf,
        /// Chain outcomes (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Training items (JSONL).
        #[arg(long)]
        corpus_out: PathBuf,
    },
    /// Train the toy model on a corpus of items.
    Train {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        allow_empty: bool,
        #[arg(long)]
        checkpoint_out: PathBuf,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Evaluate the backend on an eval corpus.
    Eval {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect, verify, train and evaluate in one pass.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        reference: ReferenceArgs,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "lscp")]
        arm: ArmArg,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Repeat verification and training for several values of r.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        reference: ReferenceArgs,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.9, 0.95, 0.98, 1.0])]
        r: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved run report as tables.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_STAGE: u8 = 2;
const EXIT_CAPABILITY: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Template(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        Error::MissingCapability { .. } | Error::LogprobsUnavailable(_) => EXIT_CAPABILITY,
        _ => EXIT_STAGE,
    }
}

fn load_config(cli: &Cli, extra: &[String]) -> lscp::Result<PipelineConfig> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut all = cli.overrides.clone();
    all.extend_from_slice(extra);
    base.with_overrides(&all)
}

fn lambda_override(lambda: Option<f64>) -> Vec<String> {
    lambda
        .map(|l| vec![format!("lambda={l}")])
        .unwrap_or_default()
}

fn reference_input(args: &ReferenceArgs) -> lscp::Result<Reference> {
    match (&args.reference, &args.stats) {
        (Some(path), None) => Ok(Reference::Documents(io::read_documents(path)?)),
        (None, Some(path)) => {
            let stats: ReferenceStats = io::read_json_file(path)?;
            Ok(Reference::Stats(match args.lambda {
                Some(l) => stats.with_lambda(l),
                None => stats,
            }))
        }
        _ => Err(Error::Config(
            "one of --reference or --stats is required".into(),
        )),
    }
}

fn read_eval(path: Option<&Path>) -> lscp::Result<Vec<evalkit::EvalRecord>> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            evalkit::read_eval_jsonl(std::io::BufReader::new(file))
        }
        None => Ok(Vec::new()),
    }
}

fn stats_for(p: &Pipeline, reference: &Reference) -> lscp::Result<ReferenceStats> {
    match reference {
        Reference::Documents(docs) => p.calibrate(docs),
        Reference::Stats(s) => Ok(*s),
    }
}

fn run(cli: Cli) -> lscp::Result<u8> {
    match &cli.command {
        Command::Calibrate {
            reference,
            lambda,
            out,
        } => {
            let config = load_config(&cli, &lambda_override(*lambda))?;
            let docs = io::read_documents(reference)?;
            let p = Pipeline::new(config)?;
            let stats = p.calibrate(&docs)?;
            io::write_json(out, &stats)?;
            println!(
                "mu {:.6} sigma {:.6} lambda {} threshold {:.6} over {} passages",
                stats.mu,
                stats.sigma,
                stats.lambda,
                stats.threshold(),
                stats.n_samples
            );
        }
        Command::Detect {
            corpus,
            reference,
            out,
            store,
        } => {
            let config = load_config(&cli, &lambda_override(reference.lambda))?;
            let docs = io::read_documents(corpus)?;
            let reference = reference_input(reference)?;
            let p = Pipeline::new(config)?;
            let stats = stats_for(&p, &reference)?;
            let stage1 = p.detect(&docs, &stats)?;
            if let Some(path) = store {
                let mut s = GroundingStore::open(path)?;
                p.store_groundings(&mut s, &stage1.groundings)?;
            }
            io::write_json(out, &stage1)?;
            println!(
                "threshold {:.6}; {} of {} passages flagged; {} groundings",
                stage1.threshold,
                stage1.flagged_count(),
                stage1
                    .profiles
                    .iter()
                    .map(|p| p.passage_count())
                    .sum::<usize>(),
                stage1.groundings.len()
            );
        }
        Command::Verify {
            input,
            out,
            corpus_out,
        } => {
            let config = load_config(&cli, &[])?;
            let text = std::fs::read_to_string(input)
                .map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
            let stage1: Stage1Output = serde_json::from_str(&text).map_err(|e| {
                Error::StageOrder(format!(
                    "{} is not detect output with flags: {e}",
                    input.display()
                ))
            })?;
            let p = Pipeline::new(config)?;
            if stage1.instance_id != p.backend().instance_id() {
                return Err(Error::StageOrder(format!(
                    "detect ran on {} but this backend is {}",
                    stage1.instance_id,
                    p.backend().instance_id()
                )));
            }
            let batch = p.verify(&stage1.groundings)?;
            let items = p.build_corpus(&batch.outcomes, &stage1.groundings);
            for s in &batch.skipped {
                eprintln!("skipped {}: {}", s.passage_ref, s.reason);
            }
            io::write_jsonl(out, &batch.outcomes)?;
            io::write_jsonl(corpus_out, &items)?;
            let c = verifier::composition(&items);
            println!(
                "{} chains, {} skipped; {} items ({} qa, {} windows, {} strangeness)",
                batch.outcomes.len(),
                batch.skipped.len(),
                c.total,
                c.qa_pair,
                c.source_window,
                c.strangeness
            );
        }
        Command::Train {
            items,
            seed,
            allow_empty,
            checkpoint_out,
            report_out,
        } => {
            let config = load_config(&cli, &[format!("seed={seed}")])?;
            let items: Vec<TrainItem> = io::read_jsonl_file(items)?;
            let mut p = Pipeline::new(config)?;
            p.require(&[lscp::modelhub::Capability::Train])?;
            if items.is_empty() {
                if !allow_empty {
                    return Err(Error::StageOrder(
                        "training corpus is empty (pass --allow-empty to accept)".into(),
                    ));
                }
                eprintln!("warning: training corpus is empty; saving the model unchanged");
                p.save_checkpoint(checkpoint_out)?;
                return Ok(0);
            }
            let report = p.train(&items)?;
            p.save_checkpoint(checkpoint_out)?;
            if let Some(path) = report_out {
                io::write_json(path, &report)?;
            }
            println!(
                "{} items, {} steps, mean final loss {:.6}",
                items.len(),
                report.steps.len(),
                report.mean_final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { eval, out } => {
            let config = load_config(&cli, &[])?;
            let records = read_eval(Some(eval))?;
            let p = Pipeline::new(config)?;
            let report = p.evaluate(&records)?;
            io::write_json(out, &report)?;
            for c in &report.categories {
                println!(
                    "{:<8} n={} ppl {:.4} gap {:.4}",
                    c.category.as_str(),
                    c.n,
                    c.mean_ppl,
                    c.mean_gap
                );
            }
        }
        Command::Run {
            corpus,
            reference,
            eval,
            out,
            seed,
            arm,
            store,
            checkpoint_out,
        } => {
            let mut extra = lambda_override(reference.lambda);
            extra.extend(seed.map(|s| format!("seed={s}")));
            let config = load_config(&cli, &extra)?;
            let inputs = RunInputs {
                documents: io::read_documents(corpus)?,
                reference: reference_input(reference)?,
                eval: read_eval(eval.as_deref())?,
            };
            let mut p = Pipeline::new(config)?;
            if let Some(path) = store {
                p = p.with_store(GroundingStore::open(path)?);
            }
            let report: RunReport = match arm {
                ArmArg::Lscp => p.run(&inputs)?,
                ArmArg::Normal => p.run_normal_baseline(&inputs)?,
            };
            if report.complete {
                if let Some(dir) = checkpoint_out {
                    p.save_checkpoint(dir)?;
                }
            }
            io::write_json(out, &report)?;
            print!("{}", render_report(&report));
            if !report.complete {
                return Ok(EXIT_STAGE);
            }
        }
        Command::Sweep {
            corpus,
            reference,
            eval,
            r,
            out,
        } => {
            let config = load_config(&cli, &lambda_override(reference.lambda))?;
            let inputs = RunInputs {
                documents: io::read_documents(corpus)?,
                reference: reference_input(reference)?,
                eval: read_eval(eval.as_deref())?,
            };
            let report = pipeline::sweep(&config, &inputs, r)?;
            io::write_json(out, &report)?;
            for e in &report.entries {
                println!(
                    "r={:<5} items {:>4}  mean final loss {}",
                    e.r,
                    e.composition.total,
                    e.mean_final_loss.map_or("-".into(), |l| format!("{l:.4}"))
                );
            }
        }
        Command::Report { input } => {
            let report: RunReport = io::read_json_file(input)?;
            print!("{}", render_report(&report));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
