use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use atc_core::data::{generate, load_corpus, save_corpus, CorpusSpec, Split};
use atc_core::pipeline::{
    corpus_for, evaluate, read_metrics, run_pseudo_labeling, run_seeding, run_to_dir, write_metrics, Checkpoint,
    EvalResult, Mode, PipelineError, RunConfig, Schedule, ThresholdSource, Which,
};

/// Pseudo-labeling experiments with alternative temporal classification.
///
/// Log verbosity is read from `ATC_LOG` (e.g. `ATC_LOG=debug`).
#[derive(Parser)]
#[command(name = "atc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into --out.
    GenData {
        /// TOML file with a corpus spec; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Domain shift applied to the unlabeled, dev and test splits.
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Seed a model and run pseudo-labeling.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Corpus directory written by gen-data; generated from the config otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Evaluate student and teacher of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pseudo-labeling once per threshold setting from a shared seed model.
    SweepThreshold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated thresholds; `auto` selects automatic thresholding.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,auto")]
        thresholds: Vec<ThresholdSource>,
    },
    /// Export the metric curves of a run directory as CSV and JSON.
    ExportCurves {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only rows of this split (e.g. dev).
        #[arg(long)]
        split: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    threshold: Option<ThresholdSource>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Pseudo-labeling updates.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Dev,
    Test,
    SourceDev,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Labeled => Split::Labeled,
            SplitArg::Unlabeled => Split::Unlabeled,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
            SplitArg::SourceDev => Split::SourceDev,
        }
    }
}

/// Usage, config and IO problems exit with 2; divergence with 1.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let diverged = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Diverged { .. })));
        Failure {
            code: if diverged { 1 } else { 2 },
            error,
        }
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.run.mode = mode;
    }
    if let Some(t) = args.threshold {
        cfg.pseudo_label.threshold = t;
    }
    if let Some(eta) = args.eta {
        cfg.pseudo_label.eta = eta;
    }
    if let Some(psi) = args.psi {
        cfg.pseudo_label.psi = psi;
    }
    if let Some(gamma) = args.gamma {
        cfg.seeding.gamma = gamma;
    }
    if let Some(lambda) = args.lambda {
        cfg.run.lambda = lambda;
    }
    if let Some(schedule) = args.schedule {
        cfg.pseudo_label.schedule = schedule;
    }
    if let Some(budget) = args.budget {
        cfg.pseudo_label.updates = budget;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn corpus_from(path: Option<&Path>, cfg: &RunConfig) -> Result<atc_core::data::Corpus> {
    match path {
        Some(dir) => {
            let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            if corpus.feature_dim != cfg.model.feature_dim || corpus.vocab != cfg.model.vocab {
                bail!(
                    "corpus has feature_dim={} vocab={}, config expects {} / {}",
                    corpus.feature_dim,
                    corpus.vocab,
                    cfg.model.feature_dim,
                    cfg.model.vocab
                );
            }
            Ok(corpus)
        }
        None => Ok(corpus_for(cfg)?),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct EvalRow<'a> {
    which: &'a str,
    split: &'a str,
    token_error_rate: f64,
    auc: Option<f64>,
    mean_conf_correct: Option<f64>,
    mean_conf_incorrect: Option<f64>,
}

impl<'a> EvalRow<'a> {
    fn new(which: &'a str, split: &'a str, r: &EvalResult) -> Self {
        Self {
            which,
            split,
            token_error_rate: r.token_error_rate,
            auc: r.auc,
            mean_conf_correct: r.mean_conf_correct,
            mean_conf_incorrect: r.mean_conf_incorrect,
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    threshold: String,
    token_error_rate: f64,
    auc: Option<f64>,
    mean_conf_incorrect: Option<f64>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            shift,
        } => {
            let mut spec = match config {
                Some(path) => {
                    let text =
                        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<CorpusSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => CorpusSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if let Some(shift) = shift {
                spec.shift = shift;
            }
            let corpus = generate(&spec).context("generating corpus")?;
            save_corpus(&corpus, &out).with_context(|| format!("writing corpus to {}", out.display()))?;
            fs::write(out.join("spec.toml"), toml::to_string(&spec).context("serializing spec")?)
                .context("writing spec.toml")?;
            info!("wrote corpus to {}", out.display());
        }
        Command::Train { run, corpus } => {
            let cfg = resolve_config(&run)?;
            let corpus = corpus_from(corpus.as_deref(), &cfg)?;
            let summary = run_to_dir(&cfg, &corpus, &run.out).map_err(anyhow::Error::from)?;
            println!(
                "{} seed={} test TER {:.4} (seed model {:.4}) AUC {}",
                summary.mode.name(),
                summary.seed,
                summary.final_test.token_error_rate,
                summary.seed_test.token_error_rate,
                summary.final_test.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
            );
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint).map_err(anyhow::Error::from)?;
            let corpus = load_corpus(&corpus).with_context(|| format!("loading corpus {}", corpus.display()))?;
            let split = Split::from(split);
            let utts = corpus.split(split);
            let student = evaluate(&ck.state, utts, Which::Student).map_err(anyhow::Error::from)?;
            let teacher = evaluate(&ck.state, utts, Which::Teacher).map_err(anyhow::Error::from)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = [
                EvalRow::new("student", split.name(), &student),
                EvalRow::new("teacher", split.name(), &teacher),
            ];
            let mut w = csv::Writer::from_path(out.join("eval.csv")).context("writing eval.csv")?;
            for r in &rows {
                w.serialize(r).context("writing eval.csv")?;
                println!(
                    "{} {} TER {:.4} AUC {}",
                    r.which,
                    r.split,
                    r.token_error_rate,
                    r.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            w.flush().context("writing eval.csv")?;
        }
        Command::SweepThreshold {
            run,
            corpus,
            thresholds,
        } => {
            let mut cfg = resolve_config(&run)?;
            cfg.run.mode = Mode::Apl;
            let corpus = corpus_from(corpus.as_deref(), &cfg)?;
            fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
            fs::write(run.out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
            let (seeded, _) = run_seeding(&cfg, &corpus).map_err(anyhow::Error::from)?;
            let mut rows = Vec::new();
            for t in thresholds {
                let mut c = cfg.clone();
                c.pseudo_label.threshold = t;
                let dir = run.out.join(format!("threshold-{t}"));
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("config.toml"), c.to_toml()).context("writing config.toml")?;
                let outcome = run_pseudo_labeling(&c, seeded.clone(), &corpus, None).map_err(anyhow::Error::from)?;
                write_metrics(&dir.join("metrics.csv"), &outcome.rows).map_err(anyhow::Error::from)?;
                println!("threshold {t}: test TER {:.4}", outcome.test.token_error_rate);
                rows.push(SweepRow {
                    threshold: t.to_string(),
                    token_error_rate: outcome.test.token_error_rate,
                    auc: outcome.test.auc,
                    mean_conf_incorrect: outcome.test.mean_conf_incorrect,
                });
            }
            let mut w = csv::Writer::from_path(run.out.join("sweep.csv")).context("writing sweep.csv")?;
            for r in &rows {
                w.serialize(r).context("writing sweep.csv")?;
            }
            w.flush().context("writing sweep.csv")?;
        }
        Command::ExportCurves { run, out, split } => {
            let mut rows = read_metrics(&run.join("metrics.csv")).map_err(anyhow::Error::from)?;
            if let Some(s) = split {
                rows.retain(|r| r.split == s);
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_metrics(&out.join("curves.csv"), &rows).map_err(anyhow::Error::from)?;
            write_json(&out.join("curves.json"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATC_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
