use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use memloom::eval::{self, EvalReport};
use memloom::experiment::{self, PolicyKind, RunConfig};
use memloom::learners::{EvalMode, Variant};
use memloom::memory::{DiversityRule, EpisodicMemory};
use memloom::Error;

#[derive(Parser)]
#[command(name = "memloom", version, about = "Lifelong learning experiments with episodic memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the task stream and test sets into the output directory.
    Generate(Overrides),
    /// Train on a generated stream and save checkpoint, memory and manifest.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory holding data.json; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained run and write the report files.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory holding data.json; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tabulate finished runs. Each input is a run directory with
    /// metrics.json, or a config file to run first.
    Compare {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// enc-dec, replay, mbpa++, meta-mbpa or mtl.
    #[arg(long)]
    variant: Option<String>,
    /// random, diversity, uncertainty or forgettable.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    memory_rate: Option<f64>,
    /// i, ii, iii or iv.
    #[arg(long)]
    ordering: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: run].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop the second-order term of the meta gradient.
    #[arg(long)]
    first_order: bool,
    /// intuitive or literal.
    #[arg(long)]
    diversity_rule: Option<String>,
    /// Evaluate every variant without test-time adaptation.
    #[arg(long)]
    no_adapt_eval: bool,
}

impl Overrides {
    /// Flag > file > `base`.
    fn resolve(&self, base: RunConfig) -> memloom::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => base,
        };
        if let Some(v) = &self.variant {
            cfg.training.variant = v.parse::<Variant>()?;
        }
        if let Some(p) = &self.policy {
            cfg.policy.kind = Some(PolicyKind::parse(p)?);
        }
        if let Some(r) = self.memory_rate {
            cfg.policy.memory_rate = r;
        }
        if let Some(o) = &self.ordering {
            cfg.ordering = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.first_order {
            cfg.training.first_order = true;
        }
        if let Some(r) = &self.diversity_rule {
            cfg.policy.diversity_rule = match r.as_str() {
                "intuitive" => DiversityRule::Intuitive,
                "literal" => DiversityRule::Literal,
                other => return Err(Error::Config(format!("unknown diversity rule `{other}`"))),
            };
        }
        if self.no_adapt_eval {
            cfg.analysis.adapt_eval = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"))
}

fn generate(o: &Overrides) -> anyhow::Result<()> {
    let cfg = o.resolve(RunConfig::default())?;
    let dir = out_dir(&cfg);
    let data = experiment::generate(&cfg)?;
    let manifest = experiment::save_data(&cfg, &data, &dir)?;
    tracing::info!(dir = %dir.display(), examples = data.stream.len(), hash = %manifest.stream_hash, "stream written");
    Ok(())
}

fn train(o: &Overrides, data: Option<&Path>) -> anyhow::Result<()> {
    let cfg = o.resolve(RunConfig::default())?;
    let dir = out_dir(&cfg);
    let (data, _) = experiment::load_data(data.unwrap_or(&dir))?;
    let trained = experiment::train(&cfg, &data.stream)?;
    for step in &trained.log.replay_events {
        tracing::debug!(step, "replay");
    }
    let manifest = experiment::save_trained(&trained, &dir, None)?;
    tracing::info!(
        steps = trained.state.step,
        replays = trained.log.replay_events.len(),
        memory = manifest.memory_size,
        checkpoint = %manifest.checkpoint_sha256,
        "training finished"
    );
    Ok(())
}

fn evaluate(o: &Overrides, data: Option<&Path>) -> anyhow::Result<()> {
    // the trained run's own config is the base layer here
    let run_dir = o.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let saved = experiment::load_trained(&run_dir)?;
    let base: RunConfig = serde_json::from_value(saved.manifest.config.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = o.resolve(base)?;
    let dir = out_dir(&cfg);
    let (data, data_manifest) = experiment::load_data(data.unwrap_or(&run_dir))?;
    let mode = cfg.eval_mode();
    let memory = match saved.memory {
        Some(m) => m,
        None if mode == EvalMode::Direct => EpisodicMemory::new(),
        None => return Err(Error::MissingArtifact(run_dir.join(&saved.manifest.memory_snapshot)).into()),
    };
    let report = experiment::evaluate_model(
        &cfg,
        &saved.theta,
        &memory,
        &saved.keynet,
        &data.tests,
        &data_manifest.ordering,
        mode,
        saved.stages.as_deref(),
    )?;
    eval::write_reports(&dir, &report)?;
    tracing::info!(macro_average = report.macro_average, last_task = report.last_task_score, "evaluation finished");
    Ok(())
}

fn compare(o: &Overrides, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let threads = experiment::thread_budget();
    let results = experiment::parallel_map(inputs, threads, |path| -> anyhow::Result<EvalReport> {
        if path.is_dir() {
            let text = fs::read_to_string(path.join("metrics.json")).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text)?)
        } else {
            let cfg = RunConfig::load(path)?;
            cfg.validate()?;
            Ok(experiment::run(&cfg)?)
        }
    });
    let reports = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let rows = experiment::compare(&reports)?;
    let csv = experiment::compare_csv(&rows, &reports);
    match &o.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("compare.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Config(_) | Error::InfeasibleSuite(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(o) => generate(o),
        Command::Train { overrides, data } => train(overrides, data.as_deref()),
        Command::Eval { overrides, data } => evaluate(overrides, data.as_deref()),
        Command::Compare { overrides, inputs } => compare(overrides, inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
