use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dsam_core::error::DsamError;
use dsam_core::experiment::{self, EvalMode, Experiment, ExperimentConfig, Overrides};
use dsam_core::model::NetworkKind;

#[derive(Parser)]
#[command(name = "dsam", version, about = "Train and evaluate domain-specific aggregation modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network per (target, repetition) sub-run.
    Train(ExperimentArgs),
    /// Score checkpoints on their held-out domain.
    Eval(ExistingArgs),
    /// Dump unit-norm backbone and module features.
    Features(ExistingArgs),
    /// Linear SVM probes on dumped features.
    Probe(ExistingArgs),
    /// Rebuild the CSV/JSON reports and the summary table.
    Report(ExistingArgs),
    /// train, eval, features, probe and report in sequence.
    Run(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dsam,
    DeepAll,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Network to train.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Held-out domain, or `rotate-all`.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, alias = "run-dir")]
    output: Option<PathBuf>,
    /// Comma-separated eval modes (end-to-end, probe-theta, probe-lambda, probe-theta-lambda).
    #[arg(long, value_delimiter = ',')]
    eval: Option<Vec<String>>,
}

#[derive(Args)]
struct ExistingArgs {
    /// Run directory written by `train`.
    #[arg(long, required_unless_present = "config")]
    run_dir: Option<PathBuf>,
    /// Alternatively, the experiment TOML whose `output_dir` is the run directory.
    #[arg(long, conflicts_with = "run_dir")]
    config: Option<PathBuf>,
    /// Also write the summary table to this file (`report` only).
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ExperimentArgs {
    fn experiment(&self) -> Result<Experiment> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        let eval = match &self.eval {
            Some(v) => Some(v.iter().map(|s| s.parse::<EvalMode>()).collect::<Result<Vec<_>, _>>()?),
            None => None,
        };
        cfg.apply(&Overrides {
            mode: self.mode.map(|m| match m {
                Mode::Dsam => NetworkKind::Dsam,
                Mode::DeepAll => NetworkKind::DeepAll,
            }),
            target: self.target.clone(),
            seed: self.seed,
            repetitions: self.repetitions,
            epochs: self.epochs,
            base_lr: self.base_lr,
            output_dir: self.output.clone(),
            eval,
        });
        Ok(Experiment::from_config(cfg)?)
    }
}

impl ExistingArgs {
    fn experiment(&self) -> Result<Experiment> {
        let dir = match (&self.run_dir, &self.config) {
            (Some(d), _) => d.clone(),
            (None, Some(c)) => ExperimentConfig::load(c)?.output_dir,
            (None, None) => bail!(DsamError::config("run_dir", "pass --run-dir or --config")),
        };
        Ok(Experiment::open(&dir)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let exp = a.experiment()?;
            for s in experiment::cmd_train(&exp)? {
                let note = if s.skipped { " (existing checkpoint)" } else { "" };
                println!(
                    "{} rep{}: best epoch {} val {:.2}{note}",
                    s.target, s.repetition, s.best_epoch, s.best_val_accuracy
                );
            }
            println!("run directory: {}", exp.dir.display());
        }
        Command::Eval(a) => {
            let report = experiment::cmd_eval(&a.experiment()?)?;
            print!("{}", dsam_core::evaluation::EvalReport::render_table(&[report]));
        }
        Command::Features(a) => {
            for p in experiment::cmd_features(&a.experiment()?)? {
                println!("{}", p.display());
            }
        }
        Command::Probe(a) => {
            let reports = experiment::cmd_probe(&a.experiment()?)?;
            print!("{}", dsam_core::evaluation::EvalReport::render_table(&reports));
        }
        Command::Report(a) => {
            let table = experiment::cmd_report(&a.experiment()?)?;
            if let Some(out) = &a.output {
                std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{table}");
        }
        Command::Run(a) => {
            print!("{}", experiment::cmd_run(&a.experiment()?)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DsamError>() {
        Some(e) if e.is_config_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
