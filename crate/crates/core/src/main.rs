use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use heatcast::harness::{self, DataSource, ExperimentConfig, ExplainMethod};
use heatcast::synth::{generate_dataset, write_dataset, GeneratorConfig};
use heatcast::{io, Error, Result};

#[derive(Parser)]
#[command(name = "heatcast", version, about = "Probabilistic heatwave prediction experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit every configured model and write checkpoints, tables and the manifest.
    Train(RunArgs),
    /// Penalty sweep only, for models with an epsilon grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to one model label.
        #[arg(long)]
        model: Option<String>,
    },
    /// Recompute test skills from stored checkpoints.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<String>,
    },
    /// Interpretability products for stored checkpoints.
    Explain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: ExplainMethod,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rewrite the skill table and summary from a manifest.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    // Relative data paths are taken from the config's directory.
    if let DataSource::Path(p) = &mut cfg.data {
        if p.is_relative() {
            if let Some(base) = args.config.parent() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}

fn print_summary(out: &Path) {
    if let Ok(text) = std::fs::read_to_string(out.join("summary.txt")) {
        print!("{text}");
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let mut cfg: GeneratorConfig = match config {
                Some(p) => io::read_json(&p)?,
                None => GeneratorConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let ds = generate_dataset(&cfg)?;
            write_dataset(&out, &cfg, &ds)?;
            println!(
                "wrote {} years on a {}x{} grid to {}",
                cfg.n_years,
                cfg.n_lat,
                cfg.n_lon,
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            harness::run_experiment(&cfg, &args.out)?;
            print_summary(&args.out);
        }
        Command::Sweep { run, model } => {
            let mut cfg = load_config(&run)?;
            cfg.models
                .retain(|m| !m.epsilons.is_empty() && model.as_ref().is_none_or(|l| *l == m.label()));
            if cfg.models.is_empty() {
                return Err(Error::Config("no model with an epsilon grid matches".into()));
            }
            cfg.explain = None;
            let out = harness::run_experiment(&cfg, &run.out)?;
            for m in &out.manifest.models {
                println!(
                    "{}: selected epsilon {}",
                    m.label,
                    m.selected_epsilon.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Eval { out, model } => {
            let rows = harness::evaluate_run(&out, model.as_deref())?;
            println!(
                "{:<16} {:>4} {:>10} {:>10} {:>10}  manifest",
                "model", "fold", "CRPSS", "NLLS", "BCES"
            );
            for r in rows {
                println!(
                    "{:<16} {:>4} {:>10.4} {:>10.4} {:>10.4}  {}",
                    r.label,
                    r.fold,
                    r.skills.crpss,
                    r.skills.nlls,
                    r.skills.bces,
                    if r.matches_manifest { "match" } else { "DIFFERS" }
                );
            }
        }
        Command::Explain {
            out,
            method,
            model,
            fold,
            seed,
        } => {
            let written = harness::explain_run(&out, method, model.as_deref(), fold, seed)?;
            println!("{}: wrote {} files", method.as_str(), written.len());
        }
        Command::Report { out } => {
            let (_, manifest) = harness::load_run(&out)?;
            let outcome = harness::report(&manifest, &out)?;
            print_summary(&out);
            for m in &outcome.missing {
                eprintln!("missing artifact: {m}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.workers };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
