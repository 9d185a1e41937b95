use clap::{Parser, Subcommand};
use crowdlearn::diagnostics::{theorem1_oracle, OracleOptions};
use crowdlearn::experiment::{compare, make_dataset, run_experiment, ExperimentConfig, Overrides};
use crowdlearn::noise::{NoiseKind, NoiseSpec};
use crowdlearn::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crowdlearn", version, about = "Learn ground truth from multiple noisy annotators")]
struct Cli {
    /// Only print results and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a run directory.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build and serialize the configured dataset.
    MakeDataset {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Check confusion recovery under a confident classifier.
    Theorem1 {
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value = "pairflip", value_parser = parse_kind)]
        noise: NoiseKind,
        #[arg(long, default_value_t = 0.45)]
        rate: f64,
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the final metrics of completed runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<NoiseKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown noise kind `{s}` (symmetric, pairflip, pairflip_permuted, asymmetric)")
    })
}

fn load(args: &ConfigArgs, epochs: Option<usize>) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config.apply(&Overrides { seed: args.seed, epochs, out: args.out.clone() });
    config.validate()?;
    Ok(config)
}

fn write(path: &PathBuf, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.clone(), source })
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { args, epochs } => {
            let config = load(&args, epochs)?;
            let outcome = run_experiment(&config)?;
            let s = &outcome.summary;
            println!("{}", outcome.dir.display());
            println!(
                "final {} {:.4}, entropy {:.4}, best epoch {} ({:.4})",
                s.metric, s.final_test_metric, s.final_entropy, s.best_epoch, s.best_test_metric
            );
        }
        Command::MakeDataset { args } => {
            let config = load(&args, None)?;
            println!("{}", make_dataset(&config)?.display());
        }
        Command::Theorem1 { classes, noise, rate, samples, seed, out } => {
            let spec = NoiseSpec::new(noise, rate);
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config { key: "rate".into(), message: format!("{rate} outside [0, 1)") });
            }
            if samples == 0 {
                return Err(Error::Config { key: "samples".into(), message: "must be positive".into() });
            }
            let truth = spec.build(classes, seed).map_err(|e| Error::Config { key: "classes".into(), message: e.to_string() })?;
            let report = theorem1_oracle(&truth, samples, seed, OracleOptions::default())?;
            let json = report.to_json();
            if let Some(path) = out {
                write(&path, &json)?;
            }
            println!("{json}");
        }
        Command::Compare { runs, out } => {
            let table = compare(&runs)?;
            if let Some(path) = out {
                write(&path, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
