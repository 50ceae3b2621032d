use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cilab::cli::{self, ExperimentConfig, Verbosity, OUTPUT_ROOT_ENV};
use cilab::Result;

/// Class-incremental learning lab on synthetic Gaussian benchmarks.
///
/// Exit codes: 0 ok, 2 configuration, 3 protocol, 4 integrity/format,
/// 5 I/O, 6 numeric/parameter.
#[derive(Parser)]
#[command(name = "cilab", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to a name derived from the config under the
    /// output root.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Replace the data, split and training seeds with this value.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
    /// Root for run directories that are not given explicitly.
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "cilab-runs", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset of the config into the run directory.
    GenData,
    /// Train every stage of the configured learner.
    Run,
    /// Retrain classifiers and emit CSV/JSON reports for a finished run.
    Analyze,
    /// Tabulate analyzed runs side by side.
    Compare {
        /// Analyzed run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let cfg = match cli.seed_override {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.run_dir.clone().unwrap_or_else(|| {
        let name = format!("{}-seed{}-{}", cfg.algorithm.name, cfg.schedule.seed, &cfg.hash()[..12]);
        Path::new(&cli.output_root).join(name)
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let v = Verbosity { quiet: cli.quiet };
    match &cli.command {
        Command::GenData => {
            let cfg = config(cli)?;
            let path = cli::gen_data(&cfg, &run_dir(cli, &cfg), v)?;
            println!("{}", path.display());
        }
        Command::Run => {
            let cfg = config(cli)?;
            let dir = run_dir(cli, &cfg);
            cli::run(&cfg, &dir, v)?;
            println!("{}", dir.display());
        }
        Command::Analyze => {
            // Without --config the run's own echoed config is used.
            let cfg = match (&cli.config, cli.seed_override) {
                (None, None) => None,
                _ => Some(config(cli)?),
            };
            let dir = match (&cli.run_dir, &cfg) {
                (Some(d), _) => d.clone(),
                (None, Some(c)) => run_dir(cli, c),
                (None, None) => run_dir(cli, &ExperimentConfig::default()),
            };
            let s = cli::analyze(&dir, cfg.as_ref(), v)?;
            println!(
                "{}: Acc(M'0,D) {:.1}  Acc(M'N,D) {:.1}  dM'N {:+.1}  Avg.Inc.Acc. {:.1}  Acc(MN,D) {:.1}",
                s.algorithm, s.acc_first, s.acc_last, s.delta_last, s.avg_inc_acc, s.final_acc
            );
        }
        Command::Compare { runs } => {
            print!("{}", cli::compare(runs)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cilab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
