use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adherence_fl::experiment::{cmd_generate, cmd_report, cmd_run, ExperimentConfig, Preset};
use adherence_fl::Error;

#[derive(Parser)]
#[command(
    version,
    about = "Federated dropout-prediction experiments on synthetic adherence data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic histories and a calibration report.
    Generate(Common),
    /// Run the settings-by-scenarios grid.
    Run {
        #[command(flatten)]
        common: Common,
        /// Number of grid cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-aggregate per-seed results and write plot data.
    Report {
        /// Grid directory (the `output_dir` of a run).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Paper)]
    preset: PresetArg,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl Common {
    fn load(&self) -> adherence_fl::Result<ExperimentConfig> {
        let preset = match self.preset {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        };
        let mut cfg = ExperimentConfig::load(preset, self.config.as_deref())?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> adherence_fl::Result<()> {
    match command {
        Command::Generate(common) => {
            let cfg = common.load()?;
            let report = cmd_generate(&cfg)?;
            println!(
                "wrote {} users ({} windows, label-0 fraction {:.4}) to {}",
                report.n_users,
                report.n_windows,
                report.label0_fraction,
                cfg.output_dir.display()
            );
        }
        Command::Run { common, parallel } => {
            let cfg = common.load()?;
            let report = cmd_run(&cfg, parallel)?;
            print!("{}", report.table());
        }
        Command::Report { out } => {
            cmd_report(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
