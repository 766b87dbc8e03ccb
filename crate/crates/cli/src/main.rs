use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use soh_cli::commands::{self, PlotOptions, SynthKind};
use soh_cli::error::CliError;
use soh_cli::plot::PlotKind;
use soh_cli::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "soh",
    version,
    about = "Multi-stage battery state-of-health estimation and transfer"
)]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single run seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seeds for a multi-seed run.
    #[arg(long, global = true, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthArg {
    Fleet,
    Latent,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the configured data files and record a summary.
    Ingest {
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Fit per-stage source models on the source battery.
    FitSource {
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Apply a fit-source run to target batteries.
    Transfer {
        /// Directory of the fit-source run.
        #[arg(long)]
        source_run: PathBuf,
        /// Target battery; repeat for several. Defaults to transfer.targets.
        #[arg(long = "target")]
        targets: Vec<String>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Aggregate reports into a comparison table.
    Evaluate {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Render a report, labels file or features file as SVG and CSV.
    Plot {
        /// prediction, capacity or features
        #[arg(long)]
        kind: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stage: Option<u32>,
        #[arg(long)]
        battery: Option<String>,
    },
    /// Check a run directory's hashes, metrics and model bundles.
    Verify { run_dir: PathBuf },
    /// Write synthetic data.
    Synth {
        #[arg(long, value_enum, default_value = "fleet")]
        kind: SynthArg,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("this command needs --config".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.seeds.clear();
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { run_id } => {
            let cfg = load_config(cli)?;
            println!(
                "{}",
                commands::cmd_ingest(&cfg, run_id.as_deref())?.display()
            );
        }
        Command::FitSource { run_id } => {
            let cfg = load_config(cli)?;
            let dir = commands::cmd_fit_source(&cfg, &cfg.run_seeds(), run_id.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Transfer {
            source_run,
            targets,
            run_id,
        } => {
            let cfg = load_config(cli)?;
            println!(
                "{}",
                commands::cmd_transfer(&cfg, source_run, targets, run_id.as_deref())?.display()
            );
        }
        Command::Evaluate { reports } => {
            print!("{}", commands::cmd_evaluate(reports, cli.out.as_deref())?);
        }
        Command::Plot {
            kind,
            input,
            stage,
            battery,
        } => {
            let kind: PlotKind = kind.parse()?;
            let opts = PlotOptions {
                stage: *stage,
                battery: battery.clone(),
                seed: cli.seed,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
            for p in commands::cmd_plot(kind, input, &out, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { run_dir } => {
            let checks = commands::cmd_verify(run_dir)?;
            let failed = checks.iter().filter(|c| !c.ok).count();
            for c in &checks {
                if !c.ok || !cli.quiet {
                    println!(
                        "{} {}: {}",
                        if c.ok { "ok  " } else { "FAIL" },
                        c.name,
                        c.detail
                    );
                }
            }
            if failed > 0 {
                return Err(CliError::Validation(format!(
                    "{failed} of {} checks failed",
                    checks.len()
                )));
            }
            println!("{} checks passed", checks.len());
        }
        Command::Synth { kind } => {
            let kind = match kind {
                SynthArg::Fleet => SynthKind::Fleet,
                SynthArg::Latent => SynthKind::Latent,
            };
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("synthetic"));
            for p in commands::cmd_synth(kind, cli.config.as_deref(), cli.seed.unwrap_or(0), &out)?
            {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
