use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eaf::commands::{self, FieldsArgs};
use eaf::config::RunConfig;
use eaf::specs::{parse_patch, parse_query, GridSpec, PerturbSpec};
use eaf::{CliError, Result};

const DEFAULT_GRID: &str = "16x16@0.5:2,-4";

#[derive(Parser)]
#[command(name = "eaf", version, about = "Epipolar attention fields for BEV segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the attention-field heatmap of one BEV cell for every camera.
    Fields {
        /// Rig JSON; the built-in two-camera toy rig when omitted.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Grid as WxH@CELL[:X,Y].
        #[arg(long, default_value = DEFAULT_GRID)]
        grid: GridSpec,
        /// Feature scale: 1/N, its decimal value, or N.
        #[arg(long, default_value = "1/4", value_parser = parse_patch)]
        scale: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Query cell as I,J.
        #[arg(long, value_parser = parse_query)]
        query: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Check computed epipolar lines against brute-force oracles.
    Verify {
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_GRID)]
        grid: GridSpec,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on synthetic scenes per a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on held-out synthetic scenes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rig perturbation as yaw=DEG,shift=M,seed=N.
        #[arg(long)]
        perturb_rig: Option<PerturbSpec>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fields { rig, grid, scale, lambda, query, out } => {
            let outcome = commands::fields(&FieldsArgs { rig, grid, patch: scale, lambda, query, out: out.clone() })?;
            if !outcome.visible {
                eprintln!("warning: query ({}, {}) is not visible in any camera; heatmaps are all zero", query.0, query.1);
            }
            println!("wrote {} heatmaps to {}", outcome.files.len(), out.display());
        }
        Command::Verify { rig, grid, samples, seed } => {
            let report = commands::verify(rig.as_deref(), &grid, samples, seed)?;
            print!("{}", report.render());
            if let Some(f) = report.first_failure {
                return Err(CliError::Check(format!(
                    "{} at cell ({}, {}) in view {}",
                    f.check.name(),
                    f.cell.0,
                    f.cell.1,
                    f.view
                )));
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = commands::train(&cfg)?;
            if let Some(r) = outcome.rows.last() {
                println!(
                    "step {} loss {:.6} iou vehicle {:.6} drivable {:.6} lambda {:.6}",
                    r.step,
                    r.loss,
                    r.iou_vehicle,
                    r.iou_drivable,
                    outcome.model.lambda()
                );
            }
            println!("outputs in {}", cfg.out_dir().display());
        }
        Command::Eval { config, checkpoint, perturb_rig } => {
            let cfg = RunConfig::load(&config)?;
            let report = commands::eval(&cfg, &checkpoint, perturb_rig.as_ref())?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
