use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use upl::config::ExperimentConfig;
use upl::harness::{self, SweepAxis};
use upl::metrics::{aggregate, GroupKey};
use upl::volume::Axis;

#[derive(Parser)]
#[command(name = "upl", version, about = "3D denoising with an untrained perceptual loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (data seed for gen-data, noise seed for add-noise, training seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean phantoms for the train, val and test splits.
    GenData(Common),
    /// Write Rician-corrupted copies of the stored clean phantoms.
    AddNoise(Common),
    /// Train one denoiser per configured noise level.
    Train(Common),
    /// Evaluate trained checkpoints on the test split.
    Eval(Common),
    /// Train and evaluate every cell of a study grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
    },
    /// Render markdown tables and MIP panels for a finished sweep.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Projection axis for the panels: axial, coronal or sagittal.
        #[arg(long, default_value = "axial")]
        mip_axis: Axis,
    },
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.dir.clone().unwrap_or_else(|| cfg.output_dir.join("data"))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let mut cfg = load(&c)?;
            if let Some(s) = c.seed {
                cfg.data.seed = s;
            }
            let dir = c.out.clone().unwrap_or_else(|| data_dir(&cfg));
            let files = harness::write_dataset(&cfg, &dir)?;
            println!("wrote {} clean volumes to {}", files.len(), dir.display());
        }
        Command::AddNoise(c) => {
            let mut cfg = load(&c)?;
            if let Some(s) = c.seed {
                cfg.noise.seed = s;
            }
            let dir = c.out.clone().unwrap_or_else(|| data_dir(&cfg));
            let files = harness::write_noisy(&cfg, &dir)?;
            println!("wrote {} noisy volumes to {}", files.len(), dir.display());
        }
        Command::Train(c) => {
            let mut cfg = load(&c)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            for (level, o) in harness::train(&cfg)? {
                println!(
                    "noise {level}: {} steps, best validation SSIM {:.4} at step {}",
                    o.steps_run, o.best_val_ssim, o.best_step
                );
            }
        }
        Command::Eval(c) => {
            let mut cfg = load(&c)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            let records = harness::evaluate(&cfg)?;
            for row in aggregate(&records, &[GroupKey::Noise, GroupKey::Region])? {
                println!(
                    "noise {} {}: SSIM {:.4} ± {:.4}  PSNR {:.2}  MSE {:.3e}",
                    row.key[0], row.key[1], row.ssim.mean, row.ssim.std, row.psnr.mean, row.mse.mean
                );
            }
        }
        Command::Sweep { common, axis } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.sweep_seeds = vec![s];
                cfg.train.seed = s;
            }
            let outcome = harness::run_sweep(axis, &cfg)?;
            let failed = outcome.failures();
            println!("{} cells, {} failed; results in {}", outcome.cells.len(), failed.len(), outcome.dir.display());
            if !failed.is_empty() {
                eprintln!("failed cells: {}", failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { common, axis, mip_axis } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.sweep_seeds = vec![s];
                cfg.train.seed = s;
            }
            let out = harness::report(axis, &cfg, mip_axis)?;
            println!("wrote {} and {} panels", out.markdown.display(), out.panels.len());
            if !out.is_complete() {
                eprintln!("missing cells: {}", out.missing.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for incomplete sweeps
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
