//! The five study grids: each expands a base config into cells, trains every
//! cell over the configured training seeds and evaluates it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::data::build_dataset;
use crate::harness::eval::evaluate_network;
use crate::harness::train::train_network;
use crate::losses::{make_loss, LossKind, LossNetSpec};
use crate::metrics::{aggregate, metrics_csv, AggregateRow, GroupKey, MetricsRecord};
use crate::nets::{denoise, Arch, NetworkSpec};
use crate::volume::save_uvol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepAxis {
    LossComparison,
    Seed,
    DepthKernel,
    Pooling,
    ArchNoise,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::LossComparison,
        SweepAxis::Seed,
        SweepAxis::DepthKernel,
        SweepAxis::Pooling,
        SweepAxis::ArchNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LossComparison => "loss-comparison",
            SweepAxis::Seed => "seed",
            SweepAxis::DepthKernel => "depth-kernel",
            SweepAxis::Pooling => "pooling",
            SweepAxis::ArchNoise => "arch-noise",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "sweep axis",
                name: s.to_string(),
            })
    }
}

pub const LOSS_NET_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const SWEEP_DEPTHS: [usize; 4] = [3, 5, 9, 13];
pub const SWEEP_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const POOLING_DEPTH: usize = 5;
pub const POOLINGS: [&[usize]; 4] = [&[], &[1], &[1, 2], &[1, 2, 3]];
pub const SWEEP_NOISE: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

/// One grid point. `row` and `col` place it in the report table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub row: String,
    pub col: String,
    pub config: ExperimentConfig,
}

pub fn sweep_dir(base: &ExperimentConfig, axis: SweepAxis) -> PathBuf {
    base.output_dir.join(format!("sweep-{axis}"))
}

fn cell(base: &ExperimentConfig, axis: SweepAxis, name: String, row: String, col: String, edit: impl FnOnce(&mut ExperimentConfig)) -> SweepCell {
    let mut config = base.clone();
    edit(&mut config);
    config.id = format!("{}-{}", base.id, name);
    config.output_dir = sweep_dir(base, axis).join(&name);
    SweepCell { name, row, col, config }
}

/// Expands `base` along `axis`. Loss-network cells reuse the base loss
/// network seed; the seed axis fixes training to the base training seed.
pub fn expand_sweep(axis: SweepAxis, base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let seed = base.loss.net.init.seed;
    let upl = |c: &mut ExperimentConfig, net: LossNetSpec| {
        c.loss.kind = LossKind::Upl;
        c.loss.net = net;
    };
    let mut out = Vec::new();
    match axis {
        SweepAxis::LossComparison => {
            for kind in [LossKind::L1, LossKind::Ssim] {
                out.push(cell(base, axis, kind.name().into(), kind.name().into(), String::new(), |c| c.loss.kind = kind));
            }
            out.push(cell(base, axis, "upl-simplenet3".into(), "uPL SimpleNet-3".into(), String::new(), |c| {
                upl(c, LossNetSpec::simplenet(seed))
            }));
            out.push(cell(base, axis, "upl-deep".into(), "uPL deep".into(), String::new(), |c| upl(c, LossNetSpec::deep(seed))));
        }
        SweepAxis::Seed => {
            for s in LOSS_NET_SEEDS {
                out.push(cell(base, axis, format!("lossnet-seed{s}"), format!("seed {s}"), String::new(), |c| {
                    let mut net = c.loss.net.clone();
                    net.init.seed = s;
                    upl(c, net);
                    c.sweep_seeds = vec![c.train.seed];
                }));
            }
        }
        SweepAxis::DepthKernel => {
            for d in SWEEP_DEPTHS {
                for k in SWEEP_KERNELS {
                    out.push(cell(base, axis, format!("d{d}-k{k}"), format!("{d} conv"), format!("kernel {k}"), |c| {
                        let mut net = c.loss.net.clone();
                        net.depth = d;
                        net.kernel = k;
                        net.pool_after.clear();
                        net.taps = None;
                        upl(c, net);
                    }));
                }
            }
        }
        SweepAxis::Pooling => {
            for pools in POOLINGS {
                let n = pools.len();
                out.push(cell(base, axis, format!("pool{n}"), format!("{n} pooling"), String::new(), |c| {
                    let mut net = c.loss.net.clone();
                    net.depth = POOLING_DEPTH;
                    net.pool_after = pools.to_vec();
                    net.taps = None;
                    upl(c, net);
                }));
            }
        }
        SweepAxis::ArchNoise => {
            for arch in Arch::ALL {
                for loss in [LossKind::L1, LossKind::Upl] {
                    for p in SWEEP_NOISE {
                        let name = format!("{}-{}-noise{p}", arch.name(), loss.name());
                        let row = format!("{}/{}", arch.name(), loss.name());
                        out.push(cell(base, axis, name, row, format!("{}%", p * 100.0), |c| {
                            if c.arch.arch != arch {
                                c.arch = NetworkSpec {
                                    arch,
                                    base_channels: c.arch.base_channels,
                                    blocks: NetworkSpec::new(arch).blocks,
                                };
                            }
                            c.loss.kind = loss;
                            c.noise.levels = vec![p];
                        }));
                    }
                }
            }
        }
    }
    for c in &out {
        c.config.validate()?;
    }
    Ok(out)
}

/// Trains and evaluates one cell over its training seeds and noise levels,
/// writing `metrics.csv` and sample volumes for the report panels.
pub fn run_cell(cell: &SweepCell) -> Result<Vec<MetricsRecord>> {
    let dir = &cell.config.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cell.config.to_text())?;
    let loss = make_loss::<f32>(&cell.config.loss)?;
    let mut records = Vec::new();
    for (li, &level) in cell.config.noise.levels.iter().enumerate() {
        let data = build_dataset(&cell.config, level)?;
        for (si, &seed) in cell.config.sweep_seeds.iter().enumerate() {
            let mut cfg = cell.config.clone();
            cfg.train.seed = seed;
            let outcome = train_network(&cfg, &data, &loss)?;
            records.extend(evaluate_network(&cfg, level, &outcome.network, &data.test)?);
            if li == 0 && si == 0 {
                let sample = &data.test[0];
                save_uvol(&sample.clean, dir.join("sample_clean.uvol"))?;
                save_uvol(&sample.noisy, dir.join("sample_noisy.uvol"))?;
                save_uvol(&denoise(&outcome.network, &sample.noisy)?, dir.join("sample_denoised.uvol"))?;
            }
        }
    }
    fs::write(dir.join("metrics.csv"), metrics_csv(&records)?)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub dir: PathBuf,
    /// Per cell, its records or the failure message.
    pub cells: Vec<(SweepCell, std::result::Result<Vec<MetricsRecord>, String>)>,
}

impl SweepOutcome {
    pub fn failures(&self) -> Vec<&str> {
        self.cells
            .iter()
            .filter(|(_, r)| r.is_err())
            .map(|(c, _)| c.name.as_str())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failures().is_empty()
    }

    /// Mean ± std per (cell, region) over all successful cells.
    pub fn summary(&self) -> Result<Vec<AggregateRow>> {
        let all: Vec<MetricsRecord> = self.cells.iter().filter_map(|(_, r)| r.as_ref().ok()).flatten().cloned().collect();
        aggregate(&all, &[GroupKey::Experiment, GroupKey::Region])
    }
}

pub fn summary_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("experiment_id,region,n,ssim_mean,ssim_std,psnr_mean,psnr_std,mse_mean,mse_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.key[0], r.key[1], r.n, r.ssim.mean, r.ssim.std, r.psnr.mean, r.psnr.std, r.mse.mean, r.mse.std
        ));
    }
    s
}

fn write_manifest(dir: &Path, base: &ExperimentConfig, axis: SweepAxis) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("base_config.txt"), base.to_text())?;
    fs::write(dir.join("axis.txt"), format!("{axis}\n"))?;
    Ok(())
}

/// Runs every cell of the sweep in order. A failing cell is recorded (and
/// its message written to `error.txt`) without stopping the sweep.
pub fn run_sweep(axis: SweepAxis, base: &ExperimentConfig) -> Result<SweepOutcome> {
    run_cells(axis, base, expand_sweep(axis, base)?)
}

/// [`run_sweep`] over an explicit subset of cells.
pub fn run_cells(axis: SweepAxis, base: &ExperimentConfig, cells: Vec<SweepCell>) -> Result<SweepOutcome> {
    let dir = sweep_dir(base, axis);
    write_manifest(&dir, base, axis)?;
    let mut done = Vec::new();
    for c in cells {
        let r = run_cell(&c).map_err(|e| e.to_string());
        if let Err(msg) = &r {
            fs::create_dir_all(&c.config.output_dir)?;
            fs::write(c.config.output_dir.join("error.txt"), format!("{msg}\n"))?;
        }
        done.push((c, r));
    }
    let outcome = SweepOutcome { axis, dir, cells: done };
    if outcome.cells.iter().any(|(_, r)| r.is_ok()) {
        fs::write(outcome.dir.join("summary.csv"), summary_csv(&outcome.summary()?))?;
    }
    Ok(outcome)
}

/// Per-cell records grouped by cell name, as read back from disk.
pub fn read_cell_records(cells: &[SweepCell]) -> BTreeMap<String, Vec<MetricsRecord>> {
    cells
        .iter()
        .filter_map(|c| {
            let text = fs::read_to_string(c.config.output_dir.join("metrics.csv")).ok()?;
            Some((c.name.clone(), crate::metrics::parse_metrics_csv(&text).ok()?))
        })
        .collect()
}
