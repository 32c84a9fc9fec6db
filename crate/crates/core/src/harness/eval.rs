//! Denoise test volumes and score them on the full volume and the centre cube.

use std::fs;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::harness::data::{build_dataset, Pair};
use crate::harness::train::{checkpoint_path, load_network};
use crate::metrics::{crop_eval_region, masked_mse, metrics_csv, mse, psnr_from_mse, ssim_metric, MetricsRecord, Region};
use crate::nets::{denoise, Network};
use crate::synth::PhantomKind;
use crate::volume::Volume;

fn record(cfg: &ExperimentConfig, level: f64, region: Region, ssim: f64, mse: f64) -> MetricsRecord {
    MetricsRecord {
        experiment_id: cfg.id.clone(),
        seed: cfg.train.seed,
        noise: level,
        arch: cfg.arch.arch.name().to_string(),
        loss: cfg.loss_label(),
        region,
        ssim,
        psnr: psnr_from_mse(mse, cfg.loss.ssim.data_range),
        mse,
    }
}

/// Two records per (prediction, clean) pair: full volume and centre cube.
/// For roots the centre-cube MSE only counts voxels where the clean volume
/// exceeds `eval.mask_threshold`.
pub fn evaluate_pairs(cfg: &ExperimentConfig, level: f64, pairs: &[(Volume, Volume)]) -> Result<Vec<MetricsRecord>> {
    let p = &cfg.loss.ssim;
    let kind = cfg.data.kind;
    let mut out = Vec::with_capacity(2 * pairs.len());
    for (pred, clean) in pairs {
        out.push(record(cfg, level, Region::Full, ssim_metric(pred, clean, p)?, mse(pred, clean)?));
        let pc = crop_eval_region(pred, kind, cfg.eval.crop_size)?;
        let cc = crop_eval_region(clean, kind, cfg.eval.crop_size)?;
        let m = match kind {
            PhantomKind::Root => masked_mse(&pc, &cc, &cc, cfg.eval.mask_threshold)?,
            PhantomKind::Vessel => mse(&pc, &cc)?,
        };
        out.push(record(cfg, level, Region::Center, ssim_metric(&pc, &cc, p)?, m));
    }
    Ok(out)
}

/// Denoises every test pair with `net` and scores the result.
pub fn evaluate_network(cfg: &ExperimentConfig, level: f64, net: &Network<f32>, test: &[Pair]) -> Result<Vec<MetricsRecord>> {
    let pairs = test
        .iter()
        .map(|p| Ok((denoise(net, &p.noisy)?, p.clean.clone())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(cfg, level, &pairs)
}

/// Loads each trained checkpoint from the output directory, evaluates it on
/// the test split and writes `metrics.csv`.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for &level in &cfg.noise.levels {
        let net = load_network(cfg, &checkpoint_path(&cfg.output_dir, level))?;
        let data = build_dataset(cfg, level)?;
        records.extend(evaluate_network(cfg, level, &net, &data.test)?);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("metrics.csv"), metrics_csv(&records)?)?;
    Ok(records)
}
