//! Evaluation metrics, evaluation crops and seed aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::losses::{ssim_index, SsimParams};
use crate::synth::PhantomKind;
use crate::volume::Volume;

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.same_dims(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Mean squared error restricted to voxels where `mask_source > threshold`.
/// Falls back to the full-volume value when no voxel qualifies.
pub fn masked_mse(a: &Volume, b: &Volume, mask_source: &Volume, threshold: f32) -> Result<f64> {
    a.same_dims(b)?;
    a.same_dims(mask_source)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask_source.data()) {
        if m > threshold {
            sum += (x as f64 - y as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return mse(a, b);
    }
    Ok(sum / n as f64)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

/// Mean SSIM through the same kernel as the training loss, in f64.
pub fn ssim_metric(a: &Volume, b: &Volume, p: &SsimParams) -> Result<f64> {
    a.same_dims(b)?;
    let tape = Tape::<f64>::new();
    let x = tape.constant(a.to_tensor());
    let s = ssim_index(&tape, x, &b.to_tensor(), p)?;
    let v = tape.value(s).item();
    Ok(v)
}

/// Smallest default evaluation cube edge.
pub const MIN_EVAL_SIZE: usize = 16;

/// Default cube edge, scaled from 52 of 192 for roots and 68 of 512 for vessels.
pub fn default_eval_size(kind: PhantomKind, dims: [usize; 3]) -> usize {
    let smallest = *dims.iter().min().expect("three dims");
    let ratio = match kind {
        PhantomKind::Root => 52.0 / 192.0,
        PhantomKind::Vessel => 68.0 / 512.0,
    };
    ((smallest as f64 * ratio).round() as usize).max(MIN_EVAL_SIZE).min(smallest)
}

pub fn eval_region_offset(kind: PhantomKind, dims: [usize; 3], size: usize) -> Result<[usize; 3]> {
    if size == 0 || dims.iter().any(|&d| d < size) {
        return Err(Error::invalid(format!("evaluation cube {size} does not fit in {dims:?}")));
    }
    let centre = |d: usize| (d - size) / 2;
    let top = match kind {
        PhantomKind::Vessel => centre(dims[0]),
        PhantomKind::Root => {
            let anchor = (dims[0] as f64 / 4.0).round() as usize;
            anchor.saturating_sub(size / 2).min(dims[0] - size)
        }
    };
    Ok([top, centre(dims[1]), centre(dims[2])])
}

/// Roots: centred in H and W, top face at `round(D/4) − size/2`. Vessels:
/// centred on every axis. `size` defaults to [`default_eval_size`].
pub fn crop_eval_region(v: &Volume, kind: PhantomKind, size: Option<usize>) -> Result<Volume> {
    let size = size.unwrap_or_else(|| default_eval_size(kind, v.dims()));
    let off = eval_region_offset(kind, v.dims(), size)?;
    v.crop(off, [size; 3])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Full,
    Center,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Center => "center",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Region::Full),
            "center" => Ok(Region::Center),
            _ => Err(Error::Unknown {
                kind: "region",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub experiment_id: String,
    pub seed: u64,
    pub noise: f64,
    pub arch: String,
    pub loss: String,
    pub region: Region,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

pub const CSV_HEADER: &str = "experiment_id,seed,noise,arch,loss,region,ssim,psnr,mse";

fn check_field(s: &str) -> Result<&str> {
    if s.contains([',', '\n', '\r']) {
        return Err(Error::invalid(format!("CSV field {s:?} contains a separator")));
    }
    Ok(s)
}

/// Header plus one line per record; floats use the shortest round-trip form.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            check_field(&r.experiment_id)?,
            r.seed,
            r.noise,
            check_field(&r.arch)?,
            check_field(&r.loss)?,
            r.region,
            r.ssim,
            r.psnr,
            r.mse
        ));
    }
    Ok(out)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Config {
                line: 1,
                msg: "missing metrics header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Config { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        out.push(MetricsRecord {
            experiment_id: f[0].to_string(),
            seed: f[1].parse().map_err(|e| bad(format!("seed {:?}: {e}", f[1])))?,
            noise: num(f[2])?,
            arch: f[3].to_string(),
            loss: f[4].to_string(),
            region: f[5].parse()?,
            ssim: num(f[6])?,
            psnr: num(f[7])?,
            mse: num(f[8])?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Experiment,
    Seed,
    Noise,
    Arch,
    Loss,
    Region,
}

impl GroupKey {
    fn of(self, r: &MetricsRecord) -> String {
        match self {
            GroupKey::Experiment => r.experiment_id.clone(),
            GroupKey::Seed => r.seed.to_string(),
            GroupKey::Noise => r.noise.to_string(),
            GroupKey::Arch => r.arch.clone(),
            GroupKey::Loss => r.loss.clone(),
            GroupKey::Region => r.region.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and sample (n − 1) standard deviation; std is 0 for one value.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("mean_std"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub key: Vec<String>,
    pub n: usize,
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    pub mse: MeanStd,
}

/// Groups records by the given keys, sorted by key.
pub fn aggregate(records: &[MetricsRecord], keys: &[GroupKey]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(keys.iter().map(|k| k.of(r)).collect()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let col = |f: fn(&MetricsRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(AggregateRow {
                n: rs.len(),
                ssim: col(|r| r.ssim)?,
                psnr: col(|r| r.psnr)?,
                mse: col(|r| r.mse)?,
                key,
            })
        })
        .collect()
}
