//! Paired clean/noisy volumes for the three splits.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::synth::{add_rician_noise, generate_phantom, NoiseSpec};
use crate::volume::{load_uvol, save_uvol, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: Volume,
    pub noisy: Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub level: f64,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Pair] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// SplitMix64 over `base`, `tag` and `index`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn count(cfg: &ExperimentConfig, s: Split) -> usize {
    match s {
        Split::Train => cfg.data.train,
        Split::Val => cfg.data.val,
        Split::Test => cfg.data.test,
    }
}

fn dims(cfg: &ExperimentConfig, s: Split) -> [usize; 3] {
    match s {
        Split::Test => cfg.data.test_dims,
        _ => cfg.data.dims,
    }
}

fn clean_path(dir: &Path, s: Split, i: usize) -> PathBuf {
    dir.join(s.name()).join(format!("clean_{i:03}.uvol"))
}

fn noisy_path(dir: &Path, s: Split, level: f64, i: usize) -> PathBuf {
    dir.join(s.name()).join(format!("noisy_{level}_{i:03}.uvol"))
}

fn noise_spec(cfg: &ExperimentConfig, level: f64, s: Split, i: usize) -> NoiseSpec {
    NoiseSpec {
        level,
        seed: derive_seed(cfg.noise.seed ^ level.to_bits(), 16 + s.tag(), i as u64),
    }
}

/// Clean ground truth for one split, generated or loaded from `data.dir`.
pub fn clean_volumes(cfg: &ExperimentConfig, s: Split) -> Result<Vec<Volume>> {
    (0..count(cfg, s))
        .map(|i| match &cfg.data.dir {
            Some(dir) => load_uvol(clean_path(dir, s, i)),
            None => generate_phantom(&cfg.data.phantom(dims(cfg, s), derive_seed(cfg.data.seed, s.tag(), i as u64))),
        })
        .collect()
}

/// All three splits at one noise level. Noisy volumes stored in `data.dir`
/// are used when present; otherwise noise is drawn from the clean volumes.
pub fn build_dataset(cfg: &ExperimentConfig, level: f64) -> Result<Dataset> {
    let mut splits = Vec::new();
    for s in Split::ALL {
        let pairs = clean_volumes(cfg, s)?
            .into_iter()
            .enumerate()
            .map(|(i, clean)| {
                let stored = cfg.data.dir.as_ref().map(|d| noisy_path(d, s, level, i)).filter(|p| p.exists());
                let noisy = match stored {
                    Some(p) => load_uvol(p)?,
                    None => add_rician_noise(&clean, &noise_spec(cfg, level, s, i))?,
                };
                clean.same_dims(&noisy)?;
                Ok(Pair { clean, noisy })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(pairs);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { level, train, val, test })
}

/// Writes generated clean phantoms under `dir/{split}/`. Returns the paths.
pub fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut generated = cfg.clone();
    generated.data.dir = None;
    let mut out = Vec::new();
    for s in Split::ALL {
        fs::create_dir_all(dir.join(s.name()))?;
        for (i, v) in clean_volumes(&generated, s)?.iter().enumerate() {
            let p = clean_path(dir, s, i);
            save_uvol(v, &p)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Writes noisy copies of the clean volumes in `dir` for every configured level.
pub fn write_noisy(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stored = cfg.clone();
    stored.data.dir = Some(dir.to_path_buf());
    let mut out = Vec::new();
    for s in Split::ALL {
        let clean = clean_volumes(&stored, s)?;
        for &level in &cfg.noise.levels {
            for (i, v) in clean.iter().enumerate() {
                let p = noisy_path(dir, s, level, i);
                save_uvol(&add_rician_noise(v, &noise_spec(cfg, level, s, i))?, &p)?;
                out.push(p);
            }
        }
    }
    Ok(out)
}
