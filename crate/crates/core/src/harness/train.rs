//! Adam training on paired random crops with best-validation selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::harness::data::{build_dataset, derive_seed, Dataset, Pair};
use crate::losses::{make_loss, Loss};
use crate::metrics::ssim_metric;
use crate::nets::{build_network, denoise, Network};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::synth::{crop_offset, random_crop_pair};
use crate::tensor::{Shape, Tensor5};
use crate::volume::Volume;

const BATCH_TAG: u64 = 101;
const VAL_TAG: u64 = 102;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub val_ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The network at the best validation step.
    pub network: Network<f32>,
    pub log: Vec<LogRow>,
    pub best_step: usize,
    pub best_val_ssim: f64,
    pub steps_run: usize,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,val_ssim\n");
        for r in &self.log {
            let v = r.val_ssim.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, v);
        }
        s
    }
}

/// SHA-256 (hex) of the serialized loss network, if the loss has one.
pub fn loss_net_digest(loss: &Loss<f32>) -> Option<String> {
    let net = loss.network()?;
    let digest = Sha256::digest(checkpoint_bytes(net.net.params()));
    Some(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn stack(vols: &[Volume]) -> Result<Tensor5<f32>> {
    let [d, h, w] = vols[0].dims();
    let data = vols.iter().flat_map(|v| v.data().iter().copied()).collect();
    Tensor5::from_vec(Shape::new(vols.len(), 1, d, h, w), data)
}

fn validation_crops(cfg: &ExperimentConfig, val: &[Pair]) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, VAL_TAG, 0));
    let size = cfg.train.crop_size;
    let mut out = Vec::new();
    for p in val {
        for _ in 0..cfg.train.val_crops {
            let off = crop_offset(p.clean.dims(), size, &mut rng)?;
            out.push(Pair {
                clean: p.clean.crop(off, [size; 3])?,
                noisy: p.noisy.crop(off, [size; 3])?,
            });
        }
    }
    Ok(out)
}

fn validate(net: &Network<f32>, crops: &[Pair], cfg: &ExperimentConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in crops {
        total += ssim_metric(&denoise(net, &p.noisy)?, &p.clean, &cfg.loss.ssim)?;
    }
    Ok(total / crops.len() as f64)
}

/// Trains a fresh network on `data` with `loss`. Every step draws a batch of
/// paired crops, validation runs every `val_every` steps and after the last
/// step, and the returned network holds the best-validation parameters.
pub fn train_network(cfg: &ExperimentConfig, data: &Dataset, loss: &Loss<f32>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs train and validation volumes"));
    }
    let t = &cfg.train;
    let mut net = build_network::<f32>(&cfg.arch, cfg.init_scheme())?;
    let mut opt = Adam::new(AdamConfig {
        lr: t.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, BATCH_TAG, 0));
    let val_crops = validation_crops(cfg, &data.val)?;
    let mut log = Vec::with_capacity(t.iterations);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for step in 1..=t.iterations {
        let mut noisy = Vec::with_capacity(t.batch_size);
        let mut clean = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let p = &data.train[rng.random_range(0..data.train.len())];
            let (n, c, _) = random_crop_pair(&p.noisy, &p.clean, t.crop_size, &mut rng)?;
            noisy.push(n);
            clean.push(c);
        }
        let tape = Tape::new();
        let x = tape.constant(stack(&noisy)?);
        let pred = net.forward_train(&tape, x)?;
        let l = loss.eval(&tape, pred, &stack(&clean)?)?;
        let value = tape.value(l).item() as f64;
        if !value.is_finite() {
            return Err(Error::DivergedLoss { step, value });
        }
        let grads = tape.backward(l)?;
        drop(tape);
        opt.step(net.params_mut(), &grads)?;
        let val_ssim = if step % t.val_every == 0 || step == t.iterations {
            let v = validate(&net, &val_crops, cfg)?;
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((step, v, net.params().clone()));
            }
            Some(v)
        } else {
            None
        };
        log.push(LogRow {
            step,
            loss: value,
            val_ssim,
        });
    }
    let (best_step, best_val_ssim, store) = best.expect("the last step always validates");
    *net.params_mut() = store;
    Ok(TrainOutcome {
        network: net,
        log,
        best_step,
        best_val_ssim,
        steps_run: t.iterations,
    })
}

pub fn checkpoint_path(dir: &Path, level: f64) -> PathBuf {
    dir.join(format!("model_noise{level}.ckpt"))
}

pub fn log_path(dir: &Path, level: f64) -> PathBuf {
    dir.join(format!("train_log_noise{level}.csv"))
}

/// Builds the configured architecture and loads a checkpoint into it.
pub fn load_network(cfg: &ExperimentConfig, path: &Path) -> Result<Network<f32>> {
    let mut net = build_network::<f32>(&cfg.arch, cfg.init_scheme())?;
    net.params_mut().load(&load_checkpoint(path)?)?;
    Ok(net)
}

/// Trains one network per configured noise level and writes the config,
/// checkpoints and training logs into the output directory.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<(f64, TrainOutcome)>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let loss = make_loss::<f32>(&cfg.loss)?;
    let before = loss_net_digest(&loss);
    let mut out = Vec::new();
    for &level in &cfg.noise.levels {
        let data = build_dataset(cfg, level)?;
        let outcome = train_network(cfg, &data, &loss)?;
        save_checkpoint(outcome.network.params(), checkpoint_path(dir, level))?;
        fs::write(log_path(dir, level), outcome.log_csv())?;
        out.push((level, outcome));
    }
    if loss_net_digest(&loss) != before {
        return Err(Error::Checkpoint("loss network changed during training".into()));
    }
    if let Some(d) = before {
        fs::write(dir.join("loss_net.sha256"), format!("{d}\n"))?;
    }
    Ok(out)
}
