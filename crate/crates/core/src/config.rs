//! Experiment configuration as flat `section.key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::init::{InitKind, InitScheme};
use crate::losses::{LossConfig, LossKind, LossNetSpec, SsimParams};
use crate::nets::{Arch, NetworkSpec};
use crate::synth::{PhantomKind, PhantomSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub val_every: usize,
    /// Fixed validation crops per validation volume.
    pub val_crops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub test_dims: [usize; 3],
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Directory of pre-generated or imported volumes; phantoms are
    /// generated in memory when unset.
    pub dir: Option<PathBuf>,
    pub n_structures: Option<usize>,
    pub radius_range: Option<[f64; 2]>,
    pub intensity_range: Option<[f64; 2]>,
    pub branching_prob: Option<f64>,
    pub tortuosity: Option<f64>,
}

impl DataConfig {
    /// Phantom spec for one volume of the given dims and seed.
    pub fn phantom(&self, dims: [usize; 3], seed: u64) -> PhantomSpec {
        let mut s = PhantomSpec::new(self.kind, dims, seed);
        if let Some(n) = self.n_structures {
            s.n_structures = n;
        }
        if let Some(r) = self.radius_range {
            s.radius_range = r;
        }
        if let Some(a) = self.intensity_range {
            s.intensity_range = a;
        }
        if let Some(b) = self.branching_prob {
            s.branching_prob = b;
        }
        if let Some(t) = self.tortuosity {
            s.tortuosity = t;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub levels: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub crop_size: Option<usize>,
    pub mask_threshold: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub output_dir: PathBuf,
    pub arch: NetworkSpec,
    pub init: InitKind,
    pub loss: LossConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Training seeds each sweep cell is repeated over.
    pub sweep_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "default".into(),
            output_dir: PathBuf::from("out"),
            arch: NetworkSpec::new(Arch::Dncnn),
            init: InitKind::DefaultUniform,
            loss: LossConfig::new(LossKind::Upl),
            noise: NoiseConfig {
                levels: vec![0.1],
                seed: 0,
            },
            train: TrainConfig {
                iterations: 2000,
                batch_size: 4,
                crop_size: 32,
                learning_rate: 1e-3,
                seed: 0,
                val_every: 100,
                val_crops: 2,
            },
            data: DataConfig {
                kind: PhantomKind::Vessel,
                dims: [64; 3],
                test_dims: [96; 3],
                train: 24,
                val: 6,
                test: 8,
                seed: 0,
                dir: None,
                n_structures: None,
                radius_range: None,
                intensity_range: None,
                branching_prob: None,
                tortuosity: None,
            },
            eval: EvalConfig {
                crop_size: None,
                mask_threshold: 0.05,
            },
            sweep_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse()).collect()
}

fn nums<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    list(v).map_err(|e: T::Err| format!("{v:?}: {e}"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn triple(v: &str) -> std::result::Result<[usize; 3], String> {
    let xs: Vec<usize> = list(v).map_err(|e: std::num::ParseIntError| e.to_string())?;
    match xs[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected one or three extents, got {}", xs.len())),
    }
}

fn pair(v: &str) -> std::result::Result<[f64; 2], String> {
    let xs: Vec<f64> = list(v).map_err(|e: std::num::ParseFloatError| e.to_string())?;
    match xs[..] {
        [a, b] => Ok([a, b]),
        _ => Err(format!("expected two values, got {}", xs.len())),
    }
}

fn opt<T>(v: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v.is_empty() {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| format!("{v:?}: {e}"))
}

fn named<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults. Unknown or repeated keys
    /// are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, found {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            entries.push((line, key, value));
        }
        // the architecture name resets size defaults, so it goes first
        entries.sort_by_key(|&(_, key, _)| key != "arch.name");
        for (line, key, value) in entries {
            cfg.set(key, value).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; the error string names the problem.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "experiment.id" => self.id = v.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "arch.name" => {
                // switching architecture resets its size defaults
                let arch: Arch = named(v)?;
                if arch != self.arch.arch {
                    self.arch = NetworkSpec::new(arch);
                }
            }
            "arch.base_channels" => self.arch.base_channels = num(v)?,
            "arch.blocks" => self.arch.blocks = num(v)?,
            "arch.init" => self.init = named(v)?,
            "loss.kind" => self.loss.kind = named(v)?,
            "loss.lambda" => self.loss.lambda = num(v)?,
            "loss.net.preset" => {
                let seed = self.loss.net.init.seed;
                self.loss.net = match v {
                    "simplenet-3" => LossNetSpec::simplenet(seed),
                    "deep" => LossNetSpec::deep(seed),
                    _ => return Err(format!("unknown loss network preset {v:?}")),
                };
            }
            "loss.net.depth" => self.loss.net.depth = num(v)?,
            "loss.net.kernel" => self.loss.net.kernel = num(v)?,
            "loss.net.width" => self.loss.net.width = num(v)?,
            "loss.net.pool_after" => self.loss.net.pool_after = nums(v)?,
            "loss.net.init" => self.loss.net.init.kind = named(v)?,
            "loss.net.seed" => self.loss.net.init.seed = num(v)?,
            "loss.net.taps" => self.loss.net.taps = opt(v, nums)?,
            "ssim.radius" => self.loss.ssim.radius = num(v)?,
            "ssim.sigma" => self.loss.ssim.sigma = num(v)?,
            "ssim.data_range" => self.loss.ssim.data_range = num(v)?,
            "ssim.k1" => self.loss.ssim.k1 = num(v)?,
            "ssim.k2" => self.loss.ssim.k2 = num(v)?,
            "noise.levels" => self.noise.levels = nums(v)?,
            "noise.seed" => self.noise.seed = num(v)?,
            "train.iterations" => self.train.iterations = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.crop_size" => self.train.crop_size = num(v)?,
            "train.learning_rate" => self.train.learning_rate = num(v)?,
            "train.seed" => self.train.seed = num(v)?,
            "train.val_every" => self.train.val_every = num(v)?,
            "train.val_crops" => self.train.val_crops = num(v)?,
            "data.kind" => self.data.kind = named(v)?,
            "data.dims" => self.data.dims = triple(v)?,
            "data.test_dims" => self.data.test_dims = triple(v)?,
            "data.train" => self.data.train = num(v)?,
            "data.val" => self.data.val = num(v)?,
            "data.test" => self.data.test = num(v)?,
            "data.seed" => self.data.seed = num(v)?,
            "data.dir" => self.data.dir = opt(v, |s| Ok(PathBuf::from(s)))?,
            "data.n_structures" => self.data.n_structures = opt(v, num)?,
            "data.radius_range" => self.data.radius_range = opt(v, pair)?,
            "data.intensity_range" => self.data.intensity_range = opt(v, pair)?,
            "data.branching_prob" => self.data.branching_prob = opt(v, num)?,
            "data.tortuosity" => self.data.tortuosity = opt(v, num)?,
            "eval.crop_size" => self.eval.crop_size = opt(v, num)?,
            "eval.mask_threshold" => self.eval.mask_threshold = num(v)?,
            "sweep.seeds" => self.sweep_seeds = nums(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 || t.crop_size == 0 || t.val_every == 0 || t.val_crops == 0 {
            return bad("iterations, batch size, crop size, val_every and val_crops must be ≥ 1".into());
        }
        if self.data.dims.iter().any(|&d| d < t.crop_size) {
            return bad(format!("crop {} exceeds phantom dims {:?}", t.crop_size, self.data.dims));
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return bad("data.train, data.val and data.test must be ≥ 1".into());
        }
        if self.noise.levels.is_empty() || self.noise.levels.iter().any(|&p| !(p > 0.0)) {
            return bad("noise.levels must be a nonempty list of positive levels".into());
        }
        if !(t.learning_rate > 0.0) {
            return bad("train.learning_rate must be > 0".into());
        }
        if self.arch.base_channels == 0 || self.arch.blocks == 0 {
            return bad("arch counts must be ≥ 1".into());
        }
        if self.id.is_empty() || self.id.contains([',', '\n', '/']) {
            return bad(format!("experiment id {:?} must be nonempty without `,` or `/`", self.id));
        }
        if self.loss.kind.uses_network() {
            self.loss.net.layers()?;
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let opt_s = |o: Option<String>| o.unwrap_or_default();
        kv("experiment.id", self.id.clone());
        kv("output_dir", self.output_dir.display().to_string());
        kv("arch.name", self.arch.arch.name().into());
        kv("arch.base_channels", self.arch.base_channels.to_string());
        kv("arch.blocks", self.arch.blocks.to_string());
        kv("arch.init", self.init.name().into());
        kv("loss.kind", self.loss.kind.name().into());
        kv("loss.lambda", self.loss.lambda.to_string());
        let n = &self.loss.net;
        kv("loss.net.depth", n.depth.to_string());
        kv("loss.net.kernel", n.kernel.to_string());
        kv("loss.net.width", n.width.to_string());
        kv("loss.net.pool_after", join(&n.pool_after));
        kv("loss.net.init", n.init.kind.name().into());
        kv("loss.net.seed", n.init.seed.to_string());
        kv("loss.net.taps", opt_s(n.taps.as_ref().map(|t| join(t))));
        let p: &SsimParams = &self.loss.ssim;
        kv("ssim.radius", p.radius.to_string());
        kv("ssim.sigma", p.sigma.to_string());
        kv("ssim.data_range", p.data_range.to_string());
        kv("ssim.k1", p.k1.to_string());
        kv("ssim.k2", p.k2.to_string());
        kv("noise.levels", join(&self.noise.levels));
        kv("noise.seed", self.noise.seed.to_string());
        let t = &self.train;
        kv("train.iterations", t.iterations.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.crop_size", t.crop_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.val_every", t.val_every.to_string());
        kv("train.val_crops", t.val_crops.to_string());
        let d = &self.data;
        kv("data.kind", d.kind.name().into());
        kv("data.dims", join(&d.dims));
        kv("data.test_dims", join(&d.test_dims));
        kv("data.train", d.train.to_string());
        kv("data.val", d.val.to_string());
        kv("data.test", d.test.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.dir", opt_s(d.dir.as_ref().map(|p| p.display().to_string())));
        kv("data.n_structures", opt_s(d.n_structures.map(|x| x.to_string())));
        kv("data.radius_range", opt_s(d.radius_range.map(|x| join(&x))));
        kv("data.intensity_range", opt_s(d.intensity_range.map(|x| join(&x))));
        kv("data.branching_prob", opt_s(d.branching_prob.map(|x| x.to_string())));
        kv("data.tortuosity", opt_s(d.tortuosity.map(|x| x.to_string())));
        kv("eval.crop_size", opt_s(self.eval.crop_size.map(|x| x.to_string())));
        kv("eval.mask_threshold", self.eval.mask_threshold.to_string());
        kv("sweep.seeds", join(&self.sweep_seeds));
        s
    }

    /// Human-readable loss label, distinguishing loss-network presets.
    pub fn loss_label(&self) -> String {
        if !self.loss.kind.uses_network() {
            return self.loss.kind.name().to_string();
        }
        let n = &self.loss.net;
        let mut label = format!("{}(d{}k{}w{}", self.loss.kind.name(), n.depth, n.kernel, n.width);
        if !n.pool_after.is_empty() {
            let _ = write!(label, "p{}", n.pool_after.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-"));
        }
        label.push(')');
        label
    }

    pub fn init_scheme(&self) -> InitScheme {
        InitScheme::new(self.init, self.train.seed)
    }
}
