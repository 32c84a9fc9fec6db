//! Training losses: voxelwise L1, SSIM, and the untrained perceptual loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::init::{InitKind, InitScheme};
use crate::sequential::{build_named, LayerSpec, SequentialNet};
use crate::tensor::{Scalar, Tensor5};

/// Gaussian-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub radius: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            radius: 5,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.radius == 0 || !(self.sigma > 0.0) || !(self.data_range > 0.0) {
            return Err(Error::invalid(format!("bad ssim parameters {self:?}")));
        }
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::invalid("ssim stabilizers must be positive"));
        }
        Ok(())
    }
}

fn same_target<T: Scalar>(op: &'static str, tape: &Tape<T>, pred: Var, target: &Tensor5<T>) -> Result<()> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", tape.shape(pred).0, target.shape().0),
        ));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: &Tensor5<T>) -> Result<Var> {
    same_target("l1_loss", tape, pred, target)?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.map(d, crate::graph::MapKind::Abs)?;
    tape.mean(a)
}

/// Windowed local statistics use the Gaussian weights that fall inside the
/// volume, renormalized to sum to one, so border voxels are not biased
/// towards zero.
pub fn ssim_index_vars<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    p.validate()?;
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape(
            "ssim_index",
            format!("{:?} vs {:?}", tape.shape(x).0, tape.shape(y).0),
        ));
    }
    let (r, s) = (p.radius, p.sigma);
    let shape = tape.shape(x);
    let ones = tape.constant(Tensor5::full(shape, T::one()));
    let mass = tape.gaussian_filter3d(ones, s, r)?;
    let inv = tape.value(mass).map(|m| T::one() / m);
    let inv = tape.constant(inv);
    let local = |v: Var| -> Result<Var> {
        let f = tape.gaussian_filter3d(v, s, r)?;
        tape.mul(f, inv)
    };
    let mx = local(x)?;
    let my = local(y)?;
    let exx = local(tape.square(x))?;
    let eyy = local(tape.square(y))?;
    let exy = local(tape.mul(x, y)?)?;
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let mxy = tape.mul(mx, my)?;
    let sxx = tape.sub(exx, mx2)?;
    let syy = tape.sub(eyy, my2)?;
    let sxy = tape.sub(exy, mxy)?;
    let num = tape.mul(
        tape.shift(tape.scale(mxy, 2.0), p.c1()),
        tape.shift(tape.scale(sxy, 2.0), p.c2()),
    )?;
    let den = tape.mul(
        tape.shift(tape.add(mx2, my2)?, p.c1()),
        tape.shift(tape.add(sxx, syy)?, p.c2()),
    )?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

pub fn ssim_index<T: Scalar>(tape: &Tape<T>, x: Var, y: &Tensor5<T>, p: &SsimParams) -> Result<Var> {
    same_target("ssim_index", tape, x, y)?;
    let yv = tape.constant(y.clone());
    ssim_index_vars(tape, x, yv, p)
}

/// `1 − ssim_index`.
pub fn ssim_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: &Tensor5<T>, p: &SsimParams) -> Result<Var> {
    let s = ssim_index(tape, pred, target, p)?;
    Ok(tape.shift(tape.scale(s, -1.0), 1.0))
}

/// Description of an untrained loss network: `depth` blocks of
/// conv(`width`, `kernel`) + ReLU, with a 2× max pool after each 1-based block
/// index in `pool_after`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNetSpec {
    pub depth: usize,
    pub kernel: usize,
    pub width: usize,
    pub pool_after: Vec<usize>,
    pub init: InitScheme,
    /// Tap positions in the expanded layer list; `None` selects every ReLU
    /// output.
    pub taps: Option<Vec<usize>>,
}

pub const STUDIED_DEPTHS: [usize; 5] = [3, 5, 7, 9, 13];
pub const STUDIED_KERNELS: [usize; 4] = [3, 5, 7, 9];

impl LossNetSpec {
    /// Three 32-wide 3³ conv+ReLU blocks.
    pub fn simplenet(seed: u64) -> Self {
        LossNetSpec {
            depth: 3,
            kernel: 3,
            width: 32,
            pool_after: Vec::new(),
            init: InitScheme::new(InitKind::DefaultUniform, seed),
            taps: None,
        }
    }

    /// Depth 13, width 64, pooling after the first three blocks.
    pub fn deep(seed: u64) -> Self {
        LossNetSpec {
            depth: 13,
            width: 64,
            pool_after: vec![1, 2, 3],
            ..LossNetSpec::simplenet(seed)
        }
    }

    /// False when depth or kernel lies outside the grid that was studied.
    pub fn in_studied_range(&self) -> bool {
        STUDIED_DEPTHS.contains(&self.depth) && STUDIED_KERNELS.contains(&self.kernel)
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::invalid("loss network needs positive depth and width"));
        }
        if let Some(&bad) = self.pool_after.iter().find(|&&i| i == 0 || i >= self.depth) {
            return Err(Error::invalid(format!(
                "pool index {bad} must lie in 1..{}",
                self.depth
            )));
        }
        let mut layers = Vec::new();
        for i in 1..=self.depth {
            layers.push(LayerSpec::conv(self.width, self.kernel));
            layers.push(LayerSpec::Relu);
            if self.pool_after.contains(&i) {
                layers.push(LayerSpec::MaxPool);
            }
        }
        Ok(layers)
    }
}

/// A frozen loss network together with the positions it is tapped at.
#[derive(Clone, Debug)]
pub struct UplNet<T> {
    pub net: SequentialNet<T>,
    pub taps: Vec<usize>,
}

impl<T: Scalar> UplNet<T> {
    /// Convolutions plus pools.
    pub fn compute_layers(&self) -> usize {
        self.net
            .layers()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool))
            .count()
    }
}

pub fn build_upl_net<T: Scalar>(spec: &LossNetSpec) -> Result<UplNet<T>> {
    let net = build_named(1, &spec.layers()?, spec.init, true, "lossnet")?;
    let taps = match &spec.taps {
        Some(t) => t.clone(),
        None => net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i + 1)
            .collect(),
    };
    if let Some(&bad) = taps.iter().find(|&&t| t > net.layers().len()) {
        return Err(Error::invalid(format!("tap {bad} beyond the loss network")));
    }
    Ok(UplNet { net, taps })
}

/// Sum over taps of the batch-averaged squared feature distance, each
/// normalized by the tap's C·D·H·W.
pub fn upl_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    target: &Tensor5<T>,
    net: &SequentialNet<T>,
    taps: &[usize],
) -> Result<Var> {
    if taps.is_empty() {
        return Err(Error::invalid("upl_loss needs at least one tap"));
    }
    same_target("upl_loss", tape, pred, target)?;
    if target.shape().c() != 1 {
        return Err(Error::shape("upl_loss", "volumes must be single-channel"));
    }
    let t = tape.constant(target.clone());
    let fp = net.forward(tape, pred, taps)?;
    let ft = net.forward(tape, t, taps)?;
    let mut total: Option<Var> = None;
    for (&a, &b) in fp.taps.iter().zip(&ft.taps) {
        let d = tape.sub(a, b)?;
        let term = tape.mean(tape.square(d))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    L1,
    Ssim,
    Upl,
    /// uPL plus λ·L1.
    UplL1,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::L1, LossKind::Ssim, LossKind::Upl, LossKind::UplL1];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Ssim => "ssim",
            LossKind::Upl => "upl",
            LossKind::UplL1 => "upl+l1",
        }
    }

    pub fn uses_network(self) -> bool {
        matches!(self, LossKind::Upl | LossKind::UplL1)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "loss",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
    pub net: LossNetSpec,
    pub ssim: SsimParams,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            lambda: 0.0,
            net: LossNetSpec::simplenet(0),
            ssim: SsimParams::default(),
        }
    }
}

/// A ready-to-evaluate training loss.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    kind: LossKind,
    lambda: f64,
    ssim: SsimParams,
    upl: Option<UplNet<T>>,
}

pub fn make_loss<T: Scalar>(cfg: &LossConfig) -> Result<Loss<T>> {
    let upl = if cfg.kind.uses_network() {
        Some(build_upl_net(&cfg.net)?)
    } else {
        None
    };
    Ok(Loss {
        kind: cfg.kind,
        lambda: cfg.lambda,
        ssim: cfg.ssim,
        upl,
    })
}

impl<T: Scalar> Loss<T> {
    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// The frozen loss network, for losses that have one.
    pub fn network(&self) -> Option<&UplNet<T>> {
        self.upl.as_ref()
    }

    pub fn eval(&self, tape: &Tape<T>, pred: Var, target: &Tensor5<T>) -> Result<Var> {
        match self.kind {
            LossKind::L1 => l1_loss(tape, pred, target),
            LossKind::Ssim => ssim_loss(tape, pred, target, &self.ssim),
            LossKind::Upl | LossKind::UplL1 => {
                let u = self.upl.as_ref().expect("built with a network");
                let p = upl_loss(tape, pred, target, &u.net, &u.taps)?;
                if self.kind == LossKind::Upl || self.lambda == 0.0 {
                    return Ok(p);
                }
                let l1 = l1_loss(tape, pred, target)?;
                tape.add(p, tape.scale(l1, self.lambda))
            }
        }
    }
}
