//! Weight initialization schemes for convolution layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitKind {
    KaimingUniform,
    KaimingNormal,
    XavierUniform,
    XavierNormal,
    DefaultUniform,
}

impl InitKind {
    pub const ALL: [InitKind; 5] = [
        InitKind::KaimingUniform,
        InitKind::KaimingNormal,
        InitKind::XavierUniform,
        InitKind::XavierNormal,
        InitKind::DefaultUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitKind::KaimingUniform => "kaiming-uniform",
            InitKind::KaimingNormal => "kaiming-normal",
            InitKind::XavierUniform => "xavier-uniform",
            InitKind::XavierNormal => "xavier-normal",
            InitKind::DefaultUniform => "default-uniform",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "init scheme",
                name: s.to_string(),
            })
    }
}

/// A scheme name plus the seed that drives every draw made under it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        InitScheme { kind, seed }
    }

    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        Ok(InitScheme {
            kind: name.parse()?,
            seed,
        })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

enum Law {
    Uniform(f64),
    Normal(f64),
}

/// Fans of a `[out, in, kd, kh, kw]` weight tensor.
pub fn fans(shape: Shape) -> (usize, usize) {
    let receptive = shape.spatial();
    (shape.c() * receptive, shape.n() * receptive)
}

fn law(kind: InitKind, fan_in: usize, fan_out: usize) -> Law {
    let fi = fan_in as f64;
    let fio = (fan_in + fan_out) as f64;
    match kind {
        InitKind::KaimingUniform => Law::Uniform((6.0 / fi).sqrt()),
        InitKind::KaimingNormal => Law::Normal((2.0 / fi).sqrt()),
        InitKind::XavierUniform => Law::Uniform((6.0 / fio).sqrt()),
        InitKind::XavierNormal => Law::Normal((2.0 / fio).sqrt()),
        InitKind::DefaultUniform => Law::Uniform((1.0 / fi).sqrt()),
    }
}

/// Samples a weight tensor of the given shape under `kind`.
pub fn sample_weight<T: Scalar>(shape: Shape, kind: InitKind, rng: &mut ChaCha8Rng) -> Tensor5<T> {
    let (fan_in, fan_out) = fans(shape);
    let n = shape.numel();
    let data: Vec<T> = match law(kind, fan_in.max(1), fan_out.max(1)) {
        Law::Uniform(b) => (0..n).map(|_| T::of(rng.random_range(-b..=b))).collect(),
        Law::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
    };
    Tensor5::from_vec(shape, data).expect("sized to shape")
}

/// Weight and zero bias for a convolution with `cin` inputs, `cout` filters
/// and a cubic kernel of side `kernel`.
pub fn initialize_weights<T: Scalar>(
    cin: usize,
    cout: usize,
    kernel: usize,
    kind: InitKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    if kernel % 2 == 0 || cin == 0 || cout == 0 {
        return Err(Error::invalid(format!(
            "conv needs odd kernel and positive channels, got cin={cin} cout={cout} k={kernel}"
        )));
    }
    let w = sample_weight(Shape::new(cout, cin, kernel, kernel, kernel), kind, rng);
    let b = Tensor5::zeros(Shape::new(1, cout, 1, 1, 1));
    Ok((w, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(kind: InitKind, cin: usize, cout: usize, seed: u64) -> Tensor5<f64> {
        let mut rng = InitScheme::new(kind, seed).rng();
        initialize_weights(cin, cout, 3, kind, &mut rng).unwrap().0
    }

    #[test]
    fn default_uniform_bound_for_32_channels() {
        let bound = (1.0f64 / (32.0 * 27.0)).sqrt();
        assert!((bound - 0.03402).abs() < 5e-6);
        let w = draw(InitKind::DefaultUniform, 32, 32, 3);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // the draws should actually reach out towards the bound
        assert!(w.max_value().unwrap() > 0.9 * bound);
    }

    #[test]
    fn default_uniform_mean_within_three_sigma() {
        let kind = InitKind::DefaultUniform;
        let mut rng = InitScheme::new(kind, 11).rng();
        let w: Tensor5<f64> = sample_weight(Shape::new(1, 32, 3125, 1, 1), kind, &mut rng);
        let n = w.len() as f64;
        let bound = (1.0 / 32.0 / 3125.0f64).sqrt();
        let sd = bound / 3f64.sqrt();
        let mean = w.sum() / n;
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn kaiming_normal_std_over_1e5_draws() {
        let kind = InitKind::KaimingNormal;
        let mut rng = InitScheme::new(kind, 5).rng();
        // fan-in 32·27 = 864, ~1e5 samples
        let w: Tensor5<f64> = sample_weight(Shape::new(116, 32, 3, 3, 3), kind, &mut rng);
        let n = w.len() as f64;
        assert!(n >= 1e5);
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = (2.0f64 / 864.0).sqrt();
        assert!((var.sqrt() / target - 1.0).abs() < 0.05);
    }

    #[test]
    fn xavier_scales_with_fan_sum() {
        let w = draw(InitKind::XavierUniform, 4, 8, 1);
        let bound = (6.0f64 / ((4 + 8) * 27) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let mut rng = InitScheme::new(InitKind::XavierNormal, 2).rng();
        let w: Tensor5<f64> =
            sample_weight(Shape::new(64, 64, 5, 5, 5), InitKind::XavierNormal, &mut rng);
        let n = w.len() as f64;
        let sd = (w.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / (2.0 * 64.0 * 125.0)).sqrt();
        assert!((sd / target - 1.0).abs() < 0.02);
    }

    #[test]
    fn same_seed_same_bits_and_zero_bias() {
        for kind in InitKind::ALL {
            let a = draw(kind, 3, 5, 42);
            let b = draw(kind, 3, 5, 42);
            assert_eq!(a, b);
            assert_ne!(a, draw(kind, 3, 5, 43));
            let mut rng = InitScheme::new(kind, 0).rng();
            let (_, bias) = initialize_weights::<f32>(3, 5, 3, kind, &mut rng).unwrap();
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for kind in InitKind::ALL {
            assert_eq!(kind.name().parse::<InitKind>().unwrap(), kind);
        }
        assert!(matches!(
            InitScheme::parse("he-normal", 0),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = InitScheme::new(InitKind::KaimingUniform, 0).rng();
        assert!(initialize_weights::<f32>(1, 1, 2, InitKind::KaimingUniform, &mut rng).is_err());
    }
}
