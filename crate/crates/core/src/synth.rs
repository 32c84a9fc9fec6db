//! Seeded line-structure phantoms and Rician degradation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhantomKind {
    /// Roots grow downwards from the top face.
    Root,
    /// A branching tree grows out from the centre.
    Vessel,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 2] = [PhantomKind::Root, PhantomKind::Vessel];

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Root => "root",
            PhantomKind::Vessel => "vessel",
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhantomKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "phantom kind",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub n_structures: usize,
    pub radius_range: [f64; 2],
    pub intensity_range: [f64; 2],
    pub branching_prob: f64,
    pub tortuosity: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, dims: [usize; 3], seed: u64) -> Self {
        match kind {
            PhantomKind::Root => PhantomSpec {
                kind,
                dims,
                n_structures: 6,
                radius_range: [0.7, 2.0],
                intensity_range: [0.6, 1.0],
                branching_prob: 0.03,
                tortuosity: 0.35,
                seed,
            },
            PhantomKind::Vessel => PhantomSpec {
                kind,
                dims,
                n_structures: 4,
                radius_range: [0.7, 2.5],
                intensity_range: [0.6, 1.0],
                branching_prob: 0.6,
                tortuosity: 0.25,
                seed,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let [r0, r1] = self.radius_range;
        let [a0, a1] = self.intensity_range;
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!("phantom dims {:?} must be ≥ 16", self.dims)));
        }
        if !(r0 >= 0.5 && r1 >= r0) {
            return Err(Error::invalid(format!("radius range {:?}", self.radius_range)));
        }
        if !(a0 > 0.0 && a1 >= a0 && a1 <= 1.0) {
            return Err(Error::invalid(format!("intensity range {:?}", self.intensity_range)));
        }
        if !(0.0..=1.0).contains(&self.branching_prob) || !(self.tortuosity >= 0.0) {
            return Err(Error::invalid("branching probability or tortuosity out of range"));
        }
        let limit = *self.dims.iter().min().expect("three dims") as f64 / 4.0;
        if r1 > limit {
            return Err(Error::invalid(format!(
                "radius {r1} cannot fit: exceeds a quarter of the smallest dimension ({limit})"
            )));
        }
        Ok(())
    }
}

/// A polyline with per-vertex radius and constant peak intensity. The cross
/// profile is `intensity · exp(−d² / 2r²)`, cut to zero beyond `3r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    pub points: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    pub intensity: f64,
}

const CUTOFF: f64 = 3.0;

/// Draws every tube into a zero volume, combining overlaps by maximum.
pub fn rasterize(dims: [usize; 3], tubes: &[Tube]) -> Volume {
    let mut out = Volume::zeros(dims);
    for tube in tubes {
        for (seg, rad) in tube.points.windows(2).zip(tube.radii.windows(2)) {
            draw_segment(&mut out, seg[0], seg[1], rad[0], rad[1], tube.intensity);
        }
        if tube.points.len() == 1 {
            let p = tube.points[0];
            draw_segment(&mut out, p, p, tube.radii[0], tube.radii[0], tube.intensity);
        }
    }
    out
}

fn draw_segment(v: &mut Volume, a: [f64; 3], b: [f64; 3], ra: f64, rb: f64, peak: f64) {
    let dims = v.dims();
    let reach = CUTOFF * ra.max(rb);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for k in 0..3 {
        let l = (a[k].min(b[k]) - reach).floor().max(0.0);
        let h = (a[k].max(b[k]) + reach).ceil().min(dims[k] as f64 - 1.0);
        if h < l {
            return;
        }
        lo[k] = l as usize;
        hi[k] = h as usize;
    }
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len2 = ab.iter().map(|x| x * x).sum::<f64>();
    for d in lo[0]..=hi[0] {
        for h in lo[1]..=hi[1] {
            for w in lo[2]..=hi[2] {
                let p = [d as f64, h as f64, w as f64];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dist2: f64 = (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum();
                let r = ra + t * (rb - ra);
                if dist2 > (CUTOFF * r).powi(2) {
                    continue;
                }
                let val = (peak * (-dist2 / (2.0 * r * r)).exp()) as f32;
                if val > v.at(d, h, w) {
                    v.set(d, h, w, val);
                }
            }
        }
    }
}

type Vec3 = [f64; 3];

fn unit(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vec3 {
    [0, 1, 2].map(|_| StandardNormal.sample(rng))
}

fn inside(p: Vec3, dims: [usize; 3]) -> bool {
    (0..3).all(|k| p[k] >= 0.0 && p[k] <= dims[k] as f64 - 1.0)
}

/// Random walk from `start` along a direction that drifts by `tortuosity`
/// per step and is pulled towards `bias` with weight `pull`; stops on
/// leaving the volume or after `max_len` steps.
fn walk(
    rng: &mut ChaCha8Rng,
    start: Vec3,
    dir: Vec3,
    bias: Vec3,
    pull: f64,
    tortuosity: f64,
    max_len: usize,
    dims: [usize; 3],
) -> Vec<Vec3> {
    let mut pts = vec![start];
    let mut p = start;
    let mut d = unit(dir);
    for _ in 0..max_len {
        let n = gaussian3(rng);
        d = unit([0, 1, 2].map(|k| d[k] + tortuosity * n[k] + pull * bias[k]));
        let next = [0, 1, 2].map(|k| p[k] + d[k]);
        if !inside(next, dims) {
            break;
        }
        pts.push(next);
        p = next;
    }
    pts
}

fn tapered(n: usize, r_start: f64, r_end: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![r_start; n];
    }
    (0..n)
        .map(|i| r_start + (r_end - r_start) * i as f64 / (n - 1) as f64)
        .collect()
}

fn root_tubes(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Tube> {
    let dims = spec.dims;
    let [rmin, rmax] = spec.radius_range;
    let [amin, amax] = spec.intensity_range;
    let margin = (rmax * CUTOFF).min(dims[1].min(dims[2]) as f64 / 4.0);
    let down = [1.0, 0.0, 0.0];
    let mut tubes = Vec::new();
    for _ in 0..spec.n_structures {
        let start = [
            0.0,
            rng.random_range(margin..dims[1] as f64 - margin),
            rng.random_range(margin..dims[2] as f64 - margin),
        ];
        let r0 = rng.random_range(rmin..=rmax);
        let a = rng.random_range(amin..=amax);
        let dir = [1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let pts = walk(rng, start, dir, down, 0.3, spec.tortuosity, 4 * dims[0], dims);
        let radii = tapered(pts.len(), r0, rmin);
        // lateral roots leave the main root at random points
        let mut laterals = Vec::new();
        for (i, p) in pts.iter().enumerate().skip(2) {
            if rng.random_bool(spec.branching_prob) {
                let side = unit([rng.random_range(-0.2..0.4), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let lp = walk(rng, *p, side, down, 0.1, spec.tortuosity, dims[0] / 3, dims);
                let r = (radii[i] * 0.7).max(rmin);
                laterals.push(Tube {
                    radii: tapered(lp.len(), r, rmin),
                    points: lp,
                    intensity: a,
                });
            }
        }
        tubes.push(Tube {
            points: pts,
            radii,
            intensity: a,
        });
        tubes.extend(laterals);
    }
    tubes
}

fn vessel_tubes(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Tube> {
    let dims = spec.dims;
    let [rmin, rmax] = spec.radius_range;
    let [amin, amax] = spec.intensity_range;
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let seg_len = (dims.iter().min().copied().unwrap_or(16) / 5).max(4);
    let shrink = 0.75;
    let mut tubes = Vec::new();
    // (start, direction, radius, intensity)
    let mut stack: Vec<(Vec3, Vec3, f64, f64)> = (0..spec.n_structures)
        .map(|_| {
            let a = rng.random_range(amin..=amax);
            (centre, gaussian3(rng), rmax, a)
        })
        .collect();
    stack.reverse();
    let mut budget = 256;
    while let Some((start, dir, r, a)) = stack.pop() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        let pts = walk(rng, start, dir, [0.0; 3], 0.0, spec.tortuosity, seg_len, dims);
        let end_r = (r * 0.9).max(rmin);
        let end = *pts.last().expect("walk keeps its start");
        let dir_end = if pts.len() >= 2 {
            let q = pts[pts.len() - 2];
            unit([end[0] - q[0], end[1] - q[1], end[2] - q[2]])
        } else {
            unit(dir)
        };
        let reached = pts.len() > seg_len;
        tubes.push(Tube {
            radii: tapered(pts.len(), r, end_r),
            points: pts,
            intensity: a,
        });
        if !reached {
            continue;
        }
        let child_r = end_r * shrink;
        if child_r < rmin {
            continue;
        }
        let children = if rng.random_bool(spec.branching_prob) { 2 } else { 1 };
        for _ in 0..children {
            let jitter = gaussian3(rng);
            let spread = if children == 2 { 0.8 } else { 0.3 };
            let d = unit([0, 1, 2].map(|k| dir_end[k] + spread * jitter[k]));
            let r_next = if children == 2 { child_r } else { end_r };
            stack.push((end, d, r_next, a));
        }
    }
    tubes
}

/// Clean ground-truth phantom with values in `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tubes = match spec.kind {
        PhantomKind::Root => root_tubes(spec, &mut rng),
        PhantomKind::Vessel => vessel_tubes(spec, &mut rng),
    };
    Ok(rasterize(spec.dims, &tubes))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation of each Gaussian component, relative to a unit data range.
    pub level: f64,
    pub seed: u64,
}

/// `√((v + n₁)² + n₂²)` with independent `n₁, n₂ ~ N(0, level²)`.
pub fn add_rician_noise(v: &Volume, spec: &NoiseSpec) -> Result<Volume> {
    if !(spec.level > 0.0) || !spec.level.is_finite() {
        return Err(Error::invalid(format!("noise level must be > 0, got {}", spec.level)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Normal::new(0.0, spec.level).expect("finite sigma");
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let n1: f64 = dist.sample(&mut rng);
            let n2: f64 = dist.sample(&mut rng);
            ((x as f64 + n1).powi(2) + n2 * n2).sqrt() as f32
        })
        .collect();
    Volume::new(v.dims(), v.voxel_size(), data)
}

/// Uniform cube offset for a crop of side `size`.
pub fn crop_offset(dims: [usize; 3], size: usize, rng: &mut impl Rng) -> Result<[usize; 3]> {
    if size == 0 || dims.iter().any(|&d| d < size) {
        return Err(Error::invalid(format!("crop {size} does not fit in {dims:?}")));
    }
    Ok(dims.map(|d| rng.random_range(0..=d - size)))
}

pub fn random_crop(v: &Volume, size: usize, rng: &mut impl Rng) -> Result<(Volume, [usize; 3])> {
    let off = crop_offset(v.dims(), size, rng)?;
    Ok((v.crop(off, [size; 3])?, off))
}

/// Crops two equally sized volumes at one shared offset.
pub fn random_crop_pair(a: &Volume, b: &Volume, size: usize, rng: &mut impl Rng) -> Result<(Volume, Volume, [usize; 3])> {
    a.same_dims(b)?;
    let off = crop_offset(a.dims(), size, rng)?;
    Ok((a.crop(off, [size; 3])?, b.crop(off, [size; 3])?, off))
}

/// Divides by the global maximum.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    let m = v.max();
    if !(m > 0.0) {
        return Err(Error::invalid("cannot normalize a volume whose maximum is not positive"));
    }
    let data = v.data().iter().map(|&x| x / m).collect();
    Volume::new(v.dims(), v.voxel_size(), data)
}
