//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use upl::{SsimParams, Tensor5};

/// Zero-padded "same" cross-correlation with odd per-axis kernel extents.
pub fn naive_conv3d(x: &Tensor5<f64>, w: &Tensor5<f64>, bias: Option<&[f64]>) -> Tensor5<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let k = [ws.d() as isize, ws.h() as isize, ws.w() as isize];
    let dims = [xs.d() as isize, xs.h() as isize, xs.w() as isize];
    Tensor5::from_fn(xs.with_channels(ws.n()), |[n, co, d, h, wi]| {
        let mut acc = bias.map_or(0.0, |b| b[co]);
        for ci in 0..xs.c() {
            for a in 0..k[0] {
                for b in 0..k[1] {
                    for c in 0..k[2] {
                        let s = [d as isize + a - k[0] / 2, h as isize + b - k[1] / 2, wi as isize + c - k[2] / 2];
                        if (0..3).any(|i| s[i] < 0 || s[i] >= dims[i]) {
                            continue;
                        }
                        acc += w.at([co, ci, a as usize, b as usize, c as usize])
                            * x.at([n, ci, s[0] as usize, s[1] as usize, s[2] as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Windowed SSIM with explicit loops: the Gaussian window is cut at the
/// volume boundary and renormalized over the voxels that remain.
pub fn brute_ssim(x: &Tensor5<f64>, y: &Tensor5<f64>, p: &SsimParams) -> f64 {
    let s = x.shape();
    let r = p.radius as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * p.sigma * p.sigma)).exp()).collect();
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let dims = [s.d() as isize, s.h() as isize, s.w() as isize];
    let mut total = 0.0;
    for n in 0..s.n() {
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let mut acc = [0.0f64; 6];
                    for a in -r..=r {
                        for b in -r..=r {
                            for c in -r..=r {
                                let q = [d + a, h + b, w + c];
                                if (0..3).any(|i| q[i] < 0 || q[i] >= dims[i]) {
                                    continue;
                                }
                                let wt = g[(a + r) as usize] * g[(b + r) as usize] * g[(c + r) as usize];
                                let idx = [n, 0, q[0] as usize, q[1] as usize, q[2] as usize];
                                let (xv, yv) = (x.at(idx), y.at(idx));
                                for (slot, v) in acc.iter_mut().zip([1.0, xv, yv, xv * xv, yv * yv, xv * yv]) {
                                    *slot += wt * v;
                                }
                            }
                        }
                    }
                    let [ws, sx, sy, sxx, syy, sxy] = acc;
                    let (mx, my) = (sx / ws, sy / ws);
                    let vx = sxx / ws - mx * mx;
                    let vy = syy / ws - my * my;
                    let cxy = sxy / ws - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
        }
    }
    total / (s.n() as f64 * (dims[0] * dims[1] * dims[2]) as f64)
}

/// Perceptual distance of a conv+ReLU stack given as (weight, bias) pairs:
/// for each tapped layer j, the squared feature difference summed over all
/// elements and divided by C·D·H·W, averaged over the batch.
pub fn perceptual_distance(layers: &[(Tensor5<f64>, Tensor5<f64>)], tapped: &[usize], a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    let relu = |t: Tensor5<f64>| Tensor5::from_fn(t.shape(), |i| t.at(i).max(0.0));
    let (mut fa, mut fb) = (a.clone(), b.clone());
    let batch = a.shape().n() as f64;
    let mut total = 0.0;
    for (j, (w, bias)) in layers.iter().enumerate() {
        fa = relu(naive_conv3d(&fa, w, Some(bias.data())));
        fb = relu(naive_conv3d(&fb, w, Some(bias.data())));
        if tapped.contains(&(j + 1)) {
            let s = fa.shape();
            let chw = (s.c() * s.d() * s.h() * s.w()) as f64;
            let sq: f64 = fa.data().iter().zip(fb.data()).map(|(p, q)| (p - q).powi(2)).sum();
            total += sq / chw / batch;
        }
    }
    total
}
