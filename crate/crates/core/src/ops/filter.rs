use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Normalized 1D Gaussian taps of length `2·radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian sigma must be > 0, got {sigma}"
        )));
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Zero-padded correlation with `taps` along one spatial axis (2 = D, 3 = H, 4 = W).
fn filter_axis<T: Scalar>(x: &Tensor5<T>, taps: &[T], axis: usize) -> Tensor5<T> {
    let s = x.shape();
    let r = (taps.len() / 2) as isize;
    let len = s.0[axis] as isize;
    let stride: usize = s.0[axis + 1..].iter().product();
    let outer: usize = s.0[..axis].iter().product();
    let mut out = Tensor5::zeros(s);
    let xd = x.data();
    let od = out.data_mut();
    let block = len as usize * stride;
    for o in 0..outer {
        let base = o * block;
        for i in 0..len {
            let dst = base + i as usize * stride;
            for (t, &wt) in taps.iter().enumerate() {
                let j = i + t as isize - r;
                if j < 0 || j >= len {
                    continue;
                }
                let src = base + j as usize * stride;
                for q in 0..stride {
                    od[dst + q] += wt * xd[src + q];
                }
            }
        }
    }
    out
}

/// Separable Gaussian filter over D, H and W. The kernel is symmetric and the
/// padding is zero, so the operator is self-adjoint and serves as its own backward.
pub(crate) fn separable_filter<T: Scalar>(x: &Tensor5<T>, taps: &[T]) -> Tensor5<T> {
    let a = filter_axis(x, taps, 4);
    let b = filter_axis(&a, taps, 3);
    filter_axis(&b, taps, 2)
}
