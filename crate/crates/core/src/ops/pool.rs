use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor5};

pub(crate) fn pooled_shape(s: Shape) -> Result<Shape> {
    if s.d() < 2 || s.h() < 2 || s.w() < 2 {
        return Err(Error::shape(
            "maxpool3d",
            format!("spatial extent below window 2: {:?}", s.0),
        ));
    }
    Ok(Shape::new(s.n(), s.c(), s.d() / 2, s.h() / 2, s.w() / 2))
}

/// 2×2×2 max pool with stride 2. Returns the output and, per output
/// element, the linear input index that won (first maximum on ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<usize>)> {
    let s = x.shape();
    let os = pooled_shape(s)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let xd = x.data();
    for n in 0..os.n() {
        for c in 0..os.c() {
            for d in 0..os.d() {
                for h in 0..os.h() {
                    for w in 0..os.w() {
                        let mut best = s.index(n, c, 2 * d, 2 * h, 2 * w);
                        for kd in 0..2 {
                            for kh in 0..2 {
                                for kw in 0..2 {
                                    let i = s.index(n, c, 2 * d + kd, 2 * h + kh, 2 * w + kw);
                                    if xd[i] > xd[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(xd[best]);
                        arg.push(best);
                    }
                }
            }
        }
    }
    Ok((Tensor5::from_vec(os, out)?, arg))
}

pub(crate) fn maxpool_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    dy: &Tensor5<T>,
) -> Tensor5<T> {
    let mut dx = Tensor5::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}
