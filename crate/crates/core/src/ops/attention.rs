//! Channel ("transposed") attention kernels. A feature map `[N, C, D, H, W]`
//! is viewed as N matrices of shape C × S with S = D·H·W; attention
//! matrices are stored as `[N, 1, 1, C, C]`.

use crate::tensor::{gemm, MatView, Scalar, Shape, Tensor5};

const NORM_EPS: f64 = 1e-12;

/// L2-normalizes every channel row over the spatial axis. Returns the output
/// and the per-row norms (clamped below by a tiny epsilon).
pub(crate) fn l2_normalize_rows<T: Scalar>(x: &Tensor5<T>) -> (Tensor5<T>, Vec<T>) {
    let s = x.shape();
    let vol = s.spatial();
    let mut y = Tensor5::zeros(s);
    let mut norms = Vec::with_capacity(s.n() * s.c());
    for (xr, yr) in x.data().chunks(vol).zip(y.data_mut().chunks_mut(vol)) {
        let nrm = xr
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .max(T::of(NORM_EPS));
        norms.push(nrm);
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = v / nrm;
        }
    }
    (y, norms)
}

pub(crate) fn l2_normalize_rows_backward<T: Scalar>(
    y: &Tensor5<T>,
    norms: &[T],
    dy: &Tensor5<T>,
) -> Tensor5<T> {
    let vol = y.shape().spatial();
    let mut dx = Tensor5::zeros(y.shape());
    let rows = y.data().chunks(vol).zip(dy.data().chunks(vol));
    for ((yr, gr), (dxr, &nrm)) in rows.zip(dx.data_mut().chunks_mut(vol).zip(norms)) {
        if nrm <= T::of(NORM_EPS) {
            // clamped: y = x / eps is linear
            for (d, &g) in dxr.iter_mut().zip(gr) {
                *d = g / nrm;
            }
            continue;
        }
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &g), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
            *d = (g - yv * dot) / nrm;
        }
    }
    dx
}

pub(crate) fn gram_shape(s: Shape) -> Shape {
    Shape::new(s.n(), 1, 1, s.c(), s.c())
}

/// `A[n] = Q[n] · K[n]ᵀ`.
pub(crate) fn gram<T: Scalar>(q: &Tensor5<T>, k: &Tensor5<T>) -> Tensor5<T> {
    let s = q.shape();
    let (c, vol) = (s.c(), s.spatial());
    let mut out = Tensor5::zeros(gram_shape(s));
    let m = MatView::row_major(c, vol);
    for n in 0..s.n() {
        gemm(
            q.batch_slice(n),
            m,
            k.batch_slice(n),
            m.t(),
            T::zero(),
            out.batch_slice_mut(n),
            MatView::row_major(c, c),
        );
    }
    out
}

/// Gradients of [`gram`]: dQ = dA·K, dK = dAᵀ·Q.
pub(crate) fn gram_backward<T: Scalar>(
    q: &Tensor5<T>,
    k: &Tensor5<T>,
    da: &Tensor5<T>,
    need: (bool, bool),
) -> (Option<Tensor5<T>>, Option<Tensor5<T>>) {
    let s = q.shape();
    let (c, vol) = (s.c(), s.spatial());
    let cc = MatView::row_major(c, c);
    let m = MatView::row_major(c, vol);
    let mut dq = need.0.then(|| Tensor5::zeros(s));
    let mut dk = need.1.then(|| Tensor5::zeros(s));
    for n in 0..s.n() {
        if let Some(dq) = dq.as_mut() {
            gemm(
                da.batch_slice(n),
                cc,
                k.batch_slice(n),
                m,
                T::zero(),
                dq.batch_slice_mut(n),
                m,
            );
        }
        if let Some(dk) = dk.as_mut() {
            gemm(
                da.batch_slice(n),
                cc.t(),
                q.batch_slice(n),
                m,
                T::zero(),
                dk.batch_slice_mut(n),
                m,
            );
        }
    }
    (dq, dk)
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let w = x.shape().w();
    let mut y = Tensor5::zeros(x.shape());
    for (xr, yr) in x.data().chunks(w).zip(y.data_mut().chunks_mut(w)) {
        let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            total += *o;
        }
        for o in yr.iter_mut() {
            *o = *o / total;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward<T: Scalar>(y: &Tensor5<T>, dy: &Tensor5<T>) -> Tensor5<T> {
    let w = y.shape().w();
    let mut dx = Tensor5::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks(w)
        .zip(dy.data().chunks(w))
        .zip(dx.data_mut().chunks_mut(w))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// `O[n] = A[n] · V[n]`.
pub(crate) fn attend<T: Scalar>(a: &Tensor5<T>, v: &Tensor5<T>) -> Tensor5<T> {
    let s = v.shape();
    let (c, vol) = (s.c(), s.spatial());
    let mut out = Tensor5::zeros(s);
    let m = MatView::row_major(c, vol);
    for n in 0..s.n() {
        gemm(
            a.batch_slice(n),
            MatView::row_major(c, c),
            v.batch_slice(n),
            m,
            T::zero(),
            out.batch_slice_mut(n),
            m,
        );
    }
    out
}

/// Gradients of [`attend`]: dA = dO·Vᵀ, dV = Aᵀ·dO.
pub(crate) fn attend_backward<T: Scalar>(
    a: &Tensor5<T>,
    v: &Tensor5<T>,
    dout: &Tensor5<T>,
    need: (bool, bool),
) -> (Option<Tensor5<T>>, Option<Tensor5<T>>) {
    let s = v.shape();
    let (c, vol) = (s.c(), s.spatial());
    let cc = MatView::row_major(c, c);
    let m = MatView::row_major(c, vol);
    let mut da = need.0.then(|| Tensor5::zeros(a.shape()));
    let mut dv = need.1.then(|| Tensor5::zeros(s));
    for n in 0..s.n() {
        if let Some(da) = da.as_mut() {
            gemm(
                dout.batch_slice(n),
                m,
                v.batch_slice(n),
                m.t(),
                T::zero(),
                da.batch_slice_mut(n),
                cc,
            );
        }
        if let Some(dv) = dv.as_mut() {
            gemm(
                a.batch_slice(n),
                cc.t(),
                dout.batch_slice(n),
                m,
                T::zero(),
                dv.batch_slice_mut(n),
                m,
            );
        }
    }
    (da, dv)
}
