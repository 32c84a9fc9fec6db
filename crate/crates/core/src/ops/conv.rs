//! Same-padded 3D cross-correlation (dense and depthwise).

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Scalar, Shape, Tensor5};

/// Upper bound on im2col buffer elements; larger volumes are processed in depth slabs.
const COL_BUDGET: usize = 1 << 22;

/// Visits every valid (destination, source) run for a spatial shift of
/// `(od, oh, ow)` under zero padding, restricted to output depths `d0..d1`.
/// Destination offsets are relative to depth `d0`.
#[inline]
fn for_each_run(
    dims: (usize, usize, usize),
    shift: (isize, isize, isize),
    d0: usize,
    d1: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (dd, hh, ww) = dims;
    let (od, oh, ow) = shift;
    let w_lo = (-ow).max(0) as usize;
    let w_hi = (ww as isize - ow).clamp(0, ww as isize) as usize;
    if w_lo >= w_hi {
        return;
    }
    let len = w_hi - w_lo;
    for d in d0..d1 {
        let sd = d as isize + od;
        if sd < 0 || sd >= dd as isize {
            continue;
        }
        for h in 0..hh {
            let sh = h as isize + oh;
            if sh < 0 || sh >= hh as isize {
                continue;
            }
            let dst = ((d - d0) * hh + h) * ww + w_lo;
            let src = (sd as usize * hh + sh as usize) * ww + (w_lo as isize + ow) as usize;
            f(dst, src, len);
        }
    }
}

/// Kernel extents (depth, height, width); each odd.
pub(crate) type Kernel = [usize; 3];

fn taps(k: Kernel) -> usize {
    k[0] * k[1] * k[2]
}

fn shifts(k: Kernel) -> impl Iterator<Item = (isize, isize, isize)> {
    let p = k.map(|v| (v / 2) as isize);
    (0..k[0] as isize).flat_map(move |kd| {
        (0..k[1] as isize)
            .flat_map(move |kh| (0..k[2] as isize).map(move |kw| (kd - p[0], kh - p[1], kw - p[2])))
    })
}

fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: (usize, usize, usize),
    k: Kernel,
    d0: usize,
    d1: usize,
    cols: &mut [T],
) {
    let (dd, hh, ww) = dims;
    let vol = dd * hh * ww;
    let sc = (d1 - d0) * hh * ww;
    cols[..cin * taps(k) * sc].fill(T::zero());
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * vol..(ci + 1) * vol];
        for shift in shifts(k) {
            let dst = &mut cols[row * sc..(row + 1) * sc];
            for_each_run(dims, shift, d0, d1, |o, s, len| {
                dst[o..o + len].copy_from_slice(&xc[s..s + len]);
            });
            row += 1;
        }
    }
}

fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    dims: (usize, usize, usize),
    k: Kernel,
    d0: usize,
    d1: usize,
    dx: &mut [T],
) {
    let (dd, hh, ww) = dims;
    let vol = dd * hh * ww;
    let sc = (d1 - d0) * hh * ww;
    let mut row = 0;
    for ci in 0..cin {
        let dxc = &mut dx[ci * vol..(ci + 1) * vol];
        for shift in shifts(k) {
            let src = &cols[row * sc..(row + 1) * sc];
            for_each_run(dims, shift, d0, d1, |o, s, len| {
                for (a, &b) in dxc[s..s + len].iter_mut().zip(&src[o..o + len]) {
                    *a += b;
                }
            });
            row += 1;
        }
    }
}

fn kernel_of(w: Shape) -> Kernel {
    [w.d(), w.h(), w.w()]
}

pub(crate) fn check_conv(x: Shape, w: Shape, bias: Option<Shape>) -> Result<Kernel> {
    let k = kernel_of(w);
    if k.iter().any(|&v| v % 2 == 0) {
        return Err(Error::invalid(format!(
            "conv3d kernel extents {k:?} must be odd"
        )));
    }
    if w.c() != x.c() {
        return Err(Error::shape(
            "conv3d",
            format!("input has {} channels, weights expect {}", x.c(), w.c()),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != w.n() {
            return Err(Error::shape(
                "conv3d",
                format!("bias has {} entries for {} filters", b.numel(), w.n()),
            ));
        }
    }
    Ok(k)
}

fn slab_depth(rows: usize, plane: usize, depth: usize) -> usize {
    (COL_BUDGET / (rows * plane).max(1)).clamp(1, depth)
}

/// Forward pass; weights are `[Cout, Cin, Kd, Kh, Kw]`, each extent odd.
pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    bias: Option<&Tensor5<T>>,
) -> Tensor5<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin, k) = (ws.n(), ws.c(), kernel_of(ws));
    let pointwise = taps(k) == 1;
    let dims = (xs.d(), xs.h(), xs.w());
    let plane = xs.h() * xs.w();
    let vol = xs.spatial();
    let rows = cin * taps(k);
    let mut out = Tensor5::zeros(xs.with_channels(cout));
    let slab = slab_depth(rows, plane, xs.d());
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * slab * plane]
    };
    let wv = MatView::row_major(cout, rows);
    for n in 0..xs.n() {
        let xn = x.batch_slice(n);
        let on = out.batch_slice_mut(n);
        let mut d0 = 0;
        while d0 < xs.d() {
            let d1 = (d0 + slab).min(xs.d());
            let sc = (d1 - d0) * plane;
            let cv = MatView {
                rows: cout,
                cols: sc,
                rs: vol,
                cs: 1,
            };
            if pointwise {
                let bv = MatView {
                    rows: cin,
                    cols: sc,
                    rs: vol,
                    cs: 1,
                };
                gemm(
                    w.data(),
                    wv,
                    &xn[d0 * plane..],
                    bv,
                    T::zero(),
                    &mut on[d0 * plane..],
                    cv,
                );
            } else {
                im2col(xn, cin, dims, k, d0, d1, &mut cols);
                let bv = MatView::row_major(rows, sc);
                gemm(
                    w.data(),
                    wv,
                    &cols,
                    bv,
                    T::zero(),
                    &mut on[d0 * plane..],
                    cv,
                );
            }
            d0 = d1;
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut on[co * vol..(co + 1) * vol] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor5<T>>,
    pub dw: Option<Tensor5<T>>,
    pub db: Option<Tensor5<T>>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    bias_shape: Option<Shape>,
    dy: &Tensor5<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin, k) = (ws.n(), ws.c(), kernel_of(ws));
    let pointwise = taps(k) == 1;
    let dims = (xs.d(), xs.h(), xs.w());
    let plane = xs.h() * xs.w();
    let vol = xs.spatial();
    let rows = cin * taps(k);
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor5::zeros(xs));
    let mut dw = need_dw.then(|| Tensor5::zeros(ws));
    let slab = slab_depth(rows, plane, xs.d());
    let mut cols = if pointwise || !(need_dx || need_dw) {
        Vec::new()
    } else {
        vec![T::zero(); rows * slab * plane]
    };
    let wv = MatView::row_major(cout, rows);
    if need_dx || need_dw {
        for n in 0..xs.n() {
            let xn = x.batch_slice(n);
            let dyn_ = dy.batch_slice(n);
            let mut d0 = 0;
            while d0 < xs.d() {
                let d1 = (d0 + slab).min(xs.d());
                let sc = (d1 - d0) * plane;
                let dyv = MatView {
                    rows: cout,
                    cols: sc,
                    rs: vol,
                    cs: 1,
                };
                let dyc = &dyn_[d0 * plane..];
                if pointwise {
                    let xv = MatView {
                        rows: cin,
                        cols: sc,
                        rs: vol,
                        cs: 1,
                    };
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            dyc,
                            dyv,
                            &xn[d0 * plane..],
                            xv.t(),
                            T::one(),
                            dw.data_mut(),
                            wv,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxn = &mut dx.batch_slice_mut(n)[d0 * plane..];
                        gemm(w.data(), wv.t(), dyc, dyv, T::zero(), dxn, xv);
                    }
                } else {
                    let cv = MatView::row_major(rows, sc);
                    if let Some(dw) = dw.as_mut() {
                        im2col(xn, cin, dims, k, d0, d1, &mut cols);
                        gemm(dyc, dyv, &cols, cv.t(), T::one(), dw.data_mut(), wv);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(w.data(), wv.t(), dyc, dyv, T::zero(), &mut cols, cv);
                        col2im_add(&cols, cin, dims, k, d0, d1, dx.batch_slice_mut(n));
                    }
                }
                d0 = d1;
            }
        }
    }
    let db = match (need_db, bias_shape) {
        (true, Some(bs)) => {
            let mut db = vec![T::zero(); cout];
            for n in 0..xs.n() {
                let dyn_ = dy.batch_slice(n);
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += dyn_[co * vol..(co + 1) * vol].iter().copied().sum::<T>();
                }
            }
            Some(Tensor5::from_vec(bs, db).expect("bias shape"))
        }
        _ => None,
    };
    ConvGrads { dx, dw, db }
}

/// Depthwise forward; weights are `[C, 1, K, K, K]`.
pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    bias: Option<&Tensor5<T>>,
) -> Tensor5<T> {
    let xs = x.shape();
    let k = kernel_of(w.shape());
    let kk = taps(k);
    let dims = (xs.d(), xs.h(), xs.w());
    let vol = xs.spatial();
    let mut out = Tensor5::zeros(xs);
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let off = (n * xs.c() + c) * vol;
            let xc = &x.data()[off..off + vol];
            let oc = &mut out.data_mut()[off..off + vol];
            let wc = &w.data()[c * kk..(c + 1) * kk];
            for (&wt, shift) in wc.iter().zip(shifts(k)) {
                for_each_run(dims, shift, 0, dims.0, |o, s, len| {
                    for (a, &b) in oc[o..o + len].iter_mut().zip(&xc[s..s + len]) {
                        *a += wt * b;
                    }
                });
            }
            if let Some(b) = bias {
                let bv = b.data()[c];
                oc.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    bias_shape: Option<Shape>,
    dy: &Tensor5<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let k = kernel_of(w.shape());
    let dims = (xs.d(), xs.h(), xs.w());
    let vol = xs.spatial();
    let kk = taps(k);
    let mut dx = need.0.then(|| Tensor5::zeros(xs));
    let mut dw = need.1.then(|| Tensor5::zeros(w.shape()));
    let mut db = match (need.2, bias_shape) {
        (true, Some(bs)) => Some(Tensor5::zeros(bs)),
        _ => None,
    };
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let off = (n * xs.c() + c) * vol;
            let xc = &x.data()[off..off + vol];
            let dyc = &dy.data()[off..off + vol];
            for (tap, shift) in shifts(k).enumerate() {
                let wt = w.data()[c * kk + tap];
                let mut acc = T::zero();
                for_each_run(dims, shift, 0, dims.0, |o, s, len| {
                    if let Some(dx) = dx.as_mut() {
                        let dxc = &mut dx.data_mut()[off..off + vol];
                        for (a, &g) in dxc[s..s + len].iter_mut().zip(&dyc[o..o + len]) {
                            *a += wt * g;
                        }
                    }
                    if dw.is_some() {
                        for (&g, &v) in dyc[o..o + len].iter().zip(&xc[s..s + len]) {
                            acc += g * v;
                        }
                    }
                });
                if let Some(dw) = dw.as_mut() {
                    dw.data_mut()[c * kk + tap] += acc;
                }
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[c] += dyc.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}
