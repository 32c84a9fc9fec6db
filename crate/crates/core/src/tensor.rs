//! Dense 5-axis tensors laid out as (batch, channel, depth, height, width)
//! with width varying fastest.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

/// Real scalar types a tensor can hold.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a·b + beta·c` for strided row/column-major operands.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view used by [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// One past the largest offset touched.
    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Bounds-checked `c = a·b + beta·c`.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.extent() <= a.len() && bv.extent() <= b.len() && cv.extent() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Extents of the five axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape([n, c, d, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn d(&self) -> usize {
        self.0[2]
    }
    pub fn h(&self) -> usize {
        self.0[3]
    }
    pub fn w(&self) -> usize {
        self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Voxels per channel, D·H·W.
    pub fn spatial(&self) -> usize {
        self.d() * self.h() * self.w()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c() + c) * self.d() + d) * self.h() + h) * self.w() + w
    }

    pub fn with_channels(&self, c: usize) -> Shape {
        Shape([self.n(), c, self.d(), self.h(), self.w()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor5 {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor5::full(Shape::SCALAR, v)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "Tensor5::from_vec",
                format!("{} values for shape {:?}", data.len(), shape.0),
            ));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for d in 0..shape.d() {
                    for h in 0..shape.h() {
                        for w in 0..shape.w() {
                            data.push(f([n, c, d, h, w]));
                        }
                    }
                }
            }
        }
        Tensor5 { shape, data }
    }

    /// Seeded i.i.d. uniform samples in `[lo, hi)`.
    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, idx: [usize; 5]) -> T {
        self.data[self.shape.index(idx[0], idx[1], idx[2], idx[3], idx[4])]
    }

    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let i = self.shape.index(idx[0], idx[1], idx[2], idx[3], idx[4]);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape.0, shape.0),
            ));
        }
        Ok(Tensor5 {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::max)
    }

    pub fn min_value(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::min)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor5<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Contiguous block of one batch element.
    pub fn batch_slice(&self, n: usize) -> &[T] {
        let per = self.shape.numel() / self.shape.n().max(1);
        &self.data[n * per..(n + 1) * per]
    }

    pub fn batch_slice_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.shape.numel() / self.shape.n().max(1);
        &mut self.data[n * per..(n + 1) * per]
    }

    /// Stacks single-element batches along the batch axis.
    pub fn stack(parts: &[Tensor5<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("Tensor5::stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            let ps = p.shape;
            if ps.0[1..] != s.0[1..] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", ps.0, s.0)));
            }
            n += ps.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor5 {
            shape: Shape([n, s.c(), s.d(), s.h(), s.w()]),
            data,
        })
    }
}
