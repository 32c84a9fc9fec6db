//! Reverse-mode automatic differentiation over [`Tensor5`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles.
//! [`Tape::backward`] walks the record in reverse and accumulates
//! gradients into every leaf that requires them. Frozen parameters and
//! constants are leaves that do not require gradients, and no gradient
//! work is done on their behalf.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{attention, conv, filter, norm, pool};
use crate::tensor::{Scalar, Shape, Tensor5};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named tensor owned by a network. Non-trainable parameters receive no
/// gradients and are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor5<T>,
    pub trainable: bool,
    id: ParamId,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor5<T>, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable,
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapKind {
    Square,
    Abs,
    Scale(f64),
    Shift(f64),
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZipKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Gelu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor5<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor5<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gaussian {
        x: Var,
        taps: Vec<T>,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
    },
    Zip {
        a: Var,
        b: Var,
        kind: ZipKind,
    },
    Map {
        x: Var,
        kind: MapKind,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    L2Rows {
        x: Var,
        norms: Vec<T>,
    },
    Gram {
        q: Var,
        k: Var,
    },
    Softmax(Var),
    Attend {
        a: Var,
        v: Var,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::Depthwise { .. } => "depthwise_conv3d",
            Op::Relu(_) => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Gelu(_) => "gelu",
            Op::BatchNorm { .. } => "batchnorm3d",
            Op::BatchNormEval { .. } => "batchnorm3d_eval",
            Op::LayerNorm { .. } => "channel_layernorm",
            Op::MaxPool { .. } => "maxpool3d",
            Op::Gaussian { .. } => "gaussian_filter3d",
            Op::Reduce { .. } => "reduce",
            Op::Zip { .. } => "zip",
            Op::Map { .. } => "map",
            Op::ScaleBy { .. } => "scale_by",
            Op::L2Rows { .. } => "l2_normalize",
            Op::Gram { .. } => "gram",
            Op::Softmax(_) => "softmax",
            Op::Attend { .. } => "attend",
        }
    }
}

struct Node<T> {
    value: Tensor5<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStatistics<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Gradients produced by [`Tape::backward`]; only leaves retain theirs.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor5<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor5<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter summed over every binding on the tape.
    pub fn param(&self, p: &Parameter<T>) -> Option<Tensor5<T>> {
        let mut out: Option<Tensor5<T>> = None;
        for &(id, v) in &self.params {
            if id != p.id() {
                continue;
            }
            if let Some(g) = self.wrt(v) {
                match out.as_mut() {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(ParamId, Var)>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor5<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor5<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: Tensor5<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; it requires a gradient iff it is trainable.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.borrow_mut().push((p.id(), v));
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor5<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.tag()
    }

    /// Parent handles of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes.borrow()[v.0].op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b } | Op::Depthwise { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::Relu(x) | Op::Gelu(x) | Op::Softmax(x) => vec![*x],
            Op::Prelu { x, slope } => vec![*x, *slope],
            Op::BatchNorm { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. }
            | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool { x, .. }
            | Op::Gaussian { x, .. }
            | Op::Reduce { x, .. }
            | Op::Map { x, .. }
            | Op::L2Rows { x, .. } => vec![*x],
            Op::Zip { a, b, .. } => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::Gram { q, k } => vec![*q, *k],
            Op::Attend { a, v } => vec![*a, *v],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa.0, sb.0)));
        }
        Ok(())
    }

    fn per_channel(&self, op: &'static str, x: Var, p: Var) -> Result<()> {
        let (c, n) = (self.shape(x).c(), self.shape(p).numel());
        if c != n {
            return Err(Error::shape(
                op,
                format!("{n} per-channel values for {c} channels"),
            ));
        }
        Ok(())
    }

    /// Same-padded 3D cross-correlation.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        conv::check_conv(self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let y = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|b| &nodes[b.0].value);
            conv::conv3d_forward(&nodes[x.0].value, &nodes[w.0].value, bias)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b }, rg))
    }

    /// Per-channel (grouped) convolution; weights are `[C, 1, Kd, Kh, Kw]`.
    pub fn depthwise_conv3d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.n() != xs.c()
            || ws.c() != 1
            || ws.d() % 2 == 0
            || ws.h() % 2 == 0
            || ws.w() % 2 == 0
        {
            return Err(Error::shape(
                "depthwise_conv3d",
                format!("weights {:?} for input {:?}", ws.0, xs.0),
            ));
        }
        if let Some(b) = b {
            self.per_channel("depthwise_conv3d", x, b)?;
        }
        let y = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|b| &nodes[b.0].value);
            conv::depthwise_forward(&nodes[x.0].value, &nodes[w.0].value, bias)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Depthwise { x, w, b }, rg))
    }

    pub fn relu(&self, x: Var) -> Var {
        let y = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    /// `x` where `x ≥ 0`, `slope[c]·x` otherwise.
    pub fn prelu(&self, x: Var, slope: Var) -> Result<Var> {
        self.per_channel("prelu", x, slope)?;
        let y = {
            let xv = self.value(x);
            let sv = self.value(slope);
            let s = xv.shape();
            let vol = s.spatial();
            let mut y = xv.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                if *v < T::zero() {
                    *v *= sv.data()[(i / vol) % s.c()];
                }
            }
            y
        };
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(y, Op::Prelu { x, slope }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::of(gelu_value(v.f64()).0));
        let rg = self.rg(x);
        self.push(y, Op::Gelu(x), rg)
    }

    /// Training-mode batch norm over (N, D, H, W) per channel.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStatistics<T>)> {
        self.per_channel("batchnorm3d", x, gamma)?;
        self.per_channel("batchnorm3d", x, beta)?;
        let fwd = {
            let nodes = self.nodes.borrow();
            norm::batchnorm_train(
                &nodes[x.0].value,
                nodes[gamma.0].value.data(),
                nodes[beta.0].value.data(),
                T::of(eps),
            )
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStatistics {
            mean: fwd.stats.mean,
            var_unbiased: fwd.stats.var_unbiased,
        };
        let v = self.push(
            fwd.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm using stored statistics.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.per_channel("batchnorm3d", x, gamma)?;
        self.per_channel("batchnorm3d", x, beta)?;
        if mean.len() != self.shape(x).c() || var.len() != mean.len() {
            return Err(Error::shape("batchnorm3d", "running statistics length"));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let y = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            let s = xv.shape();
            let vol = s.spatial();
            let mut y = xv.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                let c = (i / vol) % s.c();
                *v = g[c] * (*v - mean[c]) * inv_std[c] + b[c];
            }
            y
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Layer norm across channels at every voxel, with per-channel affine.
    pub fn channel_layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.per_channel("channel_layernorm", x, gamma)?;
        self.per_channel("channel_layernorm", x, beta)?;
        let fwd = {
            let nodes = self.nodes.borrow();
            norm::channel_layernorm(
                &nodes[x.0].value,
                nodes[gamma.0].value.data(),
                nodes[beta.0].value.data(),
                T::of(eps),
            )
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            fwd.y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
            rg,
        ))
    }

    /// 2×2×2 max pool, stride 2, floor on odd extents.
    pub fn maxpool3d(&self, x: Var) -> Result<Var> {
        let (y, argmax) = pool::maxpool_forward(&self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    /// Separable normalized Gaussian filter with zero padding.
    pub fn gaussian_filter3d(&self, x: Var, sigma: f64, radius: usize) -> Result<Var> {
        let taps: Vec<T> = filter::gaussian_kernel(sigma, radius)?
            .into_iter()
            .map(T::of)
            .collect();
        let y = filter::separable_filter(&self.value(x), &taps);
        let rg = self.rg(x);
        Ok(self.push(y, Op::Gaussian { x, taps }, rg))
    }

    pub fn reduce(&self, x: Var, kind: ReduceKind) -> Result<Var> {
        let total = {
            let xv = self.value(x);
            if xv.is_empty() {
                return Err(Error::Empty("reduce"));
            }
            let s = xv.sum();
            match kind {
                ReduceKind::Sum => s,
                ReduceKind::Mean => s / T::of(xv.len() as f64),
            }
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor5::scalar(total), Op::Reduce { x, kind }, rg))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum)
    }

    pub fn zip(&self, a: Var, b: Var, kind: ZipKind) -> Result<Var> {
        self.same_shape("zip", a, b)?;
        let y = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let f: fn(T, T) -> T = match kind {
                ZipKind::Add => |p, q| p + q,
                ZipKind::Sub => |p, q| p - q,
                ZipKind::Mul => |p, q| p * q,
                ZipKind::Div => |p, q| p / q,
            };
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor5::from_vec(av.shape(), data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Zip { a, b, kind }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipKind::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipKind::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipKind::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, ZipKind::Div)
    }

    pub fn map(&self, x: Var, kind: MapKind) -> Result<Var> {
        let y = {
            let xv = self.value(x);
            match kind {
                MapKind::Square => xv.map(|v| v * v),
                MapKind::Abs => xv.map(|v| v.abs()),
                MapKind::Scale(a) => xv.map(|v| v * T::of(a)),
                MapKind::Shift(b) => xv.map(|v| v + T::of(b)),
                MapKind::Sqrt => {
                    if let Some(&neg) = xv.data().iter().find(|v| **v < T::zero()) {
                        return Err(Error::NegativeSqrt(neg.f64()));
                    }
                    xv.map(|v| v.sqrt())
                }
            }
        };
        let rg = self.rg(x);
        Ok(self.push(y, Op::Map { x, kind }, rg))
    }

    pub fn square(&self, x: Var) -> Var {
        self.map(x, MapKind::Square).expect("square is total")
    }

    pub fn scale(&self, x: Var, a: f64) -> Var {
        self.map(x, MapKind::Scale(a)).expect("scale is total")
    }

    pub fn shift(&self, x: Var, b: f64) -> Var {
        self.map(x, MapKind::Shift(b)).expect("shift is total")
    }

    /// Multiplies every element by a single-element tensor.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        if !self.shape(s).is_scalar() {
            return Err(Error::shape(
                "scale_by",
                format!("factor shape {:?}", self.shape(s).0),
            ));
        }
        let f = self.value(s).item();
        let y = self.value(x).map(|v| v * f);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(y, Op::ScaleBy { x, s }, rg))
    }

    /// L2-normalizes each (batch, channel) row over the spatial axes.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let (y, norms) = attention::l2_normalize_rows(&self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::L2Rows { x, norms }, rg)
    }

    /// Channel Gram matrix `Q·Kᵀ` of shape `[N, 1, 1, C, C]`.
    pub fn gram(&self, q: Var, k: Var) -> Result<Var> {
        self.same_shape("gram", q, k)?;
        let y = {
            let nodes = self.nodes.borrow();
            attention::gram(&nodes[q.0].value, &nodes[k.0].value)
        };
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(y, Op::Gram { q, k }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let y = attention::softmax_rows(&self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Softmax(x), rg)
    }

    /// Applies a `[N, 1, 1, C, C]` channel-mixing matrix to `[N, C, D, H, W]` values.
    pub fn attend(&self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sa != attention::gram_shape(sv) {
            return Err(Error::shape("attend", format!("{:?} vs {:?}", sa.0, sv.0)));
        }
        let y = {
            let nodes = self.nodes.borrow();
            attention::attend(&nodes[a.0].value, &nodes[v.0].value)
        };
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(y, Op::Attend { a, v }, rg))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let ls = nodes[loss.0].value.shape();
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls.0));
        }
        let mut grads: Vec<Option<Tensor5<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor5::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

/// GELU (tanh form) value and derivative.
fn gelu_value(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor5<T>>], v: Var, g: Tensor5<T>) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

fn per_channel_sum<T: Scalar>(s: Shape, data: &[T], mut f: impl FnMut(usize, T)) {
    let vol = s.spatial();
    for (i, &v) in data.iter().enumerate() {
        f((i / vol) % s.c(), v);
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor5<T>,
    grads: &mut [Option<Tensor5<T>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b } | Op::Depthwise { x, w, b } => {
            let need = (rg(*x), rg(*w), b.is_some_and(|b| rg(b)));
            let bs = b.map(|b| val(b).shape());
            let out = if matches!(node.op, Op::Conv { .. }) {
                conv::conv3d_backward(val(*x), val(*w), bs, g, need)
            } else {
                conv::depthwise_backward(val(*x), val(*w), bs, g, need)
            };
            if let Some(dx) = out.dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = out.dw {
                accumulate(grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (out.db, b) {
                accumulate(grads, *b, db);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(grads, *x, Tensor5::from_vec(xv.shape(), data)?);
        }
        Op::Prelu { x, slope } => {
            let xv = val(*x);
            let sv = val(*slope);
            let s = xv.shape();
            let vol = s.spatial();
            if rg(*x) {
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(i, (&v, &gv))| {
                        if v >= T::zero() {
                            gv
                        } else {
                            gv * sv.data()[(i / vol) % s.c()]
                        }
                    })
                    .collect();
                accumulate(grads, *x, Tensor5::from_vec(s, data)?);
            }
            if rg(*slope) {
                let mut ds = Tensor5::zeros(sv.shape());
                for (i, (&v, &gv)) in xv.data().iter().zip(g.data()).enumerate() {
                    if v < T::zero() {
                        ds.data_mut()[(i / vol) % s.c()] += gv * v;
                    }
                }
                accumulate(grads, *slope, ds);
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| gv * T::of(gelu_value(v.f64()).1))
                .collect();
            accumulate(grads, *x, Tensor5::from_vec(xv.shape(), data)?);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gm = val(*gamma);
            let (dx, dg, db) = norm::batchnorm_train_backward(xhat, inv_std, gm.data(), g);
            if rg(*x) {
                accumulate(grads, *x, dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, Tensor5::from_vec(gm.shape(), dg)?);
            }
            if rg(*beta) {
                accumulate(grads, *beta, Tensor5::from_vec(val(*beta).shape(), db)?);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let xv = val(*x);
            let gm = val(*gamma);
            let s = xv.shape();
            let vol = s.spatial();
            if rg(*x) {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let c = (i / vol) % s.c();
                        gv * gm.data()[c] * inv_std[c]
                    })
                    .collect();
                accumulate(grads, *x, Tensor5::from_vec(s, data)?);
            }
            if rg(*gamma) {
                let mut dg = Tensor5::zeros(gm.shape());
                for (i, (&v, &gv)) in xv.data().iter().zip(g.data()).enumerate() {
                    let c = (i / vol) % s.c();
                    dg.data_mut()[c] += gv * (v - mean[c]) * inv_std[c];
                }
                accumulate(grads, *gamma, dg);
            }
            if rg(*beta) {
                let mut db = Tensor5::zeros(val(*beta).shape());
                per_channel_sum(s, g.data(), |c, gv| db.data_mut()[c] += gv);
                accumulate(grads, *beta, db);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gm = val(*gamma);
            let (dx, dg, db) = norm::channel_layernorm_backward(xhat, inv_std, gm.data(), g);
            if rg(*x) {
                accumulate(grads, *x, dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, Tensor5::from_vec(gm.shape(), dg)?);
            }
            if rg(*beta) {
                accumulate(grads, *beta, Tensor5::from_vec(val(*beta).shape(), db)?);
            }
        }
        Op::MaxPool { x, argmax } => {
            accumulate(
                grads,
                *x,
                pool::maxpool_backward(val(*x).shape(), argmax, g),
            );
        }
        Op::Gaussian { x, taps } => {
            accumulate(grads, *x, filter::separable_filter(g, taps));
        }
        Op::Reduce { x, kind } => {
            let s = val(*x).shape();
            let gv = g.item();
            let fill = match kind {
                ReduceKind::Sum => gv,
                ReduceKind::Mean => gv / T::of(s.numel() as f64),
            };
            accumulate(grads, *x, Tensor5::full(s, fill));
        }
        Op::Zip { a, b, kind } => {
            let (av, bv) = (val(*a), val(*b));
            let s = av.shape();
            let (ga, gb): (Option<Vec<T>>, Option<Vec<T>>) = match kind {
                ZipKind::Add => (Some(g.data().to_vec()), Some(g.data().to_vec())),
                ZipKind::Sub => (
                    Some(g.data().to_vec()),
                    Some(g.data().iter().map(|&v| -v).collect()),
                ),
                ZipKind::Mul => (
                    Some(
                        g.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&gv, &q)| gv * q)
                            .collect(),
                    ),
                    Some(
                        g.data()
                            .iter()
                            .zip(av.data())
                            .map(|(&gv, &p)| gv * p)
                            .collect(),
                    ),
                ),
                ZipKind::Div => (
                    Some(
                        g.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&gv, &q)| gv / q)
                            .collect(),
                    ),
                    Some(
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&gv, (&p, &q))| -gv * p / (q * q))
                            .collect(),
                    ),
                ),
            };
            if let (true, Some(ga)) = (rg(*a), ga) {
                accumulate(grads, *a, Tensor5::from_vec(s, ga)?);
            }
            if let (true, Some(gb)) = (rg(*b), gb) {
                accumulate(grads, *b, Tensor5::from_vec(s, gb)?);
            }
        }
        Op::Map { x, kind } => {
            let xv = val(*x);
            let data: Vec<T> = match kind {
                MapKind::Square => xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| T::of(2.0) * v * gv)
                    .collect(),
                MapKind::Abs => xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
                MapKind::Scale(a) => g.data().iter().map(|&gv| gv * T::of(*a)).collect(),
                MapKind::Shift(_) => g.data().to_vec(),
                MapKind::Sqrt => node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv / (T::of(2.0) * y))
                    .collect(),
            };
            accumulate(grads, *x, Tensor5::from_vec(xv.shape(), data)?);
        }
        Op::ScaleBy { x, s } => {
            let xv = val(*x);
            let f = val(*s).item();
            if rg(*x) {
                accumulate(grads, *x, g.map(|gv| gv * f));
            }
            if rg(*s) {
                let d: T = xv.data().iter().zip(g.data()).map(|(&v, &gv)| v * gv).sum();
                accumulate(grads, *s, Tensor5::full(val(*s).shape(), d));
            }
        }
        Op::L2Rows { x, norms } => {
            accumulate(
                grads,
                *x,
                attention::l2_normalize_rows_backward(&node.value, norms, g),
            );
        }
        Op::Gram { q, k } => {
            let (dq, dk) = attention::gram_backward(val(*q), val(*k), g, (rg(*q), rg(*k)));
            if let Some(dq) = dq {
                accumulate(grads, *q, dq);
            }
            if let Some(dk) = dk {
                accumulate(grads, *k, dk);
            }
        }
        Op::Softmax(x) => {
            accumulate(grads, *x, attention::softmax_rows_backward(&node.value, g));
        }
        Op::Attend { a, v } => {
            let (da, dv) = attention::attend_backward(val(*a), val(*v), g, (rg(*a), rg(*v)));
            if let Some(da) = da {
                accumulate(grads, *a, da);
            }
            if let Some(dv) = dv {
                accumulate(grads, *v, dv);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
