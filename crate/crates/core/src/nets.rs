//! Denoising networks: DnCNN, a residual PReLU network, and a sequential
//! Restormer-style transformer with channel attention.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{BatchStatistics, Mode, Tape, Var};
use crate::init::InitScheme;
use crate::params::{BatchNorm, Conv, Depthwise, LayerNorm, ParamStore, Prelu};
use crate::sequential::{build_named, LayerSpec, SequentialNet};
use crate::tensor::{Scalar, Shape, Tensor5};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    Dncnn,
    Resnet,
    Restormer3d,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Dncnn, Arch::Resnet, Arch::Restormer3d];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Dncnn => "dncnn",
            Arch::Resnet => "resnet",
            Arch::Restormer3d => "restormer3d",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "architecture",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub base_channels: usize,
    pub blocks: usize,
}

impl NetworkSpec {
    pub fn new(arch: Arch) -> Self {
        let (base_channels, blocks) = match arch {
            Arch::Dncnn => (64, 3),
            Arch::Resnet => (64, 5),
            Arch::Restormer3d => (32, 4),
        };
        NetworkSpec {
            arch,
            base_channels,
            blocks,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks == 0 {
            return Err(Error::invalid(format!(
                "network needs positive width and block count, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// conv+ReLU, `blocks`× (conv+ReLU+BN), conv to one channel. The standard
/// layout has three middle blocks.
pub fn build_dncnn<T: Scalar>(spec: &NetworkSpec, scheme: InitScheme) -> Result<SequentialNet<T>> {
    spec.validate()?;
    let c = spec.base_channels;
    let mut layers = vec![LayerSpec::conv(c, 3), LayerSpec::Relu];
    for _ in 0..spec.blocks {
        layers.extend([LayerSpec::conv(c, 3), LayerSpec::Relu, LayerSpec::BatchNorm]);
    }
    layers.push(LayerSpec::conv(1, 3));
    build_named(1, &layers, scheme, false, "dncnn")
}

#[derive(Clone, Copy, Debug)]
struct ConvBnPrelu {
    conv: Conv,
    bn: BatchNorm,
    act: Prelu,
}

type Stats<T> = Vec<(BatchNorm, BatchStatistics<T>)>;

impl ConvBnPrelu {
    fn run<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        x: Var,
        mode: Mode,
        stats: &mut Stats<T>,
    ) -> Result<Var> {
        let h = self.conv.forward(store, tape, x)?;
        let (h, s) = self.bn.forward(store, tape, h, mode)?;
        if let Some(s) = s {
            stats.push((self.bn, s));
        }
        self.act.forward(store, tape, h)
    }
}

/// conv(k9)+PReLU head, residual [conv+BN+PReLU] blocks with identity skips,
/// a conv+BN+PReLU tail and a single-channel output conv.
#[derive(Clone, Debug)]
pub struct ResNet<T> {
    store: ParamStore<T>,
    head: Conv,
    head_act: Prelu,
    blocks: Vec<ConvBnPrelu>,
    tail: ConvBnPrelu,
    out: Conv,
}

pub fn build_resnet<T: Scalar>(spec: &NetworkSpec, scheme: InitScheme) -> Result<ResNet<T>> {
    spec.validate()?;
    let c = spec.base_channels;
    let kind = scheme.kind;
    let mut rng = scheme.rng();
    let mut store = ParamStore::new();
    let s = &mut store;
    let head = Conv::new(s, "resnet.head", 1, c, 9, kind, &mut rng, true)?;
    let head_act = Prelu::new(s, "resnet.head_act", c, true);
    let mut unit = |s: &mut ParamStore<T>, name: &str| -> Result<ConvBnPrelu> {
        Ok(ConvBnPrelu {
            conv: Conv::new(s, &format!("{name}.conv"), c, c, 3, kind, &mut rng, true)?,
            bn: BatchNorm::new(s, &format!("{name}.bn"), c, true),
            act: Prelu::new(s, &format!("{name}.act"), c, true),
        })
    };
    let blocks = (0..spec.blocks)
        .map(|i| unit(s, &format!("resnet.block{i}")))
        .collect::<Result<Vec<_>>>()?;
    let tail = unit(s, "resnet.tail")?;
    let out = Conv::new(s, "resnet.out", c, 1, 3, kind, &mut rng, true)?;
    Ok(ResNet {
        store,
        head,
        head_act,
        blocks,
        tail,
        out,
    })
}

impl<T: Scalar> ResNet<T> {
    fn run(&self, tape: &Tape<T>, x: Var, mode: Mode, stats: &mut Stats<T>) -> Result<Var> {
        let st = &self.store;
        let mut h = self.head.forward(st, tape, x)?;
        h = self.head_act.forward(st, tape, h)?;
        for b in &self.blocks {
            let r = b.run(st, tape, h, mode, stats)?;
            h = tape.add(h, r)?;
        }
        h = self.tail.run(st, tape, h, mode, stats)?;
        self.out.forward(st, tape, h)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn conv_count(&self) -> usize {
        self.blocks.len() + 3
    }

    /// Sets every residual-block convolution weight and bias to zero.
    pub fn zero_residual_convs(&mut self) {
        for b in self.blocks.clone() {
            for i in [b.conv.weight, b.conv.bias] {
                self.store.get_mut(i).value.data_mut().fill(T::zero());
            }
        }
    }

    /// Runs residual block `i` alone on `x`.
    pub fn block_forward(&self, i: usize, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let b = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no residual block {i}")))?;
        let r = b.run(&self.store, tape, x, mode, &mut Vec::new())?;
        tape.add(x, r)
    }
}

/// Channel ("transposed") self-attention with a learnable temperature.
#[derive(Clone, Copy, Debug)]
pub struct Mdta {
    q: (Conv, Depthwise),
    k: (Conv, Depthwise),
    v: (Conv, Depthwise),
    temperature: usize,
    proj: Conv,
}

/// Output of one attention pass.
pub struct Attention {
    pub out: Var,
    /// Row-stochastic `[N, 1, 1, C, C]` attention matrix.
    pub weights: Var,
}

impl Mdta {
    fn new<T: Scalar>(
        s: &mut ParamStore<T>,
        name: &str,
        c: usize,
        scheme: InitScheme,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let kind = scheme.kind;
        let mut qkv = |tag: &str| -> Result<(Conv, Depthwise)> {
            Ok((
                Conv::new(s, &format!("{name}.{tag}_pw"), c, c, 1, kind, rng, true)?,
                Depthwise::new(s, &format!("{name}.{tag}_dw"), c, 3, kind, rng),
            ))
        };
        let q = qkv("q")?;
        let k = qkv("k")?;
        let v = qkv("v")?;
        let temperature = s.push(format!("{name}.temperature"), Tensor5::scalar(T::one()), true);
        let proj = Conv::zeroed(s, &format!("{name}.proj"), c, c, 1);
        Ok(Mdta {
            q,
            k,
            v,
            temperature,
            proj,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Attention> {
        let branch = |(pw, dw): (Conv, Depthwise)| -> Result<Var> {
            let h = pw.forward(s, tape, x)?;
            dw.forward(s, tape, h)
        };
        let q = tape.l2_normalize_rows(branch(self.q)?);
        let k = tape.l2_normalize_rows(branch(self.k)?);
        let v = branch(self.v)?;
        let tau = tape.param(s.get(self.temperature));
        let logits = tape.scale_by(tape.gram(q, k)?, tau)?;
        let weights = tape.softmax_rows(logits);
        let mixed = tape.attend(weights, v)?;
        Ok(Attention {
            out: self.proj.forward(s, tape, mixed)?,
            weights,
        })
    }
}

/// Gated feed-forward: `W_o(gelu(W_a x) ⊙ W_b x)` with hidden width `2C`.
#[derive(Clone, Copy, Debug)]
pub struct GatedFfn {
    a: Conv,
    b: Conv,
    out: Conv,
}

impl GatedFfn {
    fn new<T: Scalar>(
        s: &mut ParamStore<T>,
        name: &str,
        c: usize,
        scheme: InitScheme,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let kind = scheme.kind;
        let hidden = 2 * c;
        Ok(GatedFfn {
            a: Conv::new(s, &format!("{name}.gate"), c, hidden, 1, kind, rng, true)?,
            b: Conv::new(s, &format!("{name}.value"), c, hidden, 1, kind, rng, true)?,
            out: Conv::new(s, &format!("{name}.out"), hidden, c, 1, kind, rng, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let g = tape.gelu(self.a.forward(s, tape, x)?);
        let v = self.b.forward(s, tape, x)?;
        let h = tape.mul(g, v)?;
        self.out.forward(s, tape, h)
    }
}

/// Pre-norm residual unit: attention then feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Mdta,
    pub norm2: LayerNorm,
    pub ffn: GatedFfn,
}

impl TransformerBlock {
    pub fn forward<T: Scalar>(&self, s: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let a = self.attn.forward(s, tape, self.norm1.forward(s, tape, x)?)?;
        let h = tape.add(x, a.out)?;
        let f = self.ffn.forward(s, tape, self.norm2.forward(s, tape, h)?)?;
        tape.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct Restormer<T> {
    store: ParamStore<T>,
    embed: Conv,
    blocks: Vec<TransformerBlock>,
    out: Conv,
}

pub fn build_restormer3d<T: Scalar>(spec: &NetworkSpec, scheme: InitScheme) -> Result<Restormer<T>> {
    spec.validate()?;
    let c = spec.base_channels;
    let mut rng = scheme.rng();
    let mut store = ParamStore::new();
    let s = &mut store;
    let embed = Conv::new(s, "restormer.embed", 1, c, 3, scheme.kind, &mut rng, true)?;
    let mut blocks = Vec::with_capacity(spec.blocks);
    for i in 0..spec.blocks {
        let name = format!("restormer.block{i}");
        blocks.push(TransformerBlock {
            norm1: LayerNorm::new(s, &format!("{name}.norm1"), c),
            attn: Mdta::new(s, &format!("{name}.attn"), c, scheme, &mut rng)?,
            norm2: LayerNorm::new(s, &format!("{name}.norm2"), c),
            ffn: GatedFfn::new(s, &format!("{name}.ffn"), c, scheme, &mut rng)?,
        });
    }
    let out = Conv::new(s, "restormer.out", c, 1, 3, scheme.kind, &mut rng, true)?;
    Ok(Restormer {
        store,
        embed,
        blocks,
        out,
    })
}

impl<T: Scalar> Restormer<T> {
    fn run(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let s = &self.store;
        let mut h = self.embed.forward(s, tape, x)?;
        for b in &self.blocks {
            h = b.forward(s, tape, h)?;
        }
        self.out.forward(s, tape, h)
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

/// Any of the three denoisers behind one interface.
#[derive(Clone, Debug)]
pub enum Network<T> {
    /// Pass-through with no parameters.
    Identity(ParamStore<T>),
    Dncnn(SequentialNet<T>),
    Resnet(ResNet<T>),
    Restormer(Restormer<T>),
}

pub fn build_network<T: Scalar>(spec: &NetworkSpec, scheme: InitScheme) -> Result<Network<T>> {
    Ok(match spec.arch {
        Arch::Dncnn => Network::Dncnn(build_dncnn(spec, scheme)?),
        Arch::Resnet => Network::Resnet(build_resnet(spec, scheme)?),
        Arch::Restormer3d => Network::Restormer(build_restormer3d(spec, scheme)?),
    })
}

impl<T: Scalar> Network<T> {
    pub fn identity() -> Self {
        Network::Identity(ParamStore::new())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Network::Identity(_) => "identity",
            Network::Dncnn(_) => Arch::Dncnn.name(),
            Network::Resnet(_) => Arch::Resnet.name(),
            Network::Restormer(_) => Arch::Restormer3d.name(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Network::Identity(s) => s,
            Network::Dncnn(n) => n.params(),
            Network::Resnet(n) => &n.store,
            Network::Restormer(n) => &n.store,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Network::Identity(s) => s,
            Network::Dncnn(n) => n.params_mut(),
            Network::Resnet(n) => &mut n.store,
            Network::Restormer(n) => &mut n.store,
        }
    }

    /// Inference pass (batch norms use running statistics).
    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self {
            Network::Identity(_) => Ok(x),
            Network::Dncnn(n) => Ok(n.forward(tape, x, &[])?.output),
            Network::Resnet(n) => n.run(tape, x, Mode::Eval, &mut Vec::new()),
            Network::Restormer(n) => n.run(tape, x),
        }
    }

    /// Training pass; batch-norm running statistics are updated.
    pub fn forward_train(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self {
            Network::Identity(_) => Ok(x),
            Network::Dncnn(n) => Ok(n.forward_train(tape, x, &[])?.output),
            Network::Resnet(n) => {
                let mut stats = Vec::new();
                let y = n.run(tape, x, Mode::Train, &mut stats)?;
                for (bn, s) in stats {
                    bn.update(&mut n.store, &s);
                }
                Ok(y)
            }
            Network::Restormer(n) => n.run(tape, x),
        }
    }

    pub fn forward_mode(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(tape, x),
            Mode::Eval => self.forward(tape, x),
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let c = tape.shape(x).c();
        if c != 1 {
            return Err(Error::shape(
                "denoiser forward",
                format!("expected a single-channel input, got {c} channels"),
            ));
        }
        Ok(())
    }

    /// Snapshot of all tensors by name, in store order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor5<T>)> {
        self.params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Runs `net` in inference mode on a whole volume and clamps to `[0, 1]`.
pub fn denoise<T: Scalar>(net: &Network<T>, volume: &Volume) -> Result<Volume> {
    if !volume.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("denoise input".into()));
    }
    let [d, h, w] = volume.dims();
    let x = Tensor5::from_vec(
        Shape::new(1, 1, d, h, w),
        volume.data().iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let tape = Tape::new();
    let xv = tape.constant(x);
    let y = net.forward(&tape, xv)?;
    let data = tape
        .value(y)
        .data()
        .iter()
        .map(|v| v.f64().clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(volume.dims(), volume.voxel_size(), data)
}
