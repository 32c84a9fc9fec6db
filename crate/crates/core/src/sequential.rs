//! Plain layer stacks.

use crate::error::{Error, Result};
use crate::graph::{BatchStatistics, Mode, Tape, Var};
use crate::init::InitScheme;
use crate::params::{BatchNorm, Conv, ParamStore, Prelu};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// `in_channels`, when given, is checked against the incoming channel count.
    Conv {
        in_channels: Option<usize>,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Prelu,
    BatchNorm,
    /// 2×2×2 window, stride 2.
    MaxPool,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            in_channels: None,
            out_channels,
            kernel,
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Prelu)
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Conv(Conv),
    Relu,
    Prelu(Prelu),
    BatchNorm(BatchNorm),
    MaxPool,
}

/// Result of running a [`SequentialNet`].
#[derive(Clone, Debug)]
pub struct SeqOutput {
    pub output: Var,
    /// Activations at the requested tap positions, in request order.
    pub taps: Vec<Var>,
}

/// A layer stack. Tap position `k` names the activation after the first `k`
/// layers, so 0 is the input and `layers().len()` the output.
#[derive(Clone, Debug)]
pub struct SequentialNet<T> {
    in_channels: usize,
    out_channels: usize,
    layers: Vec<LayerSpec>,
    blocks: Vec<Block>,
    store: ParamStore<T>,
    frozen: bool,
}

/// Assembles and initializes a stack. Weights are drawn in layer order from
/// one generator seeded by `scheme.seed`.
pub fn build_sequential<T: Scalar>(
    in_channels: usize,
    layers: &[LayerSpec],
    scheme: InitScheme,
    frozen: bool,
) -> Result<SequentialNet<T>> {
    build_named(in_channels, layers, scheme, frozen, "layers")
}

pub(crate) fn build_named<T: Scalar>(
    in_channels: usize,
    layers: &[LayerSpec],
    scheme: InitScheme,
    frozen: bool,
    prefix: &str,
) -> Result<SequentialNet<T>> {
    if in_channels == 0 {
        return Err(Error::invalid("sequential net needs at least one input channel"));
    }
    let mut rng = scheme.rng();
    let mut store = ParamStore::new();
    let mut blocks = Vec::with_capacity(layers.len());
    let trainable = !frozen;
    let mut c = in_channels;
    for (i, spec) in layers.iter().enumerate() {
        let name = format!("{prefix}.{i}");
        let block = match *spec {
            LayerSpec::Conv {
                in_channels: declared,
                out_channels,
                kernel,
            } => {
                if let Some(d) = declared {
                    if d != c {
                        return Err(Error::shape(
                            "build_sequential",
                            format!("layer {i} expects {d} input channels, previous layer yields {c}"),
                        ));
                    }
                }
                let conv = Conv::new(
                    &mut store,
                    &name,
                    c,
                    out_channels,
                    kernel,
                    scheme.kind,
                    &mut rng,
                    trainable,
                )?;
                c = out_channels;
                Block::Conv(conv)
            }
            LayerSpec::Relu => Block::Relu,
            LayerSpec::Prelu => Block::Prelu(Prelu::new(&mut store, &name, c, trainable)),
            LayerSpec::BatchNorm => Block::BatchNorm(BatchNorm::new(&mut store, &name, c, trainable)),
            LayerSpec::MaxPool => Block::MaxPool,
        };
        blocks.push(block);
    }
    Ok(SequentialNet {
        in_channels,
        out_channels: c,
        layers: layers.to_vec(),
        blocks,
        store,
        frozen,
    })
}

impl<T: Scalar> SequentialNet<T> {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }

    /// Positions right after every activation, plus the final output.
    pub fn default_taps(&self) -> Vec<usize> {
        let mut taps: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_activation())
            .map(|(i, _)| i + 1)
            .collect();
        if taps.last() != Some(&self.layers.len()) {
            taps.push(self.layers.len());
        }
        taps
    }

    /// Inference pass; batch norms use their running statistics.
    pub fn forward(&self, tape: &Tape<T>, x: Var, taps: &[usize]) -> Result<SeqOutput> {
        Ok(self.run(tape, x, taps, Mode::Eval)?.0)
    }

    /// Training pass; batch norms use batch statistics and update their
    /// running estimates.
    pub fn forward_train(&mut self, tape: &Tape<T>, x: Var, taps: &[usize]) -> Result<SeqOutput> {
        let (out, stats) = self.run(tape, x, taps, Mode::Train)?;
        for (i, s) in stats {
            if let Block::BatchNorm(bn) = self.blocks[i] {
                bn.update(&mut self.store, &s);
            }
        }
        Ok(out)
    }

    pub fn forward_mode(&mut self, tape: &Tape<T>, x: Var, taps: &[usize], mode: Mode) -> Result<SeqOutput> {
        match mode {
            Mode::Train => self.forward_train(tape, x, taps),
            Mode::Eval => self.forward(tape, x, taps),
        }
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        tape: &Tape<T>,
        x: Var,
        taps: &[usize],
        mode: Mode,
    ) -> Result<(SeqOutput, Vec<(usize, BatchStatistics<T>)>)> {
        let n = self.layers.len();
        if let Some(&bad) = taps.iter().find(|&&t| t > n) {
            return Err(Error::invalid(format!(
                "tap {bad} out of range for {n} layers"
            )));
        }
        let c = tape.shape(x).c();
        if c != self.in_channels {
            return Err(Error::shape(
                "sequential forward",
                format!("input has {c} channels, net expects {}", self.in_channels),
            ));
        }
        let mut acts = Vec::with_capacity(n + 1);
        let mut stats = Vec::new();
        let mut h = x;
        acts.push(h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block::Conv(conv) => conv.forward(&self.store, tape, h)?,
                Block::Relu => tape.relu(h),
                Block::Prelu(p) => p.forward(&self.store, tape, h)?,
                Block::BatchNorm(bn) => {
                    let (y, s) = bn.forward(&self.store, tape, h, mode)?;
                    if let Some(s) = s {
                        stats.push((i, s));
                    }
                    y
                }
                Block::MaxPool => tape.maxpool3d(h)?,
            };
            acts.push(h);
        }
        let out = SeqOutput {
            output: h,
            taps: taps.iter().map(|&t| acts[t]).collect(),
        };
        Ok((out, stats))
    }
}
