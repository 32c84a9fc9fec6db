//! Named parameter storage and the small parametrized blocks networks are made of.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStatistics, Mode, Parameter, Tape, Var};
use crate::init::{initialize_weights, sample_weight, InitKind};
use crate::tensor::{Scalar, Shape, Tensor5};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

/// Ordered, name-addressable parameters of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Tensor5<T>, trainable: bool) -> usize {
        self.params.push(Parameter::new(name, value, trainable));
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of scalars held by trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Replaces every value with the same-named tensor from `values`.
    /// Names and shapes must match exactly.
    pub fn load(&mut self, values: &[(String, Tensor5<T>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (name, v) in values {
            let p = self
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    v.shape().0,
                    p.value.shape().0
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

fn channel_vec<T: Scalar>(c: usize, v: f64) -> Tensor5<T> {
    Tensor5::full(Shape::new(1, c, 1, 1, 1), T::of(v))
}

/// Dense same-padded convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        kind: InitKind,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<Self> {
        let (w, b) = initialize_weights(cin, cout, kernel, kind, rng)?;
        Ok(Conv {
            weight: store.push(format!("{name}.weight"), w, trainable),
            bias: store.push(format!("{name}.bias"), b, trainable),
        })
    }

    /// A convolution whose weight starts at zero.
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let w = Tensor5::zeros(Shape::new(cout, cin, kernel, kernel, kernel));
        Conv {
            weight: store.push(format!("{name}.weight"), w, true),
            bias: store.push(format!("{name}.bias"), channel_vec(cout, 0.0), true),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store.get(self.weight));
        let b = tape.param(store.get(self.bias));
        tape.conv3d(x, w, Some(b))
    }
}

/// Per-channel convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Depthwise {
    pub weight: usize,
    pub bias: usize,
}

impl Depthwise {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        kind: InitKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = sample_weight(Shape::new(channels, 1, kernel, kernel, kernel), kind, rng);
        Depthwise {
            weight: store.push(format!("{name}.weight"), w, true),
            bias: store.push(format!("{name}.bias"), channel_vec(channels, 0.0), true),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store.get(self.weight));
        let b = tape.param(store.get(self.bias));
        tape.depthwise_conv3d(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Prelu {
    pub slope: usize,
}

impl Prelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, trainable: bool) -> Self {
        Prelu {
            slope: store.push(format!("{name}.slope"), channel_vec(c, PRELU_INIT), trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let s = tape.param(store.get(self.slope));
        tape.prelu(x, s)
    }
}

/// Batch norm with affine parameters and running statistics. The running
/// statistics and the update counter live in the store as frozen tensors so
/// that checkpoints carry them.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub tracked: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, trainable: bool) -> Self {
        BatchNorm {
            gamma: store.push(format!("{name}.gamma"), channel_vec(c, 1.0), trainable),
            beta: store.push(format!("{name}.beta"), channel_vec(c, 0.0), trainable),
            running_mean: store.push(format!("{name}.running_mean"), channel_vec(c, 0.0), false),
            running_var: store.push(format!("{name}.running_var"), channel_vec(c, 1.0), false),
            tracked: store.push(format!("{name}.tracked"), Tensor5::scalar(T::zero()), false),
        }
    }

    pub fn initialized<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.tracked).value.item() > T::zero()
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStatistics<T>>)> {
        let g = tape.param(store.get(self.gamma));
        let b = tape.param(store.get(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, BN_EPS)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                if !self.initialized(store) {
                    return Err(Error::UninitializedStatistics);
                }
                let mean = store.get(self.running_mean).value.data();
                let var = store.get(self.running_var).value.data();
                Ok((tape.batchnorm_eval(x, g, b, mean, var, BN_EPS)?, None))
            }
        }
    }

    /// Momentum update of the running statistics.
    pub fn update<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStatistics<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &s) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in store
            .get_mut(self.running_var)
            .value
            .data_mut()
            .iter_mut()
            .zip(&stats.var_unbiased)
        {
            *r = keep * *r + m * s;
        }
        let t = store.get_mut(self.tracked);
        t.value.data_mut()[0] += T::one();
    }
}

/// Per-channel affine layer norm across channels.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.push(format!("{name}.gamma"), channel_vec(c, 1.0), true),
            beta: store.push(format!("{name}.beta"), channel_vec(c, 0.0), true),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(store.get(self.gamma));
        let b = tape.param(store.get(self.beta));
        tape.channel_layernorm(x, g, b, BN_EPS)
    }
}
