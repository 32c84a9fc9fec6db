//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor5<T>, Tensor5<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor5<T>, Tensor5<T>)> {
        self.moments.get(name)
    }

    /// One update of every trainable parameter in `store` from `grads`.
    /// Parameters that are not trainable are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let pending: Vec<(usize, Tensor5<T>)> = store
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, p)| {
                let g = grads
                    .param(p)
                    .ok_or_else(|| Error::invalid(format!("no gradient for {}", p.name)))?;
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("{}: grad {:?} vs value {:?}", p.name, g.shape().0, p.value.shape().0),
                    ));
                }
                Ok((i, g))
            })
            .collect::<Result<_>>()?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        for (i, g) in pending {
            let p = store.get_mut(i);
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor5::zeros(g.shape()), Tensor5::zeros(g.shape())));
            let iter = p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((w, m), v), &g) in iter {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = m.f64() / bc1;
                let vhat = v.f64() / bc2;
                *w -= T::of(lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
