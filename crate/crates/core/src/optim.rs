//! Named parameters, non-trainable buffers and the SGD optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Frozen parameters enter graphs as constants and are skipped by the
    /// optimizer.
    pub frozen: bool,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Owns every parameter and buffer of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add_with_decay(name, value, true)
    }

    pub fn add_with_decay(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none() && self.find_buffer(&name).is_none(),
            "duplicate name {name}"
        );
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(
            self.find(&name).is_none() && self.find_buffer(&name).is_none(),
            "duplicate name {name}"
        );
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds `grad` into the accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        assert_eq!(grad.len(), p.value.numel(), "gradient size for {}", p.name);
        match &mut p.grad {
            Some(g) => g.data_mut().iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => p.grad = Some(Tensor::from_vec(p.value.shape(), grad.to_vec())),
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Freezes every parameter for which `keep_trainable` returns false and
    /// unfreezes the rest.
    pub fn set_trainable(&mut self, keep_trainable: impl Fn(ParamId, &str) -> bool) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.frozen = !keep_trainable(ParamId(i), &p.name);
        }
    }

    /// Copy with every value converted to `U`. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Plain SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.momentum.is_finite()
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SGD settings {self:?}")))
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates every unfrozen parameter, then clears all gradients.
    ///
    /// Fails, without touching any parameter, if an unfrozen parameter has no
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(Error::contract(format!(
                "unfrozen parameter {} has no gradient",
                p.name
            )));
        }
        if self.velocity.len() < store.params.len() {
            self.velocity.resize(store.params.len(), None);
        }
        let lr: T = lit(self.config.learning_rate);
        let wd: T = lit(self.config.weight_decay);
        let mu: T = lit(self.config.momentum);
        for (p, vel) in store.params.iter_mut().zip(self.velocity.iter_mut()) {
            if p.frozen {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above").data();
            let v = vel.get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let decay = if p.decay { wd } else { T::zero() };
            for ((w, &g), vi) in p.value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                *vi = mu * *vi + (g + decay * *w);
                *w -= lr * *vi;
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// Clamps parameter `id` to `value ≥ lower` and drops the momentum of
    /// every clamped component.
    pub fn clamp_min(&mut self, store: &mut ParamStore<T>, id: ParamId, lower: T) {
        let mut vel = self.velocity.get_mut(id.0).and_then(Option::as_mut);
        for (i, w) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
            if *w < lower {
                *w = lower;
                if let Some(v) = vel.as_deref_mut() {
                    v[i] = T::zero();
                }
            }
        }
    }
}
