//! Layers with parameters registered in a [`ParamStore`], and the forward
//! context that binds them into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{BatchStats, Graph, Var};
use crate::optim::{BufferId, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass: a graph, the parameters it reads, and whether batch
/// norm uses batch statistics.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    bound: HashMap<ParamId, Var>,
    stats: Vec<(BufferId, BufferId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            train,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    /// Graph node for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    /// Batch statistics gathered by training-mode batch norms, in call order.
    pub fn take_stats(&mut self) -> Vec<(BufferId, BufferId, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Folds batch statistics into running estimates:
/// `running ← (1 − m)·running + m·batch`.
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(BufferId, BufferId, BatchStats<T>)]) {
    let m: T = lit(BN_MOMENTUM);
    for (mean_id, var_id, s) in stats {
        for (r, &b) in store.buffer_mut(*mean_id).data_mut().iter_mut().zip(&s.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.buffer_mut(*var_id).data_mut().iter_mut().zip(&s.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// 3×3-style convolution without bias, Kaiming-normal initialised.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let data = (0..out_c * fan_in).map(|_| lit(normal.sample(rng))).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(&[out_c, in_c, kernel, kernel], data));
        Conv2d { weight, stride: 1, pad }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        ctx.g.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS);
            ctx.stats.push((self.running_mean, self.running_var, stats));
            y
        } else {
            let store = ctx.store;
            ctx.g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
                BN_EPS,
            )
        }
    }
}

/// `y = x·W + b` with `W: [in, out]`, initialised `U(−1/√in, 1/√in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w = (0..in_f * out_f).map(|_| lit(dist.sample(rng))).collect();
        let b = (0..out_f).map(|_| lit(dist.sample(rng))).collect();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::from_vec(&[in_f, out_f], w)),
            bias: store.add(format!("{name}.bias"), Tensor::from_vec(&[out_f], b)),
            in_features: in_f,
            out_features: out_f,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.g.matmul(x, w);
        ctx.g.add(y, b)
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).value.data_mut().fill(T::zero());
        store.get_mut(self.bias).value.data_mut().fill(T::zero());
    }
}

/// conv → batch norm → relu.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, 3, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_c),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.g.relu(y)
    }
}
