//! Central finite-difference checks of every differentiable primitive and
//! of the composite training losses.
//!
//! The error of one component is `|a − n| / max(|a|, |n|, GRAD_FLOOR)` for
//! analytic gradient `a` and numeric gradient `n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auxiliary::{gal_loss, kd_loss, KdPair, PatchClassifier};
use crate::autograd::{Graph, Var};
use crate::backbone::{build_prototypes, Conv4};
use crate::error::Result;
use crate::fusion::{amm_fuse, fused_ce, kl_regularizer, metric_module_loss, uncertainty_fusion};
use crate::fusion::{FusionParams, FusionVariant, MetricModuleLoss};
use crate::metrics::{global_distances, metric_loss, metric_predict, patch_distances, MetricId, RelationHead};
use crate::nn::Ctx;
use crate::optim::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const EPSILON: f64 = 1e-4;
/// Default pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Pass threshold when single-precision gradients are checked.
pub const TOLERANCE_F32: f64 = 1e-3;
/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
/// Components checked per tensor, spread evenly over its elements.
pub const MAX_COMPONENTS: usize = 48;

/// Worst error of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub module: &'static str,
    pub case: &'static str,
    pub max_rel_err: f64,
    pub components: usize,
}

/// Worst error per module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleReport {
    pub module: &'static str,
    pub max_rel_err: f64,
    pub cases: usize,
    pub components: usize,
}

type Build<T> = Box<dyn Fn(&mut Ctx<T>, &[Var]) -> Result<Var>>;

/// One scalar function of some free tensors and the parameters of a store.
pub struct Case<T: Scalar> {
    pub module: &'static str,
    pub name: &'static str,
    pub store: ParamStore<T>,
    pub inputs: Vec<Tensor<T>>,
    /// Whether batch norm uses batch statistics.
    pub train: bool,
    build: Build<T>,
}

impl<T: Scalar> Case<T> {
    pub fn new(
        module: &'static str,
        name: &'static str,
        store: ParamStore<T>,
        inputs: Vec<Tensor<T>>,
        build: impl Fn(&mut Ctx<T>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            module,
            name,
            store,
            inputs,
            train: true,
            build: Box::new(build),
        }
    }

    fn eval(&self, store: &ParamStore<T>, inputs: &[Tensor<T>]) -> Result<f64> {
        let mut ctx = Ctx::new(store, self.train);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let out = (self.build)(&mut ctx, &vars)?;
        Ok(ctx.g.item(out).to_f64_lossy())
    }

    /// Compares analytic and numeric gradients of every input and parameter.
    pub fn check(&self, eps: f64) -> Result<CaseReport> {
        let (input_grads, param_grads) = self.analytic()?;
        self.compare(&self.store, &self.inputs, &input_grads, &param_grads, eps)
    }

    fn trainable_store(&self) -> ParamStore<T> {
        let mut store = self.store.clone();
        store.set_trainable(|_, _| true);
        store.zero_grad();
        store
    }

    fn analytic(&self) -> Result<(Vec<Tensor<T>>, ParamStore<T>)> {
        let store = self.trainable_store();
        let mut ctx = Ctx::new(&store, self.train);
        let vars: Vec<Var> = self.inputs.iter().map(|t| ctx.g.variable(t.clone())).collect();
        let out = (self.build)(&mut ctx, &vars)?;
        let grads = ctx.g.gradients(out)?;
        let ig = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut pg = store.clone();
        ctx.g.backward(out, &mut pg)?;
        Ok((ig, pg))
    }

    /// Central differences of this case's function at `store` and `inputs`,
    /// compared against analytic gradients of any precision.
    fn compare<U: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &[Tensor<T>],
        input_grads: &[Tensor<U>],
        param_grads: &ParamStore<U>,
        eps: f64,
    ) -> Result<CaseReport> {
        let mut store = store.clone();
        store.set_trainable(|_, _| true);
        let mut worst: f64 = 0.0;
        let mut components = 0;
        for (k, t) in inputs.iter().enumerate() {
            for i in spread(t.numel()) {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].data_mut()[i] += lit::<T>(eps);
                minus[k].data_mut()[i] -= lit::<T>(eps);
                let num = (self.eval(&store, &plus)? - self.eval(&store, &minus)?) / (2.0 * eps);
                let ana = input_grads[k].data()[i].to_f64_lossy();
                worst = worst.max(rel_err(ana, num));
                components += 1;
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).numel();
            let grad = param_grads
                .get(id)
                .grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(param_grads.value(id).shape()));
            for i in spread(n) {
                let mut plus = store.clone();
                plus.get_mut(id).value.data_mut()[i] += lit::<T>(eps);
                let mut minus = store.clone();
                minus.get_mut(id).value.data_mut()[i] -= lit::<T>(eps);
                let num = (self.eval(&plus, inputs)? - self.eval(&minus, inputs)?) / (2.0 * eps);
                let ana = grad.data()[i].to_f64_lossy();
                worst = worst.max(rel_err(ana, num));
                components += 1;
            }
        }
        Ok(CaseReport {
            module: self.module,
            case: self.name,
            max_rel_err: worst,
            components,
        })
    }
}

impl Case<f32> {
    /// Checks single-precision analytic gradients against double-precision
    /// central differences of `reference`, evaluated at this case's values.
    ///
    /// Single-precision differences are dominated by rounding, so the
    /// numeric side always runs in f64.
    pub fn check_against(&self, reference: &Case<f64>, eps: f64) -> Result<CaseReport> {
        let (input_grads, param_grads) = self.analytic()?;
        let store = self.store.cast::<f64>();
        let inputs: Vec<Tensor<f64>> = self.inputs.iter().map(|t| t.cast()).collect();
        reference.compare(&store, &inputs, &input_grads, &param_grads, eps)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn spread(n: usize) -> Vec<usize> {
    if n <= MAX_COMPONENTS {
        (0..n).collect()
    } else {
        (0..MAX_COMPONENTS).map(|k| k * n / MAX_COMPONENTS).collect()
    }
}

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| lit(rng.random_range(lo..hi))).collect())
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..1.5);
                lit(if rng.random_bool(0.5) { v } else { -v })
            })
            .collect(),
    )
}

/// Distinct values, so that max-pooling has a unique winner per window.
fn distinct<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, v.into_iter().map(|x| lit(x - n as f64 * 0.025)).collect())
}

/// `Σ w ⊙ x` with fixed random weights, reducing any node to a scalar.
fn project<T: Scalar>(g: &mut Graph<T>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn primitive<T: Scalar>(
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Var + 'static,
) -> Case<T> {
    Case::new("tensor_autograd", name, ParamStore::new(), inputs, move |ctx, v| {
        let y = f(&mut ctx.g, v);
        Ok(project(&mut ctx.g, y, 99))
    })
}

/// Every primitive with a gradient.
pub fn primitive_cases<T: Scalar>() -> Vec<Case<T>> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut cases = Vec::new();
    let a = rand_tensor::<T>(&mut r, &[3, 4], -1.0, 1.0);
    let b_row = rand_tensor::<T>(&mut r, &[1, 4], -1.0, 1.0);
    let pos = rand_tensor::<T>(&mut r, &[3, 4], 0.5, 2.0);
    cases.push(primitive("add_broadcast", vec![a.clone(), b_row.clone()], |g, v| g.add(v[0], v[1])));
    cases.push(primitive("sub_broadcast", vec![a.clone(), b_row.clone()], |g, v| g.sub(v[0], v[1])));
    cases.push(primitive("mul_broadcast", vec![a.clone(), b_row.clone()], |g, v| g.mul(v[0], v[1])));
    cases.push(primitive("div", vec![a.clone(), pos.clone()], |g, v| g.div(v[0], v[1])));
    cases.push(primitive("scale", vec![a.clone()], |g, v| g.scale(v[0], lit(-1.7))));
    cases.push(primitive("add_scalar", vec![a.clone()], |g, v| g.add_scalar(v[0], lit(0.3))));
    cases.push(primitive("relu", vec![away_from_zero(&mut r, &[3, 4])], |g, v| g.relu(v[0])));
    cases.push(primitive("clamp_min", vec![away_from_zero(&mut r, &[3, 4])], |g, v| g.clamp_min(v[0], lit(0.0))));
    cases.push(primitive("exp", vec![a.clone()], |g, v| g.exp(v[0])));
    cases.push(primitive("log", vec![pos.clone()], |g, v| g.log(v[0])));
    cases.push(primitive("square", vec![a.clone()], |g, v| g.square(v[0])));
    cases.push(primitive("sqrt", vec![pos.clone()], |g, v| g.sqrt(v[0])));
    let m2 = rand_tensor::<T>(&mut r, &[4, 5], -1.0, 1.0);
    cases.push(primitive("matmul", vec![a.clone(), m2], |g, v| g.matmul(v[0], v[1])));
    cases.push(primitive("transpose", vec![a.clone()], |g, v| g.transpose(v[0])));
    let x = rand_tensor::<T>(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = rand_tensor::<T>(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    cases.push(primitive("conv2d_pad1", vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1)));
    cases.push(primitive("conv2d_stride2", vec![x.clone(), w], |g, v| g.conv2d(v[0], v[1], 2, 0)));
    let gamma = rand_tensor::<T>(&mut r, &[3], 0.5, 1.5);
    let beta = rand_tensor::<T>(&mut r, &[3], -0.5, 0.5);
    cases.push(primitive("batch_norm_train", vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batch_norm_train(v[0], v[1], v[2], 1e-5).0
    }));
    cases.push(primitive("batch_norm_eval", vec![x.clone(), gamma, beta], |g, v| {
        let (m, s) = (vec![lit(0.1), lit(-0.2), lit(0.05)], vec![lit(0.8), lit(1.3), lit(0.6)]);
        g.batch_norm_eval(v[0], v[1], v[2], &m, &s, 1e-5)
    }));
    cases.push(primitive("max_pool2", vec![distinct(&mut r, &[2, 2, 4, 5])], |g, v| g.max_pool2(v[0])));
    cases.push(primitive("global_avg_pool", vec![x.clone()], |g, v| g.global_avg_pool(v[0])));
    cases.push(primitive("sum_axis", vec![x.clone()], |g, v| g.sum_axis(v[0], 2, false)));
    cases.push(primitive("mean_axis", vec![x.clone()], |g, v| g.mean_axis(v[0], 1, true)));
    cases.push(primitive("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6])));
    cases.push(primitive("concat", vec![a.clone(), pos.clone()], |g, v| g.concat(&[v[0], v[1]], 1)));
    cases.push(primitive("rot90", vec![x.clone()], |g, v| g.rot90(v[0], 3)));
    cases.push(primitive("softmax", vec![a.clone()], |g, v| g.softmax(v[0], 1)));
    cases.push(primitive("log_softmax", vec![a.clone()], |g, v| g.log_softmax(v[0], 1)));
    cases.push(primitive("pick", vec![a.clone()], |g, v| g.pick(v[0], &[3, 0, 2])));
    cases.push(primitive("select_rows", vec![a.clone()], |g, v| g.select_rows(v[0], &[2, 0, 2])));
    cases.push(primitive("to_patches", vec![x], |g, v| g.to_patches(v[0])));
    cases
}

fn rng_store<T: Scalar>(seed: u64) -> (ChaCha8Rng, ParamStore<T>) {
    (ChaCha8Rng::seed_from_u64(seed), ParamStore::new())
}

const WAYS: usize = 3;
const CH: usize = 4;

const AMM_LABELS: [usize; 4] = [0, 1, 2, 0];

/// AMM metric-module loss of support `v[0]` and queries `v[1]`. With a
/// `teacher`, the KL term compares against that fixed distribution, which
/// is what the stop-gradient means for finite differences.
fn amm_module<T: Scalar>(
    ctx: &mut Ctx<T>,
    v: &[Var],
    head: &RelationHead,
    fusion: &FusionParams,
    teacher: Option<&Tensor<T>>,
) -> Result<MetricModuleLoss> {
    let protos = build_prototypes(&mut ctx.g, v[0], &[0, 1, 2], WAYS)?;
    let mut preds = Vec::new();
    let mut losses = Vec::new();
    for m in MetricId::ALL {
        let d = global_distances(ctx, m, v[1], protos, head)?;
        let p = metric_predict(&mut ctx.g, m, d)?;
        losses.push(metric_loss(&mut ctx.g, &p, &AMM_LABELS)?);
        preds.push(p);
    }
    let (u, lt) = (ctx.p(fusion.u), ctx.p(fusion.log_theta_sq));
    let mut out = metric_module_loss(&mut ctx.g, FusionVariant::Amm, &preds, &losses, &AMM_LABELS, u, lt, AMM_ALPHA, 1.0)?;
    if let Some(t) = teacher {
        let probs: Vec<Var> = preds.iter().map(|p| p.probs).collect();
        let fixed = ctx.g.constant(t.clone());
        let gsum = uncertainty_fusion(&mut ctx.g, &losses, &MetricId::ALL, lt);
        let kl = kl_regularizer(&mut ctx.g, &probs, fixed, AMM_ALPHA);
        out.l_kl = Some(kl);
        out.l_m = ctx.g.add(gsum, kl);
    }
    Ok(out)
}

const AMM_ALPHA: f64 = 0.1;

struct AmmSetup<T: Scalar> {
    store: ParamStore<T>,
    head: RelationHead,
    fusion: FusionParams,
    s: Tensor<T>,
    q: Tensor<T>,
}

fn amm_setup<T: Scalar>() -> AmmSetup<T> {
    let (mut rng, mut store) = rng_store::<T>(43);
    let fusion = FusionParams::new(&mut store);
    store.get_mut(fusion.u).value = Tensor::from_f64(&[3], &[0.2, 0.1, -0.3]);
    store.get_mut(fusion.log_theta_sq).value = Tensor::from_f64(&[3], &[0.4, -0.3, 0.1]);
    let head = RelationHead::new(&mut store, CH, &mut rng);
    let s = rand_tensor::<T>(&mut rng, &[WAYS, CH, 2, 2], -1.0, 1.0);
    let q = rand_tensor::<T>(&mut rng, &[4, CH, 2, 2], -1.0, 1.0);
    AmmSetup { store, head, fusion, s, q }
}

/// Backbone, metric heads, fusion and auxiliary tasks, ending with the
/// composite objectives `L_M` (AMM), the GAL loss and the KD loss.
pub fn composite_cases<T: Scalar>() -> Result<Vec<Case<T>>> {
    let mut cases = Vec::new();

    let (mut rng, mut store) = rng_store::<T>(21);
    let conv4 = Conv4::new(&mut store, 1, 16, 3, &mut rng);
    let imgs = rand_tensor::<T>(&mut rng, &[4, 1, 16, 16], -1.0, 1.0);
    cases.push(Case::new("embedding_backbone", "conv4_prototypes", store, vec![imgs], move |ctx, v| {
        let f = conv4.embed(ctx, v[0])?;
        let p = build_prototypes(&mut ctx.g, f, &[0, 1, 0, 1], 2)?;
        Ok(project(&mut ctx.g, p, 5))
    }));

    for (name, metric) in [
        ("euclidean_loss", MetricId::Euclidean),
        ("cosine_loss", MetricId::Cosine),
        ("relation_loss", MetricId::Relation),
    ] {
        let (mut rng, mut store) = rng_store::<T>(31);
        let head = RelationHead::new(&mut store, CH, &mut rng);
        let q = rand_tensor::<T>(&mut rng, &[5, CH, 2, 2], -1.0, 1.0);
        let p = rand_tensor::<T>(&mut rng, &[WAYS, CH, 2, 2], -1.0, 1.0);
        if metric != MetricId::Relation {
            store = ParamStore::new();
        }
        cases.push(Case::new("metric_heads", name, store, vec![q, p], move |ctx, v| {
            let d = global_distances(ctx, metric, v[0], v[1], &head)?;
            let pred = metric_predict(&mut ctx.g, metric, d)?;
            metric_loss(&mut ctx.g, &pred, &[0, 1, 2, 1, 0])
        }));
    }
    {
        let (mut rng, store) = rng_store::<T>(32);
        let head = RelationHead::new(&mut ParamStore::<T>::new(), CH, &mut rng);
        let q = rand_tensor::<T>(&mut rng, &[2, CH, 2, 2], -1.0, 1.0);
        let p = rand_tensor::<T>(&mut rng, &[WAYS, CH, 2, 2], -1.0, 1.0);
        cases.push(Case::new("metric_heads", "patchwise_cosine", store, vec![q, p], move |ctx, v| {
            let d = patch_distances(ctx, MetricId::Cosine, v[0], v[1], &head)?;
            Ok(project(&mut ctx.g, d, 8))
        }));
    }

    let probs_inputs = |rng: &mut ChaCha8Rng| -> Vec<Tensor<T>> {
        (0..3).map(|_| rand_tensor::<T>(rng, &[4, WAYS], -2.0, 2.0)).collect()
    };
    {
        let (mut rng, mut store) = rng_store::<T>(41);
        let fusion = FusionParams::new(&mut store);
        let u = store.get_mut(fusion.u);
        u.value = Tensor::from_f64(&[3], &[0.3, -0.2, 0.5]);
        let logits = probs_inputs(&mut rng);
        cases.push(Case::new("metric_fusion", "amm_fused_ce", store, logits, move |ctx, v| {
            let probs: Vec<Var> = v.iter().map(|&l| ctx.g.softmax(l, 1)).collect();
            let u = ctx.p(fusion.u);
            let fused = amm_fuse(&mut ctx.g, &probs, &MetricId::ALL, u)?;
            fused_ce(&mut ctx.g, fused, &[0, 2, 1, 1])
        }));
    }
    {
        let AmmSetup { store, head, fusion, s, q } = amm_setup::<T>();
        let teacher = {
            let mut ctx = Ctx::new(&store, true);
            let s = ctx.g.constant(s.clone());
            let q = ctx.g.constant(q.clone());
            let out = amm_module(&mut ctx, &[s, q], &head, &fusion, None)?;
            ctx.g.value(out.fused).clone()
        };
        cases.push(Case::new("metric_fusion", "amm_metric_module_loss", store, vec![s, q], move |ctx, v| {
            Ok(amm_module(ctx, v, &head, &fusion, Some(&teacher))?.l_m)
        }));
    }

    {
        let (mut rng, mut store) = rng_store::<T>(51);
        let head = PatchClassifier::new(&mut store, "global", CH, 5, &mut rng);
        let f = rand_tensor::<T>(&mut rng, &[3, CH, 2, 2], -1.0, 1.0);
        cases.push(Case::new("auxiliary_tasks", "patch_classifier", store, vec![f], move |ctx, v| {
            Ok(head.forward(ctx, v[0], &[4, 0, 2])?.loss)
        }));
    }
    {
        let (mut rng, mut store) = rng_store::<T>(52);
        let lt = store.add_with_decay("gal.log_theta_sq", Tensor::from_f64(&[2], &[0.3, -0.4]), false);
        let losses = rand_tensor::<T>(&mut rng, &[3], 0.5, 3.0);
        cases.push(Case::new("auxiliary_tasks", "gal_loss", store, vec![losses], move |ctx, v| {
            let l: Vec<Var> = (0..3).map(|k| ctx.g.select_rows(v[0], &[k])).collect();
            let s = ctx.p(lt);
            gal_loss(&mut ctx.g, l[0], Some(l[1]), Some(l[2]), s, 0.5)
        }));
    }
    {
        let (mut rng, store) = rng_store::<T>(53);
        let mut inputs = probs_inputs(&mut rng);
        inputs.push(rand_tensor::<T>(&mut rng, &[4, 6], -2.0, 2.0));
        let teacher_f = rand_tensor::<T>(&mut rng, &[4, WAYS], -2.0, 2.0);
        let teacher_g = rand_tensor::<T>(&mut rng, &[4, 6], -2.0, 2.0);
        cases.push(Case::new("auxiliary_tasks", "kd_loss", store, inputs, move |ctx, v| {
            let probs: Vec<Var> = v[..3].iter().map(|&l| ctx.g.softmax(l, 1)).collect();
            let student = ctx.g.softmax(v[3], 1);
            let tf = ctx.g.constant(teacher_f.clone());
            let tf = ctx.g.softmax(tf, 1);
            let tg = ctx.g.constant(teacher_g.clone());
            let tg = ctx.g.softmax(tg, 1);
            kd_loss(&mut ctx.g, &probs, tf, &[KdPair { student, teacher: tg }], 0.75)
        }));
    }
    Ok(cases)
}

pub fn all_cases<T: Scalar>() -> Result<Vec<Case<T>>> {
    let mut c = primitive_cases();
    c.extend(composite_cases()?);
    Ok(c)
}

pub fn run_cases<T: Scalar>(cases: &[Case<T>], eps: f64) -> Result<Vec<CaseReport>> {
    cases.iter().map(|c| c.check(eps)).collect()
}

/// Runs every case with f32 analytic gradients and f64 numeric ones.
pub fn run_mixed(eps: f64) -> Result<Vec<CaseReport>> {
    let single = all_cases::<f32>()?;
    let double = all_cases::<f64>()?;
    single.iter().zip(&double).map(|(s, d)| s.check_against(d, eps)).collect()
}

/// Folds case reports into one line per module, in first-seen order.
pub fn by_module(cases: &[CaseReport]) -> Vec<ModuleReport> {
    let mut out: Vec<ModuleReport> = Vec::new();
    for c in cases {
        match out.iter_mut().find(|m| m.module == c.module) {
            Some(m) => {
                m.max_rel_err = m.max_rel_err.max(c.max_rel_err);
                m.cases += 1;
                m.components += c.components;
            }
            None => out.push(ModuleReport {
                module: c.module,
                max_rel_err: c.max_rel_err,
                cases: 1,
                components: c.components,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_vec(&[2], vec![0.7, -1.2]);
        let case = Case::<f64>::new("test", "half_detached_square", ParamStore::new(), vec![x], |ctx, v| {
            let d = ctx.g.detach(v[0]);
            let sq = ctx.g.mul(v[0], d);
            Ok(ctx.g.sum(sq))
        });
        assert!(case.check(EPSILON).unwrap().max_rel_err > 0.1);
    }

    #[test]
    fn frozen_teacher_matches_module_loss_at_baseline() {
        let AmmSetup { store, head, fusion, s, q } = amm_setup::<f64>();
        let run = |teacher: Option<&Tensor<f64>>| {
            let mut ctx = Ctx::new(&store, true);
            let v = [ctx.g.variable(s.clone()), ctx.g.variable(q.clone())];
            let out = amm_module(&mut ctx, &v, &head, &fusion, teacher).unwrap();
            let grads = ctx.g.gradients(out.l_m).unwrap();
            let fused = ctx.g.value(out.fused).clone();
            (ctx.g.item(out.l_m), grads.get(v[1]).unwrap(), fused)
        };
        let (live, live_grad, fused) = run(None);
        let (frozen, frozen_grad, _) = run(Some(&fused));
        assert_abs_diff_eq!(live, frozen, epsilon = 1e-12);
        assert_abs_diff_eq!(live_grad.data(), frozen_grad.data(), epsilon = 1e-12);
    }

    #[test]
    fn primitives_pass_in_f64() {
        let reports = run_cases(&primitive_cases::<f64>(), EPSILON).unwrap();
        for r in &reports {
            assert!(r.max_rel_err < TOLERANCE, "{}: {}", r.case, r.max_rel_err);
        }
    }

    #[test]
    fn single_precision_primitives_against_double_reference() {
        let wide = primitive_cases::<f64>();
        for (case, reference) in primitive_cases::<f32>().iter().zip(&wide) {
            let r = case.check_against(reference, EPSILON).unwrap();
            assert!(r.max_rel_err < TOLERANCE_F32, "{}: {}", r.case, r.max_rel_err);
        }
    }
}
