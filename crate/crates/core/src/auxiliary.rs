//! Rotation augmentation, the patch-wise global and rotation classifiers,
//! the global adaptive loss (GAL) and the distillation objective.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::kl_divergence;
use crate::metrics::{nll_sum, patch_labels};
use crate::nn::{Ctx, Linear};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const ROTATIONS: usize = 4;
pub const METRIC_WEIGHT: f64 = 0.5;

/// Queries rotated by 0°, 90°, 180° and 270°, angle-major: copy
/// `k·n + i` is query `i` turned `k` quarter turns counter-clockwise.
#[derive(Debug, Clone)]
pub struct RotatedQueries<T: Scalar> {
    pub images: Tensor<T>,
    pub fewshot_labels: Vec<usize>,
    pub global_labels: Vec<usize>,
    pub rotation_labels: Vec<usize>,
}

pub fn rotate_queries<T: Scalar>(
    images: &Tensor<T>,
    fewshot_labels: &[usize],
    global_labels: &[usize],
) -> Result<RotatedQueries<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::contract(format!("rotation needs square [n, C, S, S] images, got {s:?}")));
    }
    let n = s[0];
    if fewshot_labels.len() != n || global_labels.len() != n {
        return Err(Error::contract("one few-shot and one global label per query"));
    }
    let mut data = Vec::with_capacity(images.numel() * ROTATIONS);
    for k in 0..ROTATIONS {
        data.extend_from_slice(images.rot90(k).data());
    }
    let mut shape = s.to_vec();
    shape[0] = n * ROTATIONS;
    Ok(RotatedQueries {
        images: Tensor::from_vec(&shape, data),
        fewshot_labels: fewshot_labels.repeat(ROTATIONS),
        global_labels: global_labels.repeat(ROTATIONS),
        rotation_labels: (0..ROTATIONS).flat_map(|k| std::iter::repeat_n(k, n)).collect(),
    })
}

/// Linear classifier applied to every spatial position of a feature map.
#[derive(Debug, Clone)]
pub struct PatchClassifier {
    pub linear: Linear,
}

/// Patch-wise classifier outputs.
#[derive(Debug, Clone, Copy)]
pub struct PatchOutput {
    pub probs: Var,
    pub log_probs: Var,
    pub loss: Var,
}

impl PatchClassifier {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, classes: usize, rng: &mut R) -> Self {
        PatchClassifier {
            linear: Linear::new(store, name, channels, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_features
    }

    /// Logits `[B·h·w, classes]` for `features: [B, c, h, w]`.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<T>, features: Var) -> Var {
        let patches = ctx.g.to_patches(features);
        self.linear.forward(ctx, patches)
    }

    /// Patch-wise cross-entropy `−Σ_samples Σ_positions log softmax(W·Q_n)[y]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, features: Var, labels: &[usize]) -> Result<PatchOutput> {
        let s = ctx.g.shape(features).to_vec();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::contract(format!(
                "{} labels for features of shape {s:?}",
                labels.len()
            )));
        }
        let logits = self.logits(ctx, features);
        let log_probs = ctx.g.log_softmax(logits, 1);
        let probs = ctx.g.softmax(logits, 1);
        let loss = nll_sum(&mut ctx.g, log_probs, &patch_labels(labels, s[2] * s[3]))?;
        Ok(PatchOutput { probs, log_probs, loss })
    }
}

/// Learned log-temperatures of the global (`0`) and rotation (`1`) tasks and
/// the base bias `λ`.
#[derive(Debug, Clone)]
pub struct GalParams {
    pub log_theta_sq: ParamId,
    pub lambda: f64,
}

pub const GAL_GLOBAL: usize = 0;
pub const GAL_ROTATION: usize = 1;

impl GalParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, lambda: f64) -> Self {
        GalParams {
            log_theta_sq: store.add_with_decay("gal.log_theta_sq", Tensor::zeros(&[2]), false),
            lambda,
        }
    }
}

/// `w_z = exp(−s_z) + λ` for entry `z` of the GAL log-temperatures.
pub fn task_weight<T: Scalar>(g: &mut Graph<T>, log_theta_sq: Var, z: usize, lambda: f64) -> Var {
    let s = g.select_rows(log_theta_sq, &[z]);
    let ns = g.neg(s);
    let inv = g.exp(ns);
    g.add_scalar(inv, lit(lambda))
}

/// `½·L_M + Σ_z (w_z·L_z − log w_z)` over the enabled auxiliary tasks.
pub fn gal_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_m: Var,
    l_g: Option<Var>,
    l_r: Option<Var>,
    log_theta_sq: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::contract(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let mut total = g.scale(l_m, lit(METRIC_WEIGHT));
    for (z, l) in [(GAL_GLOBAL, l_g), (GAL_ROTATION, l_r)] {
        let Some(l) = l else { continue };
        let w = task_weight(g, log_theta_sq, z, lambda);
        let wl = g.mul(w, l);
        let lw = g.log(w);
        let term = g.sub(wl, lw);
        total = g.add(total, term);
    }
    Ok(total)
}

/// `w_z` for plain numbers.
pub fn task_weight_value(theta_sq: f64, lambda: f64) -> f64 {
    1.0 / theta_sq + lambda
}

/// Student distributions paired with the matching (constant) teacher
/// distributions.
#[derive(Debug, Clone, Copy)]
pub struct KdPair {
    pub student: Var,
    pub teacher: Var,
}

/// `β·[Σ_j KL(Ŷ_j ‖ Ŷ^t) + Σ_z KL(Ŷ_z ‖ Ŷ_z^t)]`. The teacher arguments
/// are detached here, so callers may pass any node.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, metric_probs: &[Var], teacher_fused: Var, aux: &[KdPair], beta: f64) -> Result<Var> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::contract(format!("beta must be finite and nonnegative, got {beta}")));
    }
    let t_fused = g.detach(teacher_fused);
    let mut pairs: Vec<(Var, Var)> = metric_probs.iter().map(|&p| (p, t_fused)).collect();
    for pair in aux {
        let t = g.detach(pair.teacher);
        pairs.push((pair.student, t));
    }
    let mut total = g.scalar(T::zero());
    for (s, t) in pairs {
        if g.shape(s) != g.shape(t) {
            return Err(Error::contract(format!(
                "teacher and student class counts differ: {:?} vs {:?}",
                g.shape(t),
                g.shape(s)
            )));
        }
        let kl = kl_divergence(g, s, t);
        total = g.add(total, kl);
    }
    Ok(g.scale(total, lit(beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_counts_and_identity_copy() {
        let n = 30;
        let imgs = Tensor::from_vec(&[n, 1, 4, 4], (0..n * 16).map(|i| i as f64).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let r = rotate_queries(&imgs, &labels, &labels).unwrap();
        assert_eq!(r.images.shape()[0], 120);
        assert_eq!(&r.images.data()[..n * 16], imgs.data());
        for k in 0..4 {
            assert_eq!(r.rotation_labels.iter().filter(|&&l| l == k).count(), n);
        }
        assert_eq!(r.fewshot_labels[n + 3], labels[3]);
    }

    #[test]
    fn non_square_rejected() {
        let imgs = Tensor::<f64>::zeros(&[1, 1, 4, 3]);
        assert!(rotate_queries(&imgs, &[0], &[0]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = PatchClassifier::new(&mut store, "rot", 3, 4, &mut rng);
        head.linear.zero(&mut store);
        let mut ctx = Ctx::new(&store, true);
        let f = ctx.g.constant(Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|i| i as f64).collect()));
        let out = head.forward(&mut ctx, f, &[1, 3]).unwrap();
        assert!((ctx.g.item(out.loss) - 2.0 * 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gal_reductions() {
        let mut g = Graph::<f64>::new();
        let (lm, lg, lr) = (g.scalar(3.0), g.scalar(1.25), g.scalar(0.5));
        let s = g.constant(Tensor::zeros(&[2]));
        let l = gal_loss(&mut g, lm, Some(lg), Some(lr), s, 0.0).unwrap();
        assert_eq!(g.item(l), 1.5 + 1.25 + 0.5);
        let l = gal_loss(&mut g, lm, Some(lg), Some(lr), s, 0.5).unwrap();
        assert!((g.item(l) - (1.5 + 1.5 * 1.75 - 2.0 * 1.5f64.ln())).abs() < 1e-12);
        let l = gal_loss(&mut g, lm, None, None, s, 0.5).unwrap();
        assert_eq!(g.item(l), 1.5);
    }

    #[test]
    fn kd_identical_is_zero_and_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 3], &[0.2, 0.3, 0.5]));
        let l = kd_loss(&mut g, &[p, p], p, &[], 0.75).unwrap();
        assert_eq!(g.item(l), 0.0);
        let q = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]));
        assert!(kd_loss(&mut g, &[p], q, &[], 0.75).is_err());
    }
}
