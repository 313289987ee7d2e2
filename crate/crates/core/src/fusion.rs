//! Fusion of the three metric classifiers: naive (NMM) and adaptive (AMM)
//! prediction fusion, uncertainty-weighted loss fusion, KL consistency and
//! the ablation variants built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{nll_sum, MetricId, MetricPrediction};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;
pub const FUSION_FLOOR: f64 = 1e-8;

/// Which predictions are fused and which loss drives the metric module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionVariant {
    /// One metric alone.
    Individual(MetricId),
    /// NMM fusion trained only through the fused cross-entropy.
    Coupled,
    Nmm,
    AmmV1,
    AmmV2,
    Amm,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 8] = [
        FusionVariant::Individual(MetricId::Relation),
        FusionVariant::Individual(MetricId::Euclidean),
        FusionVariant::Individual(MetricId::Cosine),
        FusionVariant::Coupled,
        FusionVariant::Nmm,
        FusionVariant::AmmV1,
        FusionVariant::AmmV2,
        FusionVariant::Amm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Individual(m) => m.name(),
            FusionVariant::Coupled => "coupled",
            FusionVariant::Nmm => "nmm",
            FusionVariant::AmmV1 => "amm-v1",
            FusionVariant::AmmV2 => "amm-v2",
            FusionVariant::Amm => "amm",
        }
    }

    /// Metric heads the variant evaluates.
    pub fn metrics(self) -> Vec<MetricId> {
        match self {
            FusionVariant::Individual(m) => vec![m],
            _ => MetricId::ALL.to_vec(),
        }
    }

    /// Whether predictions are fused with the learnable weights `u`.
    pub fn uses_u(self) -> bool {
        matches!(self, FusionVariant::AmmV2 | FusionVariant::Amm)
    }

    /// Whether the metric losses are fused with learned temperatures.
    pub fn uses_theta(self) -> bool {
        matches!(self, FusionVariant::AmmV1 | FusionVariant::AmmV2 | FusionVariant::Amm)
    }

    pub fn uses_kl(self) -> bool {
        self == FusionVariant::Amm
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = FusionVariant::ALL.iter().map(|v| v.name()).collect();
                Error::contract(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

impl TryFrom<String> for FusionVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionVariant> for String {
    fn from(v: FusionVariant) -> String {
        v.name().to_string()
    }
}

/// Learnable fusion scalars, indexed by [`MetricId::index`]. Both start at
/// zero and are exempt from weight decay.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub u: ParamId,
    pub log_theta_sq: ParamId,
}

impl FusionParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>) -> Self {
        FusionParams {
            u: store.add_with_decay("fusion.u", Tensor::zeros(&[3]), false),
            log_theta_sq: store.add_with_decay("fusion.log_theta_sq", Tensor::zeros(&[3]), false),
        }
    }
}

fn check_preds<T: Scalar>(g: &Graph<T>, probs: &[Var]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::contract("fusion of no predictions"));
    }
    let first = g.shape(probs[0]);
    for &p in &probs[1..] {
        if g.shape(p) != first {
            return Err(Error::contract(format!(
                "fused predictions disagree in shape: {:?} vs {:?}",
                first,
                g.shape(p)
            )));
        }
    }
    Ok(())
}

fn renormalize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let total = g.sum_axis(x, 1, true);
    let floor: T = lit(FUSION_FLOOR);
    if let Some(i) = g.value(total).data().iter().position(|&v| v.is_nan() || v <= floor) {
        return Err(Error::contract(format!("degenerate fusion: row {i} has total weight <= {FUSION_FLOOR:e}")));
    }
    Ok(g.div(x, total))
}

/// `Σ_j Ŷ_j`, renormalised per row.
pub fn nmm_fuse<T: Scalar>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    check_preds(g, probs)?;
    let mut acc = probs[0];
    for &p in &probs[1..] {
        acc = g.add(acc, p);
    }
    renormalize(g, acc)
}

/// `Σ_j (1 + u_j)·Ŷ_j`, renormalised per row. `probs[j]` pairs with
/// `u[metrics[j].index()]`.
pub fn amm_fuse<T: Scalar>(g: &mut Graph<T>, probs: &[Var], metrics: &[MetricId], u: Var) -> Result<Var> {
    check_preds(g, probs)?;
    if probs.len() != metrics.len() || g.shape(u) != [3] {
        return Err(Error::contract("amm_fuse needs one weight per prediction and u of shape [3]"));
    }
    let mut acc = None;
    for (&p, m) in probs.iter().zip(metrics) {
        let uj = g.select_rows(u, &[m.index()]);
        let w = g.add_scalar(uj, T::one());
        let term = g.mul(p, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    renormalize(g, acc.expect("non-empty"))
}

/// `−Σ_i log fused[i, y_i]`, with probabilities floored at `1e-12`.
pub fn fused_ce<T: Scalar>(g: &mut Graph<T>, fused: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(fused).to_vec();
    if s.len() != 2 || labels.len() != s[0] || labels.iter().any(|&l| l >= s[1]) {
        return Err(Error::contract(format!("labels do not fit fused prediction of shape {s:?}")));
    }
    let picked = g.pick(fused, labels);
    let safe = g.clamp_min(picked, lit(PROB_FLOOR));
    let logs = g.log(safe);
    let total = g.sum(logs);
    Ok(g.neg(total))
}

/// `Σ_j (L_j·exp(−s_j) + s_j)` with `s_j = log θ_j²`; `losses[j]` pairs
/// with `log_theta_sq[metrics[j].index()]`.
pub fn uncertainty_fusion<T: Scalar>(g: &mut Graph<T>, losses: &[Var], metrics: &[MetricId], log_theta_sq: Var) -> Var {
    let mut acc = None;
    for (&l, m) in losses.iter().zip(metrics) {
        let term = uncertainty_term(g, l, log_theta_sq, m.index());
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("at least one loss")
}

/// `L·exp(−s_k) + s_k` for entry `k` of a log-temperature vector.
pub fn uncertainty_term<T: Scalar>(g: &mut Graph<T>, loss: Var, log_theta_sq: Var, k: usize) -> Var {
    let s = g.select_rows(log_theta_sq, &[k]);
    let ns = g.neg(s);
    let inv = g.exp(ns);
    let weighted = g.mul(loss, inv);
    g.add(weighted, s)
}

/// `Σ p·(log p − log q)` over all entries, both arguments floored at
/// `1e-12` inside the logarithms. Gradients flow through both arguments;
/// detach `q` for a fixed teacher.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Var {
    let floor: T = lit(PROB_FLOOR);
    let pc = g.clamp_min(p, floor);
    let lp = g.log(pc);
    let qc = g.clamp_min(q, floor);
    let lq = g.log(qc);
    let diff = g.sub(lp, lq);
    let prod = g.mul(p, diff);
    g.sum(prod)
}

/// `α·Σ_j KL(Ŷ_j ‖ stopgrad(fused))`.
pub fn kl_regularizer<T: Scalar>(g: &mut Graph<T>, probs: &[Var], fused: Var, alpha: f64) -> Var {
    let teacher = g.detach(fused);
    let mut acc = None;
    for &p in probs {
        let kl = kl_divergence(g, p, teacher);
        acc = Some(match acc {
            None => kl,
            Some(a) => g.add(a, kl),
        });
    }
    g.scale(acc.expect("at least one prediction"), lit(alpha))
}

/// Exact cross-entropy of the temperature-scaled prediction
/// `softmax(−d/θ²)`, summed over rows. `theta_sq` is a `[1]` node.
pub fn exact_scaled_likelihood_loss<T: Scalar>(
    g: &mut Graph<T>,
    distances: Var,
    labels: &[usize],
    theta_sq: Var,
) -> Result<Var> {
    if g.shape(theta_sq) != [1] {
        return Err(Error::contract("theta_sq must be a single value"));
    }
    if g.value(theta_sq).item() <= T::zero() {
        return Err(Error::contract("theta_sq must be positive"));
    }
    let scaled = g.div(distances, theta_sq);
    let logits = g.neg(scaled);
    let lp = g.log_softmax(logits, 1);
    nll_sum(g, lp, labels)
}

/// The approximation `L/θ² + log θ²` of the exact scaled loss.
pub fn scaled_loss_approximation(loss: f64, theta_sq: f64) -> f64 {
    loss / theta_sq + theta_sq.ln()
}

/// The fused prediction `Ŷ` of a variant: the single metric, the NMM sum,
/// or the AMM weighted sum.
pub fn fuse_predictions<T: Scalar>(g: &mut Graph<T>, variant: FusionVariant, preds: &[MetricPrediction], u: Var) -> Result<Var> {
    let probs: Vec<Var> = preds.iter().map(|p| p.probs).collect();
    let metrics: Vec<MetricId> = preds.iter().map(|p| p.metric).collect();
    match variant {
        FusionVariant::Individual(m) => {
            if metrics != [m] {
                return Err(Error::contract(format!("variant {variant} needs exactly the {m} prediction")));
            }
            Ok(probs[0])
        }
        FusionVariant::Coupled | FusionVariant::Nmm | FusionVariant::AmmV1 => nmm_fuse(g, &probs),
        FusionVariant::AmmV2 | FusionVariant::Amm => amm_fuse(g, &probs, &metrics, u),
    }
}

fn scale_unless_one<T: Scalar>(g: &mut Graph<T>, x: Var, c: f64) -> Var {
    if c == 1.0 {
        x
    } else {
        g.scale(x, lit(c))
    }
}

/// Metric-module outputs for one forward pass.
#[derive(Debug, Clone)]
pub struct MetricModuleLoss {
    /// Per-metric cross-entropy, indexed by [`MetricId::index`].
    pub metric_losses: [Option<Var>; 3],
    /// Fused prediction `Ŷ`.
    pub fused: Var,
    /// Cross-entropy of the fused prediction.
    pub l_y: Var,
    pub l_kl: Option<Var>,
    /// Loss that trains the embedding and heads.
    pub l_m: Var,
}

/// Fuses the per-metric predictions and losses according to `variant`.
///
/// `preds` and `losses` are aligned; `labels` are the rows' labels. The
/// fused cross-entropy and the KL term are multiplied by `row_scale` (1 for
/// plain sums).
#[allow(clippy::too_many_arguments)]
pub fn metric_module_loss<T: Scalar>(
    g: &mut Graph<T>,
    variant: FusionVariant,
    preds: &[MetricPrediction],
    losses: &[Var],
    labels: &[usize],
    u: Var,
    log_theta_sq: Var,
    alpha: f64,
    row_scale: f64,
) -> Result<MetricModuleLoss> {
    let want = variant.metrics();
    let have: Vec<MetricId> = preds.iter().map(|p| p.metric).collect();
    if have != want || losses.len() != preds.len() {
        return Err(Error::contract(format!(
            "variant {variant} needs predictions for {want:?}, got {have:?}"
        )));
    }
    let probs: Vec<Var> = preds.iter().map(|p| p.probs).collect();
    let mut metric_losses = [None; 3];
    for (p, &l) in preds.iter().zip(losses) {
        metric_losses[p.metric.index()] = Some(l);
    }
    let fused = fuse_predictions(g, variant, preds, u)?;
    let l_y = fused_ce(g, fused, labels)?;
    let l_y = scale_unless_one(g, l_y, row_scale);
    let mut l_kl = None;
    let l_m = match variant {
        FusionVariant::Individual(_) => losses[0],
        FusionVariant::Coupled => l_y,
        FusionVariant::Nmm => {
            let a = g.add(losses[0], losses[1]);
            g.add(a, losses[2])
        }
        FusionVariant::AmmV1 | FusionVariant::AmmV2 => uncertainty_fusion(g, losses, &have, log_theta_sq),
        FusionVariant::Amm => {
            let gsum = uncertainty_fusion(g, losses, &have, log_theta_sq);
            let kl = kl_regularizer(g, &probs, fused, alpha);
            let kl = scale_unless_one(g, kl, row_scale);
            l_kl = Some(kl);
            g.add(gsum, kl)
        }
    };
    Ok(MetricModuleLoss {
        metric_losses,
        fused,
        l_y,
        l_kl,
        l_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(g: &mut Graph<f64>, rows: &[[f64; 2]]) -> Var {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        g.constant(Tensor::from_f64(&[rows.len(), 2], &data))
    }

    #[test]
    fn nmm_of_identical_is_identity() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[[0.3, 0.7]]);
        let f = nmm_fuse(&mut g, &[p, p, p]).unwrap();
        let v = g.value(f).data();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn nmm_arithmetic() {
        let mut g = Graph::new();
        let a = probs(&mut g, &[[1., 0.]]);
        let b = probs(&mut g, &[[0., 1.]]);
        let c = probs(&mut g, &[[0.5, 0.5]]);
        let f = nmm_fuse(&mut g, &[a, b, c]).unwrap();
        assert_eq!(g.value(f).data(), &[0.5, 0.5]);
    }

    #[test]
    fn amm_single_survivor() {
        let mut g = Graph::new();
        let a = probs(&mut g, &[[0.2, 0.8]]);
        let b = probs(&mut g, &[[0.6, 0.4]]);
        let c = probs(&mut g, &[[0.9, 0.1]]);
        let u = g.constant(Tensor::from_f64(&[3], &[1., -1., -1.]));
        let f = amm_fuse(&mut g, &[a, b, c], &MetricId::ALL, u).unwrap();
        let v = g.value(f).data();
        assert!((v[0] - 0.2).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn amm_degenerate_weights_rejected() {
        let mut g = Graph::new();
        let a = probs(&mut g, &[[0.2, 0.8]]);
        let u = g.constant(Tensor::from_f64(&[3], &[-1., -1., -1.]));
        assert!(matches!(
            amm_fuse(&mut g, &[a, a, a], &MetricId::ALL, u),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uncertainty_single_term() {
        let mut g = Graph::new();
        let l = g.scalar(2.0);
        let s = g.constant(Tensor::from_f64(&[3], &[2f64.ln(), 0., 0.]));
        let gl = uncertainty_fusion(&mut g, &[l], &[MetricId::Relation], s);
        assert!((g.item(gl) - (1.0 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[[1., 0.]]);
        let q = probs(&mut g, &[[0.5, 0.5]]);
        let kl = kl_divergence(&mut g, p, q);
        assert!((g.item(kl) - 2f64.ln()).abs() < 1e-15);
        let same = kl_regularizer(&mut g, &[q, q, q], q, 0.7);
        assert_eq!(g.item(same), 0.0);
    }

    #[test]
    fn kl_teacher_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::from_f64(&[1, 2], &[0.3, 0.7]));
        let q = g.variable(Tensor::from_f64(&[1, 2], &[0.6, 0.4]));
        let kl = kl_regularizer(&mut g, &[p], q, 1.0);
        let grads = g.gradients(kl).unwrap();
        assert!(grads.get(p).is_some());
        assert!(grads.get(q).is_none());
    }

    #[test]
    fn exact_scaled_loss_examples() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::from_f64(&[1, 2], &[0., 2f64.ln()]));
        let one = g.scalar(1.0);
        let l = exact_scaled_likelihood_loss(&mut g, d, &[0], one).unwrap();
        assert!((g.item(l) + (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn fused_ce_uniform() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[4, 2], 0.5));
        let l = fused_ce(&mut g, f, &[0, 1, 1, 0]).unwrap();
        assert!((g.item(l) - 4.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
        }
        assert!(matches!("amm-v3".parse::<FusionVariant>(), Err(Error::Contract(_))));
    }
}
