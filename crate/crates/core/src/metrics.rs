//! Relation, Euclidean and cosine metric classifiers.
//!
//! Every distance function returns an `[n, N]` matrix of distances between
//! `n` queries and `N` prototypes; predictions are `softmax(−d)` per row.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Ctx, Linear};
use crate::optim::ParamStore;
use crate::scalar::{lit, Scalar};

pub const COSINE_SCALE: f64 = 10.0;
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricId {
    Relation,
    Euclidean,
    Cosine,
}

impl MetricId {
    pub const ALL: [MetricId; 3] = [MetricId::Relation, MetricId::Euclidean, MetricId::Cosine];

    pub fn index(self) -> usize {
        match self {
            MetricId::Relation => 0,
            MetricId::Euclidean => 1,
            MetricId::Cosine => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricId::Relation => "relation",
            MetricId::Euclidean => "euclidean",
            MetricId::Cosine => "cosine",
        }
    }

    /// One-letter suffix used in log columns (`r`, `e`, `c`).
    pub fn short(self) -> &'static str {
        &self.name()[..1]
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown metric {s:?}")))
    }
}

fn check_vectors<T: Scalar>(g: &Graph<T>, q: Var, p: Var, op: &'static str) -> Result<()> {
    let (sq, sp) = (g.shape(q), g.shape(p));
    if sq.len() != 2 || sp.len() != 2 || sq[1] != sp[1] {
        return Err(Error::Shape {
            op,
            lhs: sq.to_vec(),
            rhs: sp.to_vec(),
        });
    }
    Ok(())
}

/// `‖q − p‖² / c` for `q: [n, c]`, `p: [N, c]`.
pub fn euclidean_distances<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var) -> Result<Var> {
    check_vectors(g, q, p, "euclidean_distance")?;
    let (n, c) = (g.shape(q)[0], g.shape(q)[1]);
    let m = g.shape(p)[0];
    let q3 = g.reshape(q, &[n, 1, c]);
    let p3 = g.reshape(p, &[1, m, c]);
    let diff = g.sub(q3, p3);
    let sq = g.square(diff);
    let s = g.sum_axis(sq, 2, false);
    Ok(g.scale(s, lit(1.0 / c as f64)))
}

fn unit_rows<T: Scalar>(g: &mut Graph<T>, x: Var, which: &str) -> Result<Var> {
    let sq = g.square(x);
    let ss = g.sum_axis(sq, 1, true);
    let norm = g.sqrt(ss);
    let floor: T = lit(NORM_FLOOR);
    if let Some(i) = g.value(norm).data().iter().position(|&v| v.is_nan() || v < floor) {
        return Err(Error::contract(format!(
            "degenerate feature: {which} row {i} has norm below {NORM_FLOOR:e}"
        )));
    }
    Ok(g.div(x, norm))
}

/// `−γ·cos(q, p)` with `γ = 10`.
pub fn cosine_distances<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var) -> Result<Var> {
    check_vectors(g, q, p, "cosine_distance")?;
    let qn = unit_rows(g, q, "query")?;
    let pn = unit_rows(g, p, "prototype")?;
    let pt = g.transpose(pn);
    let cos = g.matmul(qn, pt);
    Ok(g.scale(cos, lit(-COSINE_SCALE)))
}

/// Learned relation module: concatenated `(P, Q)` maps pass two conv blocks,
/// global average pooling and a linear map to a scalar score.
#[derive(Debug, Clone)]
pub struct RelationHead {
    pub block1: ConvBnRelu,
    pub block2: ConvBnRelu,
    pub fc: Linear,
    pub channels: usize,
}

impl RelationHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, channels: usize, rng: &mut R) -> Self {
        RelationHead {
            block1: ConvBnRelu::new(store, "relation.0", 2 * channels, channels, rng),
            block2: ConvBnRelu::new(store, "relation.1", channels, channels, rng),
            fc: Linear::new(store, "relation.fc", channels, 1, rng),
            channels,
        }
    }

    /// Negated relation scores for `q: [n, c, h, w]` against `p: [N, c, h, w]`.
    pub fn distances<T: Scalar>(&self, ctx: &mut Ctx<T>, q: Var, p: Var) -> Result<Var> {
        let (sq, sp) = (ctx.g.shape(q).to_vec(), ctx.g.shape(p).to_vec());
        if sq.len() != 4 || sq[1..] != sp[1..] || sq[1] != self.channels {
            return Err(Error::Shape {
                op: "relation_distance",
                lhs: sq,
                rhs: sp,
            });
        }
        let (n, m) = (sq[0], sp[0]);
        let qi: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let pi: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        let qr = ctx.g.select_rows(q, &qi);
        let pr = ctx.g.select_rows(p, &pi);
        let pair = ctx.g.concat(&[pr, qr], 1);
        let h = self.block1.forward(ctx, pair);
        let h = self.block2.forward(ctx, h);
        let h = ctx.g.global_avg_pool(h);
        let score = self.fc.forward(ctx, h);
        let score = ctx.g.reshape(score, &[n, m]);
        Ok(ctx.g.neg(score))
    }
}

/// Distances of a metric on the global path: Euclidean and cosine compare
/// GAP vectors, relation compares full maps.
pub fn global_distances<T: Scalar>(
    ctx: &mut Ctx<T>,
    metric: MetricId,
    q: Var,
    protos: Var,
    relation: &RelationHead,
) -> Result<Var> {
    let (sq, sp) = (ctx.g.shape(q).to_vec(), ctx.g.shape(protos).to_vec());
    if sq.len() != 4 || sq[1..] != sp[1..] {
        return Err(Error::Shape {
            op: metric.name(),
            lhs: sq,
            rhs: sp,
        });
    }
    match metric {
        MetricId::Relation => relation.distances(ctx, q, protos),
        MetricId::Euclidean | MetricId::Cosine => {
            let qv = ctx.g.global_avg_pool(q);
            let pv = ctx.g.global_avg_pool(protos);
            vector_distances(&mut ctx.g, metric, qv, pv)
        }
    }
}

/// Patch-wise distances: every spatial position `Q_n` of every query against
/// `GAP(P^k)`. Rows are ordered query-major, then position.
pub fn patch_distances<T: Scalar>(
    ctx: &mut Ctx<T>,
    metric: MetricId,
    q: Var,
    protos: Var,
    relation: &RelationHead,
) -> Result<Var> {
    let (sq, sp) = (ctx.g.shape(q).to_vec(), ctx.g.shape(protos).to_vec());
    if sq.len() != 4 || sq[1..] != sp[1..] {
        return Err(Error::Shape {
            op: metric.name(),
            lhs: sq,
            rhs: sp,
        });
    }
    let c = sq[1];
    let patches = ctx.g.to_patches(q);
    let pv = ctx.g.global_avg_pool(protos);
    match metric {
        MetricId::Relation => {
            let rows = ctx.g.shape(patches)[0];
            let qm = ctx.g.reshape(patches, &[rows, c, 1, 1]);
            let pm = ctx.g.reshape(pv, &[sp[0], c, 1, 1]);
            relation.distances(ctx, qm, pm)
        }
        MetricId::Euclidean | MetricId::Cosine => vector_distances(&mut ctx.g, metric, patches, pv),
    }
}

/// Distances between `[n, c]` and `[N, c]` vectors for the fixed metrics.
pub fn vector_distances<T: Scalar>(g: &mut Graph<T>, metric: MetricId, q: Var, p: Var) -> Result<Var> {
    match metric {
        MetricId::Euclidean => euclidean_distances(g, q, p),
        MetricId::Cosine => cosine_distances(g, q, p),
        MetricId::Relation => Err(Error::contract("relation distance needs the relation head")),
    }
}

/// Per-metric prediction `softmax(−d)` and its logarithm.
#[derive(Debug, Clone, Copy)]
pub struct MetricPrediction {
    pub metric: MetricId,
    pub distances: Var,
    pub probs: Var,
    pub log_probs: Var,
}

pub fn metric_predict<T: Scalar>(g: &mut Graph<T>, metric: MetricId, distances: Var) -> Result<MetricPrediction> {
    let s = g.shape(distances);
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::contract(format!("metric prediction needs [n, N>=2] distances, got {s:?}")));
    }
    let logits = g.neg(distances);
    let probs = g.softmax(logits, 1);
    let log_probs = g.log_softmax(logits, 1);
    Ok(MetricPrediction {
        metric,
        distances,
        probs,
        log_probs,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::contract(format!("{} labels for {rows} prediction rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// `−Σ_i log p[i, labels[i]]` from row-wise log-probabilities `[n, k]`.
pub fn nll_sum<T: Scalar>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(log_probs).to_vec();
    check_labels(labels, s[0], s[1])?;
    let picked = g.pick(log_probs, labels);
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// Cross-entropy summed over queries.
pub fn metric_loss<T: Scalar>(g: &mut Graph<T>, pred: &MetricPrediction, labels: &[usize]) -> Result<Var> {
    nll_sum(g, pred.log_probs, labels)
}

/// Labels repeated once per spatial position, matching patch row order.
pub fn patch_labels(labels: &[usize], positions: usize) -> Vec<usize> {
    labels.iter().flat_map(|&l| std::iter::repeat_n(l, positions)).collect()
}

/// `−Σ_queries Σ_positions log ŷ(y | Q_n)` from patch-wise predictions.
pub fn patchwise_metric_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: &MetricPrediction,
    labels: &[usize],
    positions: usize,
) -> Result<Var> {
    nll_sum(g, pred.log_probs, &patch_labels(labels, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecs(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.constant(Tensor::from_f64(shape, data))
    }

    #[test]
    fn euclidean_identity_and_unit_vectors() {
        let mut g = Graph::new();
        let mut a = vec![0.0; 64];
        a[0] = 1.0;
        let mut b = vec![0.0; 64];
        b[1] = 1.0;
        let q = vecs(&mut g, &[1, 64], &a);
        let p = vecs(&mut g, &[2, 64], &[a.clone(), b].concat());
        let d = euclidean_distances(&mut g, q, p).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 2.0 / 64.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let q = vecs(&mut g, &[1, 2], &[1., 0.]);
        let p = vecs(&mut g, &[3, 2], &[2., 0., 0., 3., -1., 0.]);
        let d = cosine_distances(&mut g, q, p).unwrap();
        let dv = g.value(d).data();
        assert!((dv[0] + 10.0).abs() < 1e-12);
        assert!(dv[1].abs() < 1e-12);
        assert!((dv[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::new();
        let q = vecs(&mut g, &[1, 2], &[0., 0.]);
        let p = vecs(&mut g, &[2, 2], &[1., 0., 0., 1.]);
        assert!(matches!(cosine_distances(&mut g, q, p), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let q = vecs(&mut g, &[1, 3], &[1., 0., 0.]);
        let p = vecs(&mut g, &[2, 2], &[1., 0., 0., 1.]);
        assert!(matches!(euclidean_distances(&mut g, q, p), Err(Error::Shape { .. })));
    }

    #[test]
    fn two_way_prediction() {
        let mut g = Graph::new();
        let d = vecs(&mut g, &[1, 2], &[0., 2f64.ln()]);
        let pred = metric_predict(&mut g, MetricId::Euclidean, d).unwrap();
        let p = g.value(pred.probs).data();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_is_n_log_n() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::full(&[7, 5], 0.4));
        let pred = metric_predict(&mut g, MetricId::Cosine, d).unwrap();
        let l = metric_loss(&mut g, &pred, &[0, 1, 2, 3, 4, 0, 1]).unwrap();
        assert!((g.item(l) - 7.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_fc_relation_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = RelationHead::new(&mut store, 4, &mut rng);
        head.fc.zero(&mut store);
        let mut ctx = Ctx::new(&store, true);
        let q = ctx.g.constant(Tensor::from_vec(&[2, 4, 2, 2], (0..32).map(|i| i as f64 * 0.1).collect()));
        let p = ctx.g.constant(Tensor::from_vec(&[3, 4, 2, 2], (0..48).map(|i| (i as f64).sin()).collect()));
        let d = head.distances(&mut ctx, q, p).unwrap();
        let pred = metric_predict(&mut ctx.g, MetricId::Relation, d).unwrap();
        for &v in ctx.g.value(pred.probs).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricId::ALL {
            assert_eq!(m.name().parse::<MetricId>().unwrap(), m);
        }
        assert!("manhattan".parse::<MetricId>().is_err());
    }
}
