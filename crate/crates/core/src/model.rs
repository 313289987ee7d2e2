//! The full network: Conv4 embedding, relation head, global and rotation
//! classifiers, and the fusion and GAL scalars, all in one [`ParamStore`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{GalParams, PatchClassifier, ROTATIONS};
use crate::autograd::Var;
use crate::backbone::{build_prototypes, Conv4};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, FusionVariant};
use crate::metrics::{global_distances, metric_loss, metric_predict, patch_distances, patchwise_metric_loss};
use crate::metrics::{MetricId, MetricPrediction, RelationHead};
use crate::nn::Ctx;
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Filters per Conv4 block, which is also the feature channel count.
    pub width: usize,
    /// Number of base classes seen by the global classifier.
    pub global_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            image_size: 32,
            width: 64,
            global_classes: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.global_classes < 2 {
            return Err(Error::Config("model needs channels, width >= 1 and >= 2 global classes".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} leaves no spatial extent after Conv4", self.image_size)));
        }
        Ok(())
    }
}

/// Information stored alongside the weights of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub variant: FusionVariant,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Conv4,
    pub relation: RelationHead,
    pub global_head: PatchClassifier,
    pub rotation_head: PatchClassifier,
    pub fusion: FusionParams,
    /// Log-temperatures of the global and rotation tasks.
    pub gal_log_theta_sq: ParamId,
}

/// Per-metric predictions and summed cross-entropies of one episode.
#[derive(Debug, Clone)]
pub struct MetricForward {
    pub preds: Vec<MetricPrediction>,
    pub losses: Vec<Var>,
    /// Label of every prediction row (queries, or query patches).
    pub row_labels: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Conv4::new(&mut store, config.in_channels, config.image_size, config.width, &mut rng);
        let relation = RelationHead::new(&mut store, config.width, &mut rng);
        let global_head = PatchClassifier::new(&mut store, "global", config.width, config.global_classes, &mut rng);
        let rotation_head = PatchClassifier::new(&mut store, "rotation", config.width, ROTATIONS, &mut rng);
        let fusion = FusionParams::new(&mut store);
        let gal = GalParams::new(&mut store, 0.0);
        Ok(Model {
            config,
            store,
            backbone,
            relation,
            global_head,
            rotation_head,
            fusion,
            gal_log_theta_sq: gal.log_theta_sq,
        })
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.backbone.feature_shape()
    }

    pub fn embed(&self, ctx: &mut Ctx<T>, images: Var) -> Result<Var> {
        self.backbone.embed(ctx, images)
    }

    /// Prototypes, per-metric predictions and losses. Features are
    /// `[n, c, h, w]`; with `patchwise` every query position is classified.
    #[allow(clippy::too_many_arguments)]
    pub fn metric_forward(
        &self,
        ctx: &mut Ctx<T>,
        support: Var,
        support_labels: &[usize],
        query: Var,
        query_labels: &[usize],
        ways: usize,
        metrics: &[MetricId],
        patchwise: bool,
    ) -> Result<MetricForward> {
        let protos = build_prototypes(&mut ctx.g, support, support_labels, ways)?;
        let s = ctx.g.shape(query).to_vec();
        let positions = s[2] * s[3];
        let mut preds = Vec::with_capacity(metrics.len());
        let mut losses = Vec::with_capacity(metrics.len());
        for &m in metrics {
            let d = if patchwise {
                patch_distances(ctx, m, query, protos, &self.relation)?
            } else {
                global_distances(ctx, m, query, protos, &self.relation)?
            };
            let pred = metric_predict(&mut ctx.g, m, d)?;
            let loss = if patchwise {
                patchwise_metric_loss(&mut ctx.g, &pred, query_labels, positions)?
            } else {
                metric_loss(&mut ctx.g, &pred, query_labels)?
            };
            preds.push(pred);
            losses.push(loss);
        }
        let row_labels = if patchwise {
            crate::metrics::patch_labels(query_labels, positions)
        } else {
            query_labels.to_vec()
        };
        Ok(MetricForward {
            preds,
            losses,
            row_labels,
        })
    }

    /// Current `u` values.
    pub fn u(&self) -> [f64; 3] {
        vec3(self.store.value(self.fusion.u).to_f64_vec())
    }

    /// Current metric temperatures `θ_j²`.
    pub fn theta_sq(&self) -> [f64; 3] {
        vec3(self.store.value(self.fusion.log_theta_sq).to_f64_vec().iter().map(|s| s.exp()).collect())
    }

    /// Current `θ_G²` and `θ_R²`.
    pub fn gal_theta_sq(&self) -> [f64; 2] {
        let v = self.store.value(self.gal_log_theta_sq).to_f64_vec();
        [v[0].exp(), v[1].exp()]
    }

    pub fn save(&self, path: &Path, variant: FusionVariant) -> Result<()> {
        let meta = ModelMeta {
            model: self.config.clone(),
            variant,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &self.store, meta)
    }

    /// Checkpoint bytes, for bitwise comparisons.
    pub fn to_bytes(&self, variant: FusionVariant) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            model: self.config.clone(),
            variant,
        };
        checkpoint::encode(&self.store, serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        let ck = checkpoint::load(path)?;
        let meta: ModelMeta =
            serde_json::from_value(ck.meta().clone()).map_err(|e| Error::load(path, format!("bad metadata: {e}")))?;
        let mut model = Model::new(meta.model.clone(), 0)?;
        ck.restore(&mut model.store).map_err(|e| Error::load(path, e.to_string()))?;
        Ok((model, meta))
    }
}

fn vec3(v: Vec<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            image_size: 16,
            width: 4,
            global_classes: 3,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amt");
        let m = Model::<f32>::new(small(), 7).unwrap();
        m.save(&path, FusionVariant::Amm).unwrap();
        let (back, meta) = Model::<f32>::load(&path).unwrap();
        assert_eq!(meta.variant, FusionVariant::Amm);
        assert_eq!(back.to_bytes(FusionVariant::Amm).unwrap(), m.to_bytes(FusionVariant::Amm).unwrap());
    }

    #[test]
    fn fusion_scalars_start_neutral() {
        let m = Model::<f64>::new(small(), 1).unwrap();
        assert_eq!(m.u(), [0.0; 3]);
        assert_eq!(m.theta_sq(), [1.0; 3]);
        assert_eq!(m.gal_theta_sq(), [1.0; 2]);
        assert!(!m.store.get(m.fusion.u).decay);
    }

    #[test]
    fn one_by_one_patchwise_matches_global() {
        let m = Model::<f64>::new(small(), 2).unwrap();
        let mut ctx = Ctx::new(&m.store, true);
        let s = ctx.g.constant(Tensor::from_vec(&[2, 4, 1, 1], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()));
        let q = ctx.g.constant(Tensor::from_vec(&[3, 4, 1, 1], (0..12).map(|i| (i as f64 * 1.3).cos()).collect()));
        let glob = m.metric_forward(&mut ctx, s, &[0, 1], q, &[0, 1, 1], 2, &MetricId::ALL, false).unwrap();
        let patch = m.metric_forward(&mut ctx, s, &[0, 1], q, &[0, 1, 1], 2, &MetricId::ALL, true).unwrap();
        for k in 0..3 {
            assert_eq!(ctx.g.value(glob.preds[k].probs).data(), ctx.g.value(patch.preds[k].probs).data());
            assert_eq!(ctx.g.item(glob.losses[k]), ctx.g.item(patch.losses[k]));
        }
    }
}
