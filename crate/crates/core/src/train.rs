//! Two-phase episodic training, distillation and the per-epoch metrics log.
//!
//! Phase 1 updates every active parameter except the fusion weights `u`
//! with the full objective. Phase 2 freezes everything but `u`, recomputes
//! the fused prediction with a fresh forward pass and takes one SGD step on
//! its cross-entropy. Batch-norm running statistics move only in phase 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{gal_loss, kd_loss, rotate_queries, KdPair, PatchOutput};
use crate::autograd::Var;
use crate::data::{Augment, Dataset};
use crate::episode::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fusion::{fuse_predictions, fused_ce, metric_module_loss, FusionVariant};
use crate::metrics::MetricId;
use crate::model::Model;
use crate::nn::{update_running_stats, Ctx};
use crate::optim::{Sgd, SgdConfig};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Cross-entropy and KL terms summed over queries.
    Sum,
    /// The same sums divided by the number of (rotated) query images.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub episode: EpisodeSpec,
    pub variant: FusionVariant,
    /// Weight of the KL consistency term.
    pub alpha: f64,
    /// Base bias of the auxiliary task weights.
    pub lambda: f64,
    /// Distillation weight.
    pub beta: f64,
    pub global_task: bool,
    pub rotation_task: bool,
    /// Classify every query position instead of the pooled query.
    pub patchwise_metrics: bool,
    pub reduction: Reduction,
    /// Run the `u` phase every this many steps.
    pub phase2_every: usize,
    pub sgd: SgdConfig,
    pub u_sgd: SgdConfig,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            episodes_per_epoch: 100,
            episode: EpisodeSpec::new(5, 1, 15),
            variant: FusionVariant::Amm,
            alpha: 0.1,
            lambda: 0.5,
            beta: 0.75,
            global_task: true,
            rotation_task: true,
            patchwise_metrics: false,
            reduction: Reduction::Mean,
            phase2_every: 1,
            sgd: SgdConfig::default(),
            u_sgd: SgdConfig {
                learning_rate: 0.01,
                weight_decay: 0.0,
                momentum: 0.9,
            },
            augment: Augment::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.sgd.validate()?;
        self.u_sgd.validate()?;
        if self.phase2_every == 0 {
            return Err(Error::Config("phase2_every must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Queries are rotated whenever an auxiliary task is on.
    pub fn rotates(&self) -> bool {
        self.global_task || self.rotation_task
    }

    pub fn uses_gal(&self) -> bool {
        self.global_task || self.rotation_task
    }
}

/// Images and labels of one training episode.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<T: Scalar> {
    pub ways: usize,
    pub support: Tensor<T>,
    pub support_labels: Vec<usize>,
    pub query: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub query_global: Vec<usize>,
    pub query_rotation: Option<Vec<usize>>,
}

/// Gathers an episode's images, augments them and optionally rotates the
/// queries.
pub fn make_batch<T: Scalar, R: Rng>(
    data: &Dataset,
    ep: &Episode,
    augment: &Augment,
    rotate: bool,
    rng: &mut R,
) -> Result<EpisodeBatch<T>> {
    let mut support = data.batch::<T>(&ep.support);
    let mut query = data.batch::<T>(&ep.query);
    augment.apply_batch(&mut support, rng);
    augment.apply_batch(&mut query, rng);
    let globals: Vec<usize> = ep.query.iter().map(|&i| data.labels[i]).collect();
    let batch = if rotate {
        let r = rotate_queries(&query, &ep.query_labels, &globals)?;
        EpisodeBatch {
            ways: ep.classes.len(),
            support,
            support_labels: ep.support_labels.clone(),
            query: r.images,
            query_labels: r.fewshot_labels,
            query_global: r.global_labels,
            query_rotation: Some(r.rotation_labels),
        }
    } else {
        EpisodeBatch {
            ways: ep.classes.len(),
            support,
            support_labels: ep.support_labels.clone(),
            query,
            query_labels: ep.query_labels.clone(),
            query_global: globals,
            query_rotation: None,
        }
    };
    Ok(batch)
}

/// Named losses of one forward pass.
#[derive(Debug, Clone)]
pub struct LossBundle {
    /// `L_r, L_e, L_c`, indexed by [`MetricId::index`].
    pub metric: [Option<Var>; 3],
    pub l_y: Var,
    pub l_kl: Option<Var>,
    pub l_m: Var,
    pub l_g: Option<Var>,
    pub l_rot: Option<Var>,
    pub l_kd: Option<Var>,
    pub l_total: Var,
    pub fused: Var,
    pub metric_probs: Vec<Var>,
    pub global: Option<PatchOutput>,
    pub rotation: Option<PatchOutput>,
}

/// Loss values of a step; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub l_r: Option<f64>,
    pub l_e: Option<f64>,
    pub l_c: Option<f64>,
    pub l_y: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_m: Option<f64>,
    pub l_g: Option<f64>,
    pub l_rot: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_total: Option<f64>,
}

impl LossValues {
    fn fields_mut(&mut self) -> [&mut Option<f64>; 10] {
        [
            &mut self.l_r,
            &mut self.l_e,
            &mut self.l_c,
            &mut self.l_y,
            &mut self.l_kl,
            &mut self.l_m,
            &mut self.l_g,
            &mut self.l_rot,
            &mut self.l_kd,
            &mut self.l_total,
        ]
    }

    fn fields(&self) -> [Option<f64>; 10] {
        [
            self.l_r, self.l_e, self.l_c, self.l_y, self.l_kl, self.l_m, self.l_g, self.l_rot, self.l_kd, self.l_total,
        ]
    }
}

/// Fixed teacher distributions for distillation.
#[derive(Debug, Clone)]
pub struct TeacherOutputs<T: Scalar> {
    pub fused: Tensor<T>,
    pub global: Tensor<T>,
    pub rotation: Option<Tensor<T>>,
}

/// A trained model used read-only as a distillation teacher.
#[derive(Debug, Clone)]
pub struct Teacher<T: Scalar> {
    pub model: Model<T>,
    pub variant: FusionVariant,
}

impl<T: Scalar> Teacher<T> {
    /// Eval-mode teacher distributions on the student's batch.
    pub fn outputs(&self, batch: &EpisodeBatch<T>, patchwise: bool) -> Result<TeacherOutputs<T>> {
        let m = &self.model;
        let mut ctx = Ctx::new(&m.store, false);
        let (s, q) = embed_episode(m, &mut ctx, batch)?;
        let mf = m.metric_forward(
            &mut ctx,
            s,
            &batch.support_labels,
            q,
            &batch.query_labels,
            batch.ways,
            &self.variant.metrics(),
            patchwise,
        )?;
        let u = ctx.p(m.fusion.u);
        let fused = fuse_predictions(&mut ctx.g, self.variant, &mf.preds, u)?;
        let global = m.global_head.forward(&mut ctx, q, &batch.query_global)?;
        let rotation = match &batch.query_rotation {
            Some(labels) => Some(m.rotation_head.forward(&mut ctx, q, labels)?),
            None => None,
        };
        Ok(TeacherOutputs {
            fused: ctx.g.value(fused).clone(),
            global: ctx.g.value(global.probs).clone(),
            rotation: rotation.map(|r| ctx.g.value(r.probs).clone()),
        })
    }
}

fn embed_episode<T: Scalar>(model: &Model<T>, ctx: &mut Ctx<T>, batch: &EpisodeBatch<T>) -> Result<(Var, Var)> {
    let ns = batch.support.shape()[0];
    let nq = batch.query.shape()[0];
    let mut data = Vec::with_capacity(batch.support.numel() + batch.query.numel());
    data.extend_from_slice(batch.support.data());
    data.extend_from_slice(batch.query.data());
    let mut shape = batch.support.shape().to_vec();
    shape[0] = ns + nq;
    let x = ctx.g.constant(Tensor::from_vec(&shape, data));
    let feats = model.embed(ctx, x)?;
    let s = ctx.g.select_rows(feats, &(0..ns).collect::<Vec<_>>());
    let q = ctx.g.select_rows(feats, &(ns..ns + nq).collect::<Vec<_>>());
    Ok((s, q))
}

fn scaled<T: Scalar>(ctx: &mut Ctx<T>, x: Var, c: f64) -> Var {
    if c == 1.0 {
        x
    } else {
        ctx.g.scale(x, lit(c))
    }
}

/// Builds the full training objective of one episode in `ctx`.
pub fn build_objective<T: Scalar>(
    model: &Model<T>,
    ctx: &mut Ctx<T>,
    batch: &EpisodeBatch<T>,
    cfg: &TrainConfig,
    teacher: Option<&TeacherOutputs<T>>,
) -> Result<LossBundle> {
    let (s, q) = embed_episode(model, ctx, batch)?;
    let variant = cfg.variant;
    let mf = model.metric_forward(
        ctx,
        s,
        &batch.support_labels,
        q,
        &batch.query_labels,
        batch.ways,
        &variant.metrics(),
        cfg.patchwise_metrics,
    )?;
    let row_scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.query.shape()[0] as f64,
    };
    let losses: Vec<Var> = mf.losses.iter().map(|&l| scaled(ctx, l, row_scale)).collect();
    let u = ctx.p(model.fusion.u);
    let log_theta = ctx.p(model.fusion.log_theta_sq);
    let mm = metric_module_loss(
        &mut ctx.g,
        variant,
        &mf.preds,
        &losses,
        &mf.row_labels,
        u,
        log_theta,
        cfg.alpha,
        row_scale,
    )?;
    let global = if cfg.global_task {
        Some(model.global_head.forward(ctx, q, &batch.query_global)?)
    } else {
        None
    };
    let rotation = if cfg.rotation_task {
        let labels = batch
            .query_rotation
            .as_ref()
            .ok_or_else(|| Error::contract("rotation task needs rotated queries"))?;
        Some(model.rotation_head.forward(ctx, q, labels)?)
    } else {
        None
    };
    let l_g = global.map(|o| scaled(ctx, o.loss, row_scale));
    let l_rot = rotation.map(|o| scaled(ctx, o.loss, row_scale));
    let mut l_total = if cfg.uses_gal() {
        let gal = ctx.p(model.gal_log_theta_sq);
        gal_loss(&mut ctx.g, mm.l_m, l_g, l_rot, gal, cfg.lambda)?
    } else {
        mm.l_m
    };
    let metric_probs: Vec<Var> = mf.preds.iter().map(|p| p.probs).collect();
    let mut l_kd = None;
    if let Some(t) = teacher {
        let t_fused = ctx.g.constant(t.fused.clone());
        let mut aux = Vec::new();
        if let Some(o) = global {
            let teacher = ctx.g.constant(t.global.clone());
            aux.push(KdPair { student: o.probs, teacher });
        }
        if let (Some(o), Some(tr)) = (rotation, &t.rotation) {
            let teacher = ctx.g.constant(tr.clone());
            aux.push(KdPair { student: o.probs, teacher });
        }
        let kd = kd_loss(&mut ctx.g, &metric_probs, t_fused, &aux, cfg.beta)?;
        let kd = scaled(ctx, kd, row_scale);
        l_total = ctx.g.add(l_total, kd);
        l_kd = Some(kd);
    }
    Ok(LossBundle {
        metric: mm.metric_losses,
        l_y: mm.l_y,
        l_kl: mm.l_kl,
        l_m: mm.l_m,
        l_g,
        l_rot,
        l_kd,
        l_total,
        fused: mm.fused,
        metric_probs,
        global,
        rotation,
    })
}

/// Reads the values of a bundle.
pub fn loss_values<T: Scalar>(ctx: &Ctx<T>, b: &LossBundle) -> LossValues {
    let v = |x: Option<Var>| x.map(|x| ctx.g.item(x).to_f64_lossy());
    LossValues {
        l_r: v(b.metric[MetricId::Relation.index()]),
        l_e: v(b.metric[MetricId::Euclidean.index()]),
        l_c: v(b.metric[MetricId::Cosine.index()]),
        l_y: v(Some(b.l_y)),
        l_kl: v(b.l_kl),
        l_m: v(Some(b.l_m)),
        l_g: v(b.l_g),
        l_rot: v(b.l_rot),
        l_kd: v(b.l_kd),
        l_total: v(Some(b.l_total)),
    }
}

fn check_finite<T: Scalar>(ctx: &Ctx<T>, loss: Var) -> Result<()> {
    if ctx.g.value(loss).is_finite() {
        return Ok(());
    }
    let (node, op) = ctx.g.first_non_finite().unwrap_or((loss.index(), "loss"));
    Err(Error::NonFinite { node, op })
}

/// Result of one two-phase step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub losses: LossValues,
    /// Fused cross-entropy of phase 2, if it ran.
    pub phase2_l_y: Option<f64>,
}

/// Owns the model and both optimizers for the duration of training.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    net_opt: Sgd<T>,
    u_opt: Sgd<T>,
    active: Vec<bool>,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        let uses_relation = variant.metrics().contains(&MetricId::Relation);
        let active = model
            .store
            .params()
            .iter()
            .map(|p| {
                let n = p.name.as_str();
                if n.starts_with("backbone.") {
                    true
                } else if n.starts_with("relation.") {
                    uses_relation
                } else if n.starts_with("global.") {
                    config.global_task
                } else if n.starts_with("rotation.") {
                    config.rotation_task
                } else if n == "fusion.u" {
                    variant.uses_u()
                } else if n == "fusion.log_theta_sq" {
                    variant.uses_theta()
                } else if n == "gal.log_theta_sq" {
                    config.uses_gal()
                } else {
                    true
                }
            })
            .collect();
        Ok(Trainer {
            net_opt: Sgd::new(config.sgd),
            u_opt: Sgd::new(config.u_sgd),
            model,
            config,
            active,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Whether parameter `i` (registration order) is trained at all.
    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    /// Phase 1 then, on cadence and for variants with `u`, phase 2.
    pub fn train_step(&mut self, batch: &EpisodeBatch<T>, teacher: Option<&TeacherOutputs<T>>) -> Result<StepReport> {
        let losses = self.phase1(batch, teacher)?;
        let phase2_l_y = if self.runs_phase2() { Some(self.phase2(batch)?) } else { None };
        self.steps += 1;
        Ok(StepReport { losses, phase2_l_y })
    }

    /// Whether the current step includes phase 2.
    pub fn runs_phase2(&self) -> bool {
        self.config.variant.uses_u() && self.steps % self.config.phase2_every == 0
    }

    /// One SGD step of the full objective over every active parameter
    /// except `u`.
    pub fn phase1(&mut self, batch: &EpisodeBatch<T>, teacher: Option<&TeacherOutputs<T>>) -> Result<LossValues> {
        let u_id = self.model.fusion.u;
        let active = self.active.clone();
        self.model.store.set_trainable(|id, _| active[id.0] && id != u_id);
        let (losses, stats) = {
            let mut ctx = Ctx::new(&self.model.store, true);
            let bundle = build_objective(&self.model, &mut ctx, batch, &self.config, teacher)?;
            check_finite(&ctx, bundle.l_total)?;
            let values = loss_values(&ctx, &bundle);
            let stats = ctx.take_stats();
            let g = std::mem::take(&mut ctx.g);
            drop(ctx);
            g.backward(bundle.l_total, &mut self.model.store)?;
            (values, stats)
        };
        self.net_opt.step(&mut self.model.store)?;
        update_running_stats(&mut self.model.store, &stats);
        self.restore_trainable();
        Ok(losses)
    }

    /// One SGD step of the fused cross-entropy over `u` alone, on a fresh
    /// forward pass, then `u` is clipped to `u_j ≥ −1` so every fusion
    /// weight stays nonnegative. Batch-norm running statistics are left
    /// alone. Returns the fused cross-entropy before the step.
    pub fn phase2(&mut self, batch: &EpisodeBatch<T>) -> Result<f64> {
        let u_id = self.model.fusion.u;
        self.model.store.set_trainable(|id, _| id == u_id);
        let l_y = {
            let mut ctx = Ctx::new(&self.model.store, true);
            let (s, q) = embed_episode(&self.model, &mut ctx, batch)?;
            let mf = self.model.metric_forward(
                &mut ctx,
                s,
                &batch.support_labels,
                q,
                &batch.query_labels,
                batch.ways,
                &self.config.variant.metrics(),
                self.config.patchwise_metrics,
            )?;
            let u = ctx.p(u_id);
            let fused = fuse_predictions(&mut ctx.g, self.config.variant, &mf.preds, u)?;
            let l_y = fused_ce(&mut ctx.g, fused, &mf.row_labels)?;
            let l_y = match self.config.reduction {
                Reduction::Sum => l_y,
                Reduction::Mean => ctx.g.scale(l_y, lit(1.0 / batch.query.shape()[0] as f64)),
            };
            check_finite(&ctx, l_y)?;
            let value = ctx.g.item(l_y).to_f64_lossy();
            let g = std::mem::take(&mut ctx.g);
            drop(ctx);
            g.backward(l_y, &mut self.model.store)?;
            value
        };
        self.u_opt.step(&mut self.model.store)?;
        self.u_opt.clamp_min(&mut self.model.store, u_id, -T::one());
        self.restore_trainable();
        Ok(l_y)
    }

    fn restore_trainable(&mut self) {
        let active = self.active.clone();
        self.model.store.set_trainable(|id, _| active[id.0]);
    }
}

/// Mean losses of an epoch with the fusion and GAL scalars at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub u: [f64; 3],
    pub theta_sq: [f64; 3],
    pub gal_theta_sq: [f64; 2],
}

pub const METRICS_HEADER: &str =
    "epoch,L_r,L_e,L_c,L_M,L_y,L_G,L_R,L_total,u_r,u_e,u_c,theta_r2,theta_e2,theta_c2,theta_G2,theta_R2";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        let l = &self.losses;
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            o(l.l_r),
            o(l.l_e),
            o(l.l_c),
            o(l.l_m),
            o(l.l_y),
            o(l.l_g),
            o(l.l_rot),
            o(l.l_total)
        );
        for v in self.u.iter().chain(&self.theta_sq).chain(&self.gal_theta_sq) {
            let _ = write!(row, ",{v}");
        }
        row
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

fn mean_values(acc: &[LossValues]) -> LossValues {
    let mut out = LossValues::default();
    if acc.is_empty() {
        return out;
    }
    let n = acc.len() as f64;
    for (k, slot) in out.fields_mut().into_iter().enumerate() {
        let vals: Vec<f64> = acc.iter().filter_map(|v| v.fields()[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / n);
        }
    }
    out
}

/// Random streams of a training run: episodes and augmentation are
/// independent of each other and of model initialisation.
pub fn train_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut episodes = ChaCha8Rng::seed_from_u64(seed);
    episodes.set_stream(1);
    let mut augment = ChaCha8Rng::seed_from_u64(seed);
    augment.set_stream(2);
    (episodes, augment)
}

/// Runs `epochs × episodes_per_epoch` steps on freshly sampled episodes,
/// calling `on_epoch` after each epoch.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Teacher<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, Vec<EpochRecord>)> {
    if data.n_classes() != model.config.global_classes {
        return Err(Error::contract(format!(
            "training split has {} classes, global classifier expects {}",
            data.n_classes(),
            model.config.global_classes
        )));
    }
    if let Some(t) = teacher {
        if t.model.config.global_classes != model.config.global_classes {
            return Err(Error::contract(format!(
                "teacher has {} global classes, student {}",
                t.model.config.global_classes, model.config.global_classes
            )));
        }
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let by_class = data.by_class();
    let (mut ep_rng, mut aug_rng) = train_rngs(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = Vec::with_capacity(cfg.episodes_per_epoch);
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(&by_class, &cfg.episode, &mut ep_rng)?;
            let batch = make_batch::<T, _>(data, &ep, &cfg.augment, cfg.rotates(), &mut aug_rng)?;
            let t_out = match teacher {
                Some(t) => Some(t.outputs(&batch, cfg.patchwise_metrics)?),
                None => None,
            };
            acc.push(trainer.train_step(&batch, t_out.as_ref())?.losses);
        }
        let m = &trainer.model;
        let record = EpochRecord {
            epoch: epoch + 1,
            losses: mean_values(&acc),
            u: m.u(),
            theta_sq: m.theta_sq(),
            gal_theta_sq: m.gal_theta_sq(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((trainer.model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_data(classes: usize, per: usize) -> Dataset {
        let s = 16;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for k in 0..per {
                for i in 0..s * s {
                    let x = ((i * (c + 2) + k * 7) % 17) as f32 / 8.0 - 1.0;
                    images.push(x + c as f32 * 0.1);
                }
                labels.push(c);
            }
        }
        Dataset::from_parts("base", 1, s, images, labels, (0..classes).collect()).unwrap()
    }

    fn toy_config(variant: FusionVariant) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            episodes_per_epoch: 2,
            episode: EpisodeSpec::new(3, 1, 2),
            variant,
            ..TrainConfig::default()
        }
    }

    fn toy_model(classes: usize) -> Model<f64> {
        Model::new(
            ModelConfig {
                in_channels: 1,
                image_size: 16,
                width: 4,
                global_classes: classes,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = toy_data(4, 4);
        let model = toy_model(4);
        let before = model.to_bytes(FusionVariant::Amm).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..toy_config(FusionVariant::Amm)
        };
        let (after, records) = train(model, &data, &cfg, None, |_| {}).unwrap();
        assert!(records.is_empty());
        assert_eq!(after.to_bytes(FusionVariant::Amm).unwrap(), before);
    }

    #[test]
    fn csv_leaves_absent_terms_empty() {
        let r = EpochRecord {
            epoch: 1,
            losses: LossValues {
                l_e: Some(1.5),
                l_total: Some(1.5),
                ..LossValues::default()
            },
            u: [0.0; 3],
            theta_sq: [1.0; 3],
            gal_theta_sq: [1.0; 2],
        };
        let csv = metrics_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.next(), Some("1,,1.5,,,,,,1.5,0,0,0,1,1,1,1,1"));
    }

    #[test]
    fn individual_variant_freezes_unused_heads() {
        let data = toy_data(4, 4);
        let model = toy_model(4);
        let cfg = TrainConfig {
            global_task: false,
            rotation_task: false,
            ..toy_config(FusionVariant::Individual(MetricId::Euclidean))
        };
        let before = model.clone();
        let (after, _) = train(model, &data, &cfg, None, |_| {}).unwrap();
        for (a, b) in after.store.params().iter().zip(before.store.params()) {
            let changed = a.value.data() != b.value.data();
            assert_eq!(changed, a.name.starts_with("backbone."), "{}", a.name);
        }
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let data = toy_data(4, 4);
        let model = toy_model(5);
        assert!(train(model, &data, &toy_config(FusionVariant::Nmm), None, |_| {}).is_err());
    }
}
