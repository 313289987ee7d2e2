//! Inductive episodic evaluation with 95% confidence intervals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::episode::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fusion::{fuse_predictions, FusionVariant};
use crate::metrics::MetricId;
use crate::model::Model;
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images embedded per forward pass when filling the cache.
pub const EMBED_CHUNK: usize = 64;

/// Mean and 95% half-width, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub ci95: f64,
}

/// `(mean, 1.96·σ/√n)` of per-episode accuracies in `[0, 1]`, as percent.
/// `σ` is the population standard deviation, zero for a single episode.
pub fn mean_ci95(acc: &[f64]) -> Accuracy {
    if acc.is_empty() {
        return Accuracy { mean: 0.0, ci95: 0.0 };
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = if acc.len() == 1 {
        0.0
    } else {
        acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n
    };
    Accuracy {
        mean: 100.0 * mean,
        ci95: 100.0 * 1.96 * var.sqrt() / n.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAccuracy {
    pub metric: MetricId,
    pub accuracy: Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub episode: EpisodeSpec,
    pub n_episodes: usize,
    pub seed: u64,
    /// Accuracy of the fused prediction.
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// Accuracy of each constituent metric of the same model.
    pub per_metric: Vec<MetricAccuracy>,
    #[serde(skip)]
    pub episode_accuracies: Vec<f64>,
}

impl EvalReport {
    /// Table-style summary such as `53.47 ± 0.45`.
    pub fn acc_ci(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean_accuracy, self.ci95)
    }

    pub fn to_text(&self) -> String {
        let e = &self.episode;
        let mut s = format!(
            "{} {}-way {}-shot, {} episodes: {}\n",
            self.variant,
            e.ways,
            e.shots,
            self.n_episodes,
            self.acc_ci()
        );
        for m in &self.per_metric {
            let _ = writeln!(s, "  {:<9} {:.2} ± {:.2}", m.metric.name(), m.accuracy.mean, m.accuracy.ci95);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("prediction,mean_accuracy,ci95,n_episodes,ways,shots,queries,seed\n");
        let mut row = |name: &str, a: f64, c: f64| {
            let e = &self.episode;
            let _ = writeln!(
                s,
                "{name},{a},{c},{},{},{},{},{}",
                self.n_episodes, e.ways, e.shots, e.queries, self.seed
            );
        };
        row("merged", self.mean_accuracy, self.ci95);
        for m in &self.per_metric {
            row(m.metric.name(), m.accuracy.mean, m.accuracy.ci95);
        }
        s
    }

    pub fn metric(&self, m: MetricId) -> Option<Accuracy> {
        self.per_metric.iter().find(|x| x.metric == m).map(|x| x.accuracy)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("eval.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("eval.txt");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Predicted way per query, merged and per metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePrediction {
    pub merged: Vec<usize>,
    /// Indexed by [`MetricId::index`].
    pub per_metric: [Option<Vec<usize>>; 3],
}

/// Anything that can classify the queries of an episode.
pub trait EpisodePredictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<EpisodePrediction>;
    fn metrics(&self) -> Vec<MetricId>;
}

/// Eval-mode embeddings of every sample of `data`, `[n, c, h, w]`.
pub fn embed_dataset<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<Tensor<T>> {
    let [c, h, w] = model.feature_shape();
    let mut out = Vec::with_capacity(data.len() * c * h * w);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EMBED_CHUNK) {
        let mut ctx = Ctx::new(&model.store, false);
        let x = ctx.g.constant(data.batch::<T>(chunk));
        let f = model.embed(&mut ctx, x)?;
        out.extend_from_slice(ctx.g.value(f).data());
    }
    Ok(Tensor::from_vec(&[data.len(), c, h, w], out))
}

/// A model with its embeddings of one split cached.
pub struct ModelPredictor<'a, T: Scalar> {
    model: &'a Model<T>,
    variant: FusionVariant,
    features: Tensor<T>,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    pub fn new(model: &'a Model<T>, variant: FusionVariant, data: &Dataset) -> Result<Self> {
        Ok(ModelPredictor {
            model,
            variant,
            features: embed_dataset(model, data)?,
        })
    }

    fn rows(&self, idx: &[usize]) -> Tensor<T> {
        let s = self.features.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(&[idx.len(), s[1], s[2], s[3]], data)
    }
}

fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (k, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl<T: Scalar> EpisodePredictor for ModelPredictor<'_, T> {
    fn predict(&self, ep: &Episode) -> Result<EpisodePrediction> {
        let mut ctx = Ctx::new(&self.model.store, false);
        let s = ctx.g.constant(self.rows(&ep.support));
        let q = ctx.g.constant(self.rows(&ep.query));
        let metrics = self.variant.metrics();
        let mf = self.model.metric_forward(
            &mut ctx,
            s,
            &ep.support_labels,
            q,
            &ep.query_labels,
            ep.classes.len(),
            &metrics,
            false,
        )?;
        let u = ctx.p(self.model.fusion.u);
        let fused = fuse_predictions(&mut ctx.g, self.variant, &mf.preds, u)?;
        let mut per_metric: [Option<Vec<usize>>; 3] = Default::default();
        for p in &mf.preds {
            per_metric[p.metric.index()] = Some(argmax_rows(ctx.g.value(p.probs)));
        }
        Ok(EpisodePrediction {
            merged: argmax_rows(ctx.g.value(fused)),
            per_metric,
        })
    }

    fn metrics(&self) -> Vec<MetricId> {
        self.variant.metrics()
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Per-episode accuracies: merged, then one column per metric.
type EpisodeScores = (f64, [f64; 3]);

/// Samples `n_episodes` episodes (episode `i` from its own stream `i` of
/// `seed`) and scores them on `workers` threads. Results depend only on
/// the seed, never on the worker count.
pub fn evaluate_with<P: EpisodePredictor>(
    predictor: &P,
    data: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    workers: usize,
    variant: &str,
) -> Result<EvalReport> {
    spec.validate()?;
    if n_episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let by_class = data.by_class();
    let workers = workers.clamp(1, n_episodes);
    let score = |i: usize| -> Result<EpisodeScores> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let ep = sample_episode(&by_class, spec, &mut rng)?;
        let p = predictor.predict(&ep)?;
        let mut per = [0.0; 3];
        for (k, slot) in per.iter_mut().enumerate() {
            if let Some(v) = &p.per_metric[k] {
                *slot = accuracy(v, &ep.query_labels);
            }
        }
        Ok((accuracy(&p.merged, &ep.query_labels), per))
    };
    let results: Vec<Result<EpisodeScores>> = if workers == 1 {
        (0..n_episodes).map(score).collect()
    } else {
        let mut slots: Vec<Option<Result<EpisodeScores>>> = (0..n_episodes).map(|_| None).collect();
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let score = &score;
                    sc.spawn(move || (w..n_episodes).step_by(workers).map(|i| (i, score(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every episode scored")).collect()
    };
    let scores = results.into_iter().collect::<Result<Vec<_>>>()?;
    let merged: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let overall = mean_ci95(&merged);
    let per_metric = predictor
        .metrics()
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = scores.iter().map(|s| s.1[m.index()]).collect();
            MetricAccuracy {
                metric: m,
                accuracy: mean_ci95(&v),
            }
        })
        .collect();
    Ok(EvalReport {
        variant: variant.to_string(),
        episode: *spec,
        n_episodes,
        seed,
        mean_accuracy: overall.mean,
        ci95: overall.ci95,
        per_metric,
        episode_accuracies: merged,
    })
}

/// Evaluates `model` with the fusion rule of `variant`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    variant: FusionVariant,
    data: &Dataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let p = ModelPredictor::new(model, variant, data)?;
    evaluate_with(&p, data, spec, n_episodes, seed, workers, variant.name())
}

/// Writes `sample_id,class_id,f0,..` rows of globally pooled eval-mode
/// features.
pub fn export_embeddings<T: Scalar>(model: &Model<T>, data: &Dataset, path: &Path) -> Result<usize> {
    let feats = embed_dataset(model, data)?;
    let s = feats.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = String::from("sample_id,class_id");
    for k in 0..c {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&data.sample_ids[i]);
        let _ = write!(out, ",{}", data.classes[data.labels[i]]);
        for k in 0..c {
            let base = (i * c + k) * hw;
            let sum: f64 = feats.data()[base..base + hw].iter().map(|v| v.to_f64_lossy()).sum();
            let _ = write!(out, ",{}", sum / hw as f64);
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct AlwaysZero;

    impl EpisodePredictor for AlwaysZero {
        fn predict(&self, ep: &Episode) -> Result<EpisodePrediction> {
            Ok(EpisodePrediction {
                merged: vec![0; ep.query.len()],
                per_metric: Default::default(),
            })
        }
        fn metrics(&self) -> Vec<MetricId> {
            Vec::new()
        }
    }

    fn flat_data(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let labels = (0..n).map(|i| i / per).collect();
        let images = (0..n * 256).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
        Dataset::from_parts("novel", 1, 16, images, labels, (0..classes).collect()).unwrap()
    }

    #[test]
    fn hand_fed_ci() {
        let a = mean_ci95(&[1.0, 0.5]);
        assert_eq!(a.mean, 75.0);
        assert!((a.ci95 - 1.96 * 0.25 / 2f64.sqrt() * 100.0).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.4]).ci95, 0.0);
    }

    #[test]
    fn constant_predictor_hits_chance() {
        let data = flat_data(8, 20);
        let r = evaluate_with(&AlwaysZero, &data, &EpisodeSpec::new(5, 1, 15), 50, 3, 1, "zero").unwrap();
        assert!((r.mean_accuracy - 20.0).abs() < 1e-9);
        assert!(r.ci95 < 1e-9);
    }

    #[test]
    fn worker_count_does_not_change_report() {
        let data = flat_data(6, 10);
        let model = Model::<f64>::new(
            crate::model::ModelConfig {
                in_channels: 1,
                image_size: 16,
                width: 4,
                global_classes: 2,
            },
            0,
        )
        .unwrap();
        let spec = EpisodeSpec::new(3, 1, 2);
        let a = evaluate(&model, FusionVariant::Amm, &data, &spec, 7, 5, 1).unwrap();
        let b = evaluate(&model, FusionVariant::Amm, &data, &spec, 7, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episode_accuracies, b.episode_accuracies);
        assert_eq!(a.per_metric.len(), 3);
    }

    #[test]
    fn export_has_one_row_per_sample() {
        let data = flat_data(2, 3);
        let model = Model::<f32>::new(
            crate::model::ModelConfig {
                in_channels: 1,
                image_size: 16,
                width: 5,
                global_classes: 2,
            },
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        assert_eq!(export_embeddings(&model, &data, &path).unwrap(), 6);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0].split(',').count(), 2 + 5);
    }
}
