//! N-way K-shot episode sampling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    /// Queries per class.
    pub queries: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 1,
            queries: 15,
        }
    }
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        EpisodeSpec { ways, shots, queries }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            return Err(Error::contract(format!(
                "episode needs ways >= 2, shots >= 1, queries >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn n_support(&self) -> usize {
        self.ways * self.shots
    }

    pub fn n_query(&self) -> usize {
        self.ways * self.queries
    }
}

/// Sample indices of one episode. Way `k` holds dataset class
/// `classes[k]`; labels are way indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws `ways` classes without replacement, then `shots + queries` samples
/// per class without replacement. `by_class[c]` lists the samples of class
/// `c`.
pub fn sample_episode<R: Rng + ?Sized>(by_class: &[Vec<usize>], spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    if by_class.len() < spec.ways {
        return Err(Error::contract(format!(
            "{}-way episode needs {} classes, dataset has {}",
            spec.ways,
            spec.ways,
            by_class.len()
        )));
    }
    let need = spec.shots + spec.queries;
    if let Some(c) = by_class.iter().position(|s| s.len() < need) {
        return Err(Error::contract(format!(
            "class {c} has {} samples, episode needs {need}",
            by_class[c].len()
        )));
    }
    let classes: Vec<usize> = sample(rng, by_class.len(), spec.ways).into_vec();
    let mut ep = Episode {
        classes,
        support: Vec::with_capacity(spec.n_support()),
        support_labels: Vec::with_capacity(spec.n_support()),
        query: Vec::with_capacity(spec.n_query()),
        query_labels: Vec::with_capacity(spec.n_query()),
    };
    let mut picks = Vec::with_capacity(spec.ways);
    for &c in &ep.classes {
        let chosen: Vec<usize> = sample(rng, by_class[c].len(), need).into_iter().map(|i| by_class[c][i]).collect();
        picks.push(chosen);
    }
    for (way, chosen) in picks.iter().enumerate() {
        ep.support.extend_from_slice(&chosen[..spec.shots]);
        ep.support_labels.extend(std::iter::repeat_n(way, spec.shots));
    }
    for (way, chosen) in picks.iter().enumerate() {
        ep.query.extend_from_slice(&chosen[spec.shots..]);
        ep.query_labels.extend(std::iter::repeat_n(way, spec.queries));
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classes(n: usize, per: usize) -> Vec<Vec<usize>> {
        (0..n).map(|c| (c * per..(c + 1) * per).collect()).collect()
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&classes(10, 20), &EpisodeSpec::new(5, 1, 15), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
    }

    #[test]
    fn exhausts_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&classes(2, 2), &EpisodeSpec::new(2, 1, 1), &mut rng).unwrap();
        let mut cs = ep.classes.clone();
        cs.sort();
        assert_eq!(cs, vec![0, 1]);
    }

    #[test]
    fn same_seed_same_episode() {
        let data = classes(8, 10);
        let spec = EpisodeSpec::new(3, 2, 4);
        let a = sample_episode(&data, &spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_episode(&data, &spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&classes(5, 3), &EpisodeSpec::new(5, 1, 3), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = sample_episode(&classes(3, 30), &EpisodeSpec::new(5, 1, 3), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
