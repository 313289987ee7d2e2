//! Run configuration: a TOML file, named flag overrides and `--set`
//! overrides for any other field.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metafuse::data::SyntheticSpec;
use metafuse::episode::EpisodeSpec;
use metafuse::train::TrainConfig;
use metafuse::Precision;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub train_split: String,
    pub eval_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("data/manifest.toml"),
            train_split: "base".into(),
            eval_split: "novel".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { width: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episode: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episode: EpisodeSpec::default(),
            episodes: 1000,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Floating-point width of training and evaluation, 32 or 64.
    pub precision: u32,
    pub deterministic: bool,
    pub teacher: Option<PathBuf>,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            precision: 32,
            deterministic: false,
            teacher: None,
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn precision(&self) -> Result<Precision> {
        match Precision::from_bits(self.precision) {
            Some(p) => Ok(p),
            None => bail!("precision must be 32 or 64, got {}", self.precision),
        }
    }

    /// Applies `key=value`, where `key` is a dotted path such as
    /// `train.sgd.learning_rate` and `value` is a TOML literal (bare words
    /// are taken as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .with_context(|| format!("override {assignment:?} is not key=value"))?;
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self)?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .with_context(|| format!("{key}: {} is not a table", parts[..i].join(".")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root.try_into().with_context(|| format!("applying override {key}"))?;
        Ok(())
    }

    /// Writes the resolved configuration as `config.toml` in the output
    /// directory.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join("config.toml");
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochz = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: RunConfig = toml::from_str("[train.sgd]\nlearning_rate = 0.1\n").unwrap();
        assert_eq!(c.train.sgd.learning_rate, 0.1);
        assert_eq!(c.train.sgd.momentum, 0.9);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("train.sgd.learning_rate=0.2").unwrap();
        c.set("train.variant=amm-v1").unwrap();
        c.set("eval.episode.ways = 3").unwrap();
        c.set("teacher=ckpt/t.amt").unwrap();
        assert_eq!(c.train.sgd.learning_rate, 0.2);
        assert_eq!(c.train.variant.name(), "amm-v1");
        assert_eq!(c.eval.episode.ways, 3);
        assert_eq!(c.teacher, Some(PathBuf::from("ckpt/t.amt")));
        assert!(c.set("train.nope=1").is_err());
        assert!(c.set("noequals").is_err());
    }
}
