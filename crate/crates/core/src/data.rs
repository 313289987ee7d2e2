//! Synthetic oriented-texture datasets, the on-disk manifest, loading and
//! training-time augmentation.
//!
//! Each sample is a raw little-endian `f32` file in `(channel, row, col)`
//! order. The manifest is TOML and lists both splits with their
//! normalisation statistics and per-file SHA-256 checksums.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
pub const GENERATOR: &str = "oriented-texture";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Per-sample orientation jitter in degrees.
    pub orientation_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            base_classes: 20,
            novel_classes: 10,
            samples_per_class: 60,
            image_size: 16,
            channels: 1,
            seed: 0,
            noise: 0.6,
            orientation_jitter: 12.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.novel_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("class and sample counts must be positive".into()));
        }
        if self.image_size < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config("image size must be at least 4 and channels 1 or 3".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.orientation_jitter.is_finite()) {
            return Err(Error::Config("noise and jitter must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.novel_classes
    }
}

/// Appearance of one class.
#[derive(Debug, Clone)]
struct ClassStyle {
    orientation: f64,
    frequency: f64,
    blob_x: f64,
    blob_y: f64,
    blob_amp: f64,
    colour: [f64; 3],
}

/// Orientations stay within a quarter turn and blobs in the upper-left
/// quadrant, so every 90° rotation of a sample leaves the class manifold.
fn class_style(rng: &mut ChaCha8Rng) -> ClassStyle {
    let angle = rng.random_range(1.15 * PI..1.35 * PI);
    let radius = rng.random_range(0.2..0.32);
    ClassStyle {
        orientation: rng.random_range(0.0..PI / 2.0),
        frequency: rng.random_range(1.5..4.0),
        blob_x: 0.5 + radius * angle.cos(),
        blob_y: 0.5 + radius * angle.sin(),
        blob_amp: rng.random_range(0.8..1.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        colour: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
    }
}

/// One image `[channels, size, size]`: a class-oriented grating plus an
/// off-centre blob, with random phase, jitter and noise.
fn render(style: &ClassStyle, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.image_size;
    let theta = style.orientation + rng.random_range(-1.0..1.0) * spec.orientation_jitter.to_radians();
    let freq = style.frequency * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let bx = style.blob_x + rng.random_range(-0.06..0.06);
    let by = style.blob_y + rng.random_range(-0.06..0.06);
    let amp = rng.random_range(0.7..1.3);
    let sigma = 0.12;
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(spec.channels * s * s);
    for ch in 0..spec.channels {
        let tint = if spec.channels == 1 { 1.0 } else { style.colour[ch] };
        for i in 0..s {
            for j in 0..s {
                let y = (i as f64 + 0.5) / s as f64;
                let x = (j as f64 + 0.5) / s as f64;
                let t = (x - 0.5) * ct + (y - 0.5) * st;
                let grating = (2.0 * PI * freq * t + phase).sin();
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                let blob = style.blob_amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let v = tint * amp * (grating + blob) + noise.sample(rng);
                out.push(v as f32);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub file: String,
    pub class: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub name: String,
    pub classes: Vec<usize>,
    /// Per-channel mean and standard deviation of the raw split data.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub generator: String,
    pub image_size: usize,
    pub channels: usize,
    pub splits: Vec<SplitManifest>,
}

impl Manifest {
    /// Checks structure and that the class sets of the splits are disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        let mut seen_names = HashSet::new();
        let mut seen_classes: HashSet<usize> = HashSet::new();
        for split in &self.splits {
            if !seen_names.insert(split.name.as_str()) {
                return Err(Error::Config(format!("duplicate split {:?}", split.name)));
            }
            if split.mean.len() != self.channels || split.std.len() != self.channels {
                return Err(Error::Config(format!("split {:?}: statistics per channel expected", split.name)));
            }
            if split.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("split {:?}: non-positive std", split.name)));
            }
            let classes: HashSet<usize> = split.classes.iter().copied().collect();
            if classes.len() != split.classes.len() {
                return Err(Error::Config(format!("split {:?} lists a class twice", split.name)));
            }
            if let Some(c) = classes.iter().find(|c| seen_classes.contains(c)) {
                return Err(Error::Config(format!(
                    "class {c} appears in more than one split; splits must be disjoint"
                )));
            }
            seen_classes.extend(classes.iter().copied());
            if let Some(s) = split.samples.iter().find(|s| !classes.contains(&s.class)) {
                return Err(Error::Config(format!(
                    "sample {} has class {} outside split {:?}",
                    s.file, s.class, split.name
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("manifest has no split {name:?}")))
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn channel_stats(images: &[Vec<f32>], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut count = 0usize;
    for img in images {
        let plane = img.len() / channels;
        for (ch, chunk) in img.chunks(plane).enumerate() {
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count as f64;
    let std = mean
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| (q / n - (s / n).powi(2)).max(1e-12).sqrt())
        .collect();
    (mean.iter().map(|&s| s / n).collect(), std)
}

/// Writes `root/manifest.toml` plus one raw file per sample. The first
/// `base_classes` classes form the `base` split, the rest `novel`.
/// Regeneration from the same `SyntheticSpec` is byte-identical.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut style_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles: Vec<ClassStyle> = (0..spec.total_classes()).map(|_| class_style(&mut style_rng)).collect();
    let mut splits = Vec::new();
    for (name, range) in [
        ("base", 0..spec.base_classes),
        ("novel", spec.base_classes..spec.total_classes()),
    ] {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut images = Vec::new();
        let mut samples = Vec::new();
        for class in range.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + class as u64);
            for k in 0..spec.samples_per_class {
                let img = render(&styles[class], spec, &mut rng);
                let bytes = encode_f32(&img);
                let file = format!("{name}/c{class:03}_s{k:04}.f32");
                let path = root.join(&file);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                samples.push(SampleEntry {
                    file,
                    class,
                    sha256: sha256_hex(&bytes),
                });
                images.push(img);
            }
        }
        let (mean, std) = channel_stats(&images, spec.channels);
        splits.push(SplitManifest {
            name: name.to_string(),
            classes: range.collect(),
            mean,
            std,
            samples,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator: GENERATOR.to_string(),
        image_size: spec.image_size,
        channels: spec.channels,
        splits,
    };
    manifest.validate()?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One split held in memory, normalised with the manifest statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: String,
    pub channels: usize,
    pub image_size: usize,
    images: Vec<f32>,
    /// Label in `[0, classes.len())` per sample.
    pub labels: Vec<usize>,
    /// Manifest class id for each label.
    pub classes: Vec<usize>,
    /// File name stem per sample.
    pub sample_ids: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from already-normalised images.
    pub fn from_parts(
        split: &str,
        channels: usize,
        image_size: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
        classes: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::contract("image buffer does not match label count"));
        }
        if labels.iter().any(|&l| l >= classes.len()) {
            return Err(Error::contract("label outside class list"));
        }
        let sample_ids = (0..labels.len()).map(|i| format!("{split}_{i}")).collect();
        Ok(Dataset {
            split: split.to_string(),
            channels,
            image_size,
            images,
            labels,
            classes,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Sample indices per label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// `[indices.len(), C, S, S]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| lit::<T>(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.image_size, self.image_size], data)
    }
}

/// Loads one split, verifying size and checksum of every file.
pub fn load_dataset(manifest_path: &Path, split: &str) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let sm = manifest.split(split)?;
    let (c, s) = (manifest.channels, manifest.image_size);
    let per = c * s * s;
    let mut images = Vec::with_capacity(per * sm.samples.len());
    let mut labels = Vec::with_capacity(sm.samples.len());
    let mut sample_ids = Vec::with_capacity(sm.samples.len());
    for entry in &sm.samples {
        let path = root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != per * 4 {
            return Err(Error::load(
                &path,
                format!("expected {} bytes for {c}x{s}x{s} f32, found {}", per * 4, bytes.len()),
            ));
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::load(&path, "checksum mismatch"));
        }
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            let ch = k / (s * s);
            images.push(((v - sm.mean[ch]) / sm.std[ch]) as f32);
        }
        labels.push(sm.classes.iter().position(|&k| k == entry.class).expect("validated"));
        let stem = Path::new(&entry.file)
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.file.clone());
        sample_ids.push(stem);
    }
    Ok(Dataset {
        split: split.to_string(),
        channels: c,
        image_size: s,
        images,
        labels,
        classes: sm.classes.clone(),
        sample_ids,
    })
}

/// Training-time augmentations. All draws come from the caller's RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub horizontal_flip: bool,
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_padding: usize,
    /// Probability of erasing one random rectangle.
    pub erase_prob: f64,
    /// Relative strength of per-channel scale/shift (3-channel data only).
    pub color_jitter: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            horizontal_flip: false,
            crop_padding: 0,
            erase_prob: 0.0,
            color_jitter: 0.0,
        }
    }
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.crop_padding == 0 && self.erase_prob == 0.0 && self.color_jitter == 0.0
    }

    /// Augments one `[channels, size, size]` image in place.
    pub fn apply<T: Scalar, R: Rng>(&self, img: &mut [T], channels: usize, size: usize, rng: &mut R) {
        let plane = size * size;
        if self.horizontal_flip && rng.random_bool(0.5) {
            for ch in 0..channels {
                for i in 0..size {
                    img[ch * plane + i * size..ch * plane + (i + 1) * size].reverse();
                }
            }
        }
        if self.crop_padding > 0 {
            let p = self.crop_padding as isize;
            let dy = rng.random_range(-(p as i64)..=p as i64) as isize;
            let dx = rng.random_range(-(p as i64)..=p as i64) as isize;
            let src = img.to_vec();
            for ch in 0..channels {
                for i in 0..size as isize {
                    for j in 0..size as isize {
                        let (si, sj) = (i + dy, j + dx);
                        let inside = si >= 0 && sj >= 0 && si < size as isize && sj < size as isize;
                        img[ch * plane + (i as usize) * size + j as usize] = if inside {
                            src[ch * plane + (si as usize) * size + sj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
        if self.erase_prob > 0.0 && rng.random_bool(self.erase_prob.min(1.0)) {
            let h = rng.random_range(1..=size.div_ceil(2));
            let w = rng.random_range(1..=size.div_ceil(2));
            let top = rng.random_range(0..=size - h);
            let left = rng.random_range(0..=size - w);
            for ch in 0..channels {
                for i in top..top + h {
                    img[ch * plane + i * size + left..ch * plane + i * size + left + w].fill(T::zero());
                }
            }
        }
        if self.color_jitter > 0.0 && channels == 3 {
            for ch in 0..channels {
                let scale: T = lit(1.0 + rng.random_range(-self.color_jitter..=self.color_jitter));
                let shift: T = lit(rng.random_range(-self.color_jitter..=self.color_jitter));
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = *v * scale + shift;
                }
            }
        }
    }

    /// Augments every image of a `[B, C, S, S]` batch.
    pub fn apply_batch<T: Scalar, R: Rng>(&self, batch: &mut Tensor<T>, rng: &mut R) {
        if self.is_identity() {
            return;
        }
        let s = batch.shape().to_vec();
        let per = s[1] * s[2] * s[3];
        for img in batch.data_mut().chunks_mut(per) {
            self.apply(img, s[1], s[2], rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            base_classes: 6,
            novel_classes: 4,
            samples_per_class: 5,
            image_size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_counts_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small_spec(), dir.path()).unwrap();
        let files: usize = m.splits.iter().map(|s| s.samples.len()).sum();
        assert_eq!(files, 50);
        for split in ["base", "novel"] {
            assert_eq!(fs::read_dir(dir.path().join(split)).unwrap().count(), if split == "base" { 30 } else { 20 });
        }
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn disjointness_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic(&small_spec(), dir.path()).unwrap();
        m.splits[1].classes.push(0);
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("disjoint"));
    }

    #[test]
    fn unknown_manifest_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("colour = true\n{text}")).unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let aug = Augment {
            horizontal_flip: true,
            ..Augment::default()
        };
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut once = img.clone();
        let mut n = 0;
        // Flip draws are random; apply until it has flipped twice.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        while n < 2 {
            let before = once.clone();
            aug.apply(&mut once, 1, 4, &mut rng);
            if once != before {
                n += 1;
            }
        }
        assert_eq!(once, img);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let aug = Augment {
            horizontal_flip: true,
            crop_padding: 2,
            erase_prob: 0.5,
            color_jitter: 0.2,
        };
        let img: Vec<f64> = (0..3 * 64).map(|i| (i as f64).sin()).collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut x = img.clone();
            for _ in 0..5 {
                aug.apply(&mut x, 3, 8, &mut rng);
            }
            x
        };
        assert_eq!(run(), run());
    }
}
