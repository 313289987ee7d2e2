use std::fs;
use std::path::Path;

use metafuse::data::{generate_synthetic, load_dataset, read_manifest, SyntheticSpec};
use metafuse::error::Error;
use metafuse::eval::export_embeddings;
use metafuse::{Model, ModelConfig};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        base_classes: 4,
        novel_classes: 3,
        samples_per_class: 12,
        image_size: 16,
        ..SyntheticSpec::default()
    }
}

fn all_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["base", "novel"] {
        let mut names: Vec<_> = fs::read_dir(root.join(split))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for n in names {
            out.push((n.clone(), fs::read(root.join(split).join(&n)).unwrap()));
        }
    }
    out.push(("manifest".into(), fs::read(root.join("manifest.toml")).unwrap()));
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), a.path()).unwrap();
    generate_synthetic(&spec(), b.path()).unwrap();
    assert_eq!(all_bytes(a.path()), all_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SyntheticSpec { seed: 1, ..spec() }, c.path()).unwrap();
    assert_ne!(all_bytes(a.path()), all_bytes(c.path()));
}

#[test]
fn ten_classes_of_fifty() {
    let dir = tempfile::tempdir().unwrap();
    let s = SyntheticSpec {
        base_classes: 6,
        novel_classes: 4,
        samples_per_class: 50,
        ..spec()
    };
    generate_synthetic(&s, dir.path()).unwrap();
    let files = all_bytes(dir.path()).len() - 1;
    assert_eq!(files, 500);
}

#[test]
fn round_trip_preserves_counts_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&spec(), dir.path()).unwrap();
    let path = dir.path().join("manifest.toml");
    assert_eq!(read_manifest(&path).unwrap(), m);
    let base = load_dataset(&path, "base").unwrap();
    let novel = load_dataset(&path, "novel").unwrap();
    assert_eq!(base.len(), 48);
    assert_eq!(novel.len(), 36);
    assert_eq!(base.classes, vec![0, 1, 2, 3]);
    assert_eq!(novel.classes, vec![4, 5, 6]);
    for (i, &l) in novel.labels.iter().enumerate() {
        assert_eq!(l, i / 12);
    }
}

#[test]
fn loaded_split_is_standardised() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), dir.path()).unwrap();
    for split in ["base", "novel"] {
        let d = load_dataset(&dir.path().join("manifest.toml"), split).unwrap();
        let vals: Vec<f64> = (0..d.len()).flat_map(|i| d.image(i).iter().map(|&x| x as f64)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "{split} mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "{split} var {var}");
    }
}

#[test]
fn class_means_are_separated() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), dir.path()).unwrap();
    let d = load_dataset(&dir.path().join("manifest.toml"), "base").unwrap();
    let len = d.image_len();
    let means: Vec<Vec<f64>> = d
        .by_class()
        .iter()
        .map(|idx| {
            let mut m = vec![0.0; len];
            for &i in idx {
                for (a, &x) in m.iter_mut().zip(d.image(i)) {
                    *a += x as f64 / idx.len() as f64;
                }
            }
            m
        })
        .collect();
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(dist > 1.0, "classes {a} and {b} too close: {dist}");
        }
    }
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), dir.path()).unwrap();
    let victim = dir.path().join("novel/c005_s0003.f32");
    fs::remove_file(&victim).unwrap();
    let err = load_dataset(&dir.path().join("manifest.toml"), "novel").unwrap_err();
    assert!(err.to_string().contains("c005_s0003.f32"), "{err}");
    assert!(load_dataset(&dir.path().join("manifest.toml"), "base").is_ok());
}

#[test]
fn corrupted_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), dir.path()).unwrap();
    let victim = dir.path().join("base/c001_s0000.f32");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] ^= 1;
    fs::write(&victim, &bytes).unwrap();
    let err = load_dataset(&dir.path().join("manifest.toml"), "base").unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
    assert!(err.to_string().contains("c001_s0000.f32"), "{err}");
    bytes.truncate(8);
    fs::write(&victim, &bytes).unwrap();
    let err = load_dataset(&dir.path().join("manifest.toml"), "base").unwrap_err();
    assert!(err.to_string().contains("bytes"), "{err}");
}

#[test]
fn export_rows_match_samples_and_width() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(), dir.path()).unwrap();
    let d = load_dataset(&dir.path().join("manifest.toml"), "novel").unwrap();
    let model = Model::<f32>::new(
        ModelConfig {
            in_channels: 1,
            image_size: 16,
            width: 6,
            global_classes: 4,
        },
        3,
    )
    .unwrap();
    let out = dir.path().join("emb.csv");
    assert_eq!(export_embeddings(&model, &d, &out).unwrap(), d.len());
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), d.len() + 1);
    assert_eq!(lines[0].split(',').count(), 2 + 6);
    assert!(lines[1].starts_with("c004_s0000,4,"));
    let again = dir.path().join("emb2.csv");
    export_embeddings(&model, &d, &again).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}
