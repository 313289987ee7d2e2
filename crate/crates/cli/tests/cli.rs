use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn metafuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metafuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn metafuse")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--data",
    "d/manifest.toml",
    "--set",
    "synthetic.samples_per_class=12",
    "--set",
    "synthetic.base_classes=6",
    "--set",
    "synthetic.novel_classes=5",
    "--set",
    "model.width=4",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

fn generated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&metafuse(&with(&["generate"], &["--out", "gen"]), dir.path()));
    dir
}

fn train_args<'a>(variant: &'a str, out: &'a str) -> Vec<&'a str> {
    with(
        &["train"],
        &[
            "--variant",
            variant,
            "--epochs",
            "2",
            "--episodes",
            "2",
            "--queries",
            "2",
            "--seed",
            "4",
            "--out",
            out,
            "--deterministic",
        ],
    )
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = metafuse(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = metafuse(&["train", "--variant", "triple"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = metafuse(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn contract_errors_exit_one_with_message() {
    let dir = generated();
    let out = metafuse(&with(&["distill"], &["--out", "o"]), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher"));
    let out = metafuse(&with(&["train"], &["--ways", "9", "--out", "o"]), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contract"));
    fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    let out = metafuse(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn train_eval_export_round() {
    let dir = generated();
    let p = dir.path();
    ok(&metafuse(&train_args("amm", "run"), p));
    for f in ["model.amt", "metrics.csv", "config.toml"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,L_r,L_e,L_c,L_M,L_y,L_G,L_R,L_total,u_r,u_e,u_c,"));
    assert_eq!(csv.lines().count(), 3);
    let text = ok(&metafuse(
        &with(&["eval"], &["--out", "run", "--episodes", "20", "--ways", "3", "--queries", "5", "--workers", "2"]),
        p,
    ));
    assert!(text.contains(" ± "), "{text}");
    assert!(text.contains("20 episodes"), "{text}");
    assert!(p.join("run/eval.csv").exists());
    assert!(p.join("run/eval.txt").exists());
    let out = ok(&metafuse(&with(&["export-embeddings"], &["--out", "run"]), p));
    assert!(out.contains("60 embeddings"), "{out}");
    let emb = fs::read_to_string(p.join("run/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 61);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = generated();
    let p = dir.path();
    ok(&metafuse(&train_args("nmm", "first"), p));
    ok(&metafuse(&["train", "--config", "first/config.toml", "--out", "second"], p));
    assert_eq!(
        fs::read(p.join("first/model.amt")).unwrap(),
        fs::read(p.join("second/model.amt")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("first/metrics.csv")).unwrap(),
        fs::read(p.join("second/metrics.csv")).unwrap()
    );
}

#[test]
fn variants_log_differently_under_one_seed() {
    let dir = generated();
    let p = dir.path();
    ok(&metafuse(&train_args("nmm", "nmm"), p));
    ok(&metafuse(&train_args("amm", "amm"), p));
    let a = fs::read_to_string(p.join("nmm/metrics.csv")).unwrap();
    let b = fs::read_to_string(p.join("amm/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn distill_from_a_trained_teacher() {
    let dir = generated();
    let p = dir.path();
    ok(&metafuse(&train_args("amm", "teacher"), p));
    let mut args = train_args("amm", "student");
    args[0] = "distill";
    args.extend(["--teacher", "teacher/model.amt", "--beta", "0.5"]);
    ok(&metafuse(&args, p));
    let csv = fs::read_to_string(p.join("student/metrics.csv")).unwrap();
    assert!(fs::read_to_string(p.join("student/config.toml")).unwrap().contains("teacher/model.amt"));
    assert_ne!(csv, fs::read_to_string(p.join("teacher/metrics.csv")).unwrap());
}

#[test]
fn gradcheck_reports_every_module() {
    let dir = tempfile::tempdir().unwrap();
    for precision in ["64", "32"] {
        let out = ok(&metafuse(&["gradcheck", "--precision", precision], dir.path()));
        for m in [
            "tensor_autograd",
            "embedding_backbone",
            "metric_heads",
            "metric_fusion",
            "auxiliary_tasks",
        ] {
            assert!(out.contains(m), "{precision}: {out}");
        }
        assert!(!out.contains("FAIL"), "{out}");
    }
}

#[test]
fn sixty_four_bit_pipeline() {
    let dir = generated();
    let p = dir.path();
    let mut args = train_args("cosine", "wide");
    args.extend(["--precision", "64"]);
    ok(&metafuse(&args, p));
    let text = ok(&metafuse(
        &with(&["eval"], &["--out", "wide", "--episodes", "10", "--queries", "5", "--precision", "64"]),
        p,
    ));
    assert!(text.starts_with("cosine 5-way 1-shot"), "{text}");
}
