mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metafuse::data::{generate_synthetic, load_dataset, Dataset};
use metafuse::eval::{evaluate, export_embeddings};
use metafuse::gradcheck::{self, by_module, CaseReport};
use metafuse::model::ModelMeta;
use metafuse::train::{train, write_metrics_csv, Teacher};
use metafuse::{FusionVariant, Model, ModelConfig, Precision, Scalar};

use config::RunConfig;

/// Few-shot classification with fused metrics.
#[derive(Debug, Parser)]
#[command(name = "metafuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic oriented-texture dataset next to the manifest path.
    Generate(Flags),
    /// Episodic training; with --teacher the student is also distilled.
    Train(Flags),
    /// Few-shot evaluation of a checkpoint on the evaluation split.
    Eval(Flags),
    /// Training with a distillation teacher (--teacher is required).
    Distill(Flags),
    /// Finite-difference gradient check of every primitive and loss.
    Gradcheck(Flags),
    /// Write GAP embeddings of the evaluation split as CSV.
    ExportEmbeddings(Flags),
}

#[derive(Debug, Clone, Args)]
struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra override `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate or export (default: <out>/model.amt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Episodes per epoch for training, total episodes for evaluation.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// relation, euclidean, cosine, coupled, nmm, amm-v1, amm-v2 or amm.
    #[arg(long)]
    variant: Option<FusionVariant>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// 32 or 64.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Single evaluation worker; the run is then reproducible bit for bit.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Generate,
    Train,
    Eval,
    Gradcheck,
    Export,
}

impl Flags {
    fn resolve(&self, mode: Mode) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            c.set(o)?;
        }
        if let Some(p) = &self.data {
            c.data.manifest = p.clone();
        }
        if let Some(s) = self.seed {
            match mode {
                Mode::Generate => c.synthetic.seed = s,
                _ => {
                    c.train.seed = s;
                    c.eval.seed = s;
                }
            }
        }
        let episode = if mode == Mode::Train {
            &mut c.train.episode
        } else {
            &mut c.eval.episode
        };
        if let Some(v) = self.ways {
            episode.ways = v;
        }
        if let Some(v) = self.shots {
            episode.shots = v;
        }
        if let Some(v) = self.queries {
            episode.queries = v;
        }
        if let Some(v) = self.episodes {
            match mode {
                Mode::Train => c.train.episodes_per_epoch = v,
                _ => c.eval.episodes = v,
            }
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.variant {
            c.train.variant = v;
        }
        if let Some(v) = self.alpha {
            c.train.alpha = v;
        }
        if let Some(v) = self.lambda {
            c.train.lambda = v;
        }
        if let Some(v) = self.beta {
            c.train.beta = v;
        }
        if let Some(v) = &self.teacher {
            c.teacher = Some(v.clone());
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = &self.precision {
            c.precision = v.parse()?;
        }
        if let Some(v) = self.workers {
            c.eval.workers = v;
        }
        if self.deterministic {
            c.deterministic = true;
        }
        if c.deterministic {
            c.eval.workers = 1;
        }
        c.precision()?;
        Ok(c)
    }

    fn checkpoint(&self, c: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| c.out.join(MODEL_FILE))
    }
}

const MODEL_FILE: &str = "model.amt";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(f) => {
            let c = f.resolve(Mode::Generate)?;
            generate(&c)?;
        }
        Command::Train(f) => {
            let c = f.resolve(Mode::Train)?;
            dispatch_train(&c)?;
        }
        Command::Distill(f) => {
            let c = f.resolve(Mode::Train)?;
            if c.teacher.is_none() {
                bail!("distill needs --teacher");
            }
            dispatch_train(&c)?;
        }
        Command::Eval(f) => {
            let c = f.resolve(Mode::Eval)?;
            let ck = f.checkpoint(&c);
            match c.precision()? {
                Precision::F32 => eval::<f32>(&c, &ck, f.variant)?,
                Precision::F64 => eval::<f64>(&c, &ck, f.variant)?,
            }
        }
        Command::Gradcheck(f) => {
            let c = f.resolve(Mode::Gradcheck)?;
            return run_gradcheck(c.precision()?);
        }
        Command::ExportEmbeddings(f) => {
            let c = f.resolve(Mode::Export)?;
            let ck = f.checkpoint(&c);
            match c.precision()? {
                Precision::F32 => export::<f32>(&c, &ck)?,
                Precision::F64 => export::<f64>(&c, &ck)?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dataset_root(c: &RunConfig) -> PathBuf {
    c.data.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn generate(c: &RunConfig) -> Result<()> {
    let root = dataset_root(c);
    let m = generate_synthetic(&c.synthetic, &root)?;
    c.echo()?;
    let counts: Vec<String> = m.splits.iter().map(|s| format!("{} {}", s.name, s.samples.len())).collect();
    println!("wrote {} ({})", c.data.manifest.display(), counts.join(", "));
    Ok(())
}

fn load_split(c: &RunConfig, split: &str) -> Result<Dataset> {
    load_dataset(&c.data.manifest, split).with_context(|| format!("loading split {split}"))
}

fn dispatch_train(c: &RunConfig) -> Result<()> {
    match c.precision()? {
        Precision::F32 => train_run::<f32>(c),
        Precision::F64 => train_run::<f64>(c),
    }
}

fn train_run<T: Scalar>(c: &RunConfig) -> Result<()> {
    c.train.validate()?;
    let data = load_split(c, &c.data.train_split)?;
    let model = Model::<T>::new(
        ModelConfig {
            in_channels: data.channels,
            image_size: data.image_size,
            width: c.model.width,
            global_classes: data.n_classes(),
        },
        c.train.seed,
    )?;
    let teacher = match &c.teacher {
        Some(p) => {
            let (model, meta) = Model::<T>::load(p)?;
            Some(Teacher {
                model,
                variant: meta.variant,
            })
        }
        None => None,
    };
    c.echo()?;
    let (model, records) = train(model, &data, &c.train, teacher.as_ref(), |r| {
        println!("epoch {} loss {:.4}", r.epoch, r.losses.l_total.unwrap_or(f64::NAN));
    })?;
    write_metrics_csv(&c.out.join("metrics.csv"), &records)?;
    let path = c.out.join(MODEL_FILE);
    model.save(&path, c.train.variant)?;
    println!("saved {}", path.display());
    Ok(())
}

fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, ModelMeta)> {
    Model::<T>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval<T: Scalar>(c: &RunConfig, ck: &Path, variant: Option<FusionVariant>) -> Result<()> {
    let (model, meta) = load_model::<T>(ck)?;
    let data = load_split(c, &c.data.eval_split)?;
    let variant = variant.unwrap_or(meta.variant);
    c.echo()?;
    let report = evaluate(
        &model,
        variant,
        &data,
        &c.eval.episode,
        c.eval.episodes,
        c.eval.seed,
        c.eval.workers,
    )?;
    report.write(&c.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn export<T: Scalar>(c: &RunConfig, ck: &Path) -> Result<()> {
    let (model, _) = load_model::<T>(ck)?;
    let data = load_split(c, &c.data.eval_split)?;
    c.echo()?;
    let path = c.out.join("embeddings.csv");
    let rows = export_embeddings(&model, &data, &path)?;
    println!("wrote {rows} embeddings to {}", path.display());
    Ok(())
}

fn run_gradcheck(precision: Precision) -> Result<ExitCode> {
    let (reports, threshold): (Vec<CaseReport>, f64) = match precision {
        Precision::F64 => (
            gradcheck::run_cases(&gradcheck::all_cases::<f64>()?, gradcheck::EPSILON)?,
            gradcheck::TOLERANCE,
        ),
        Precision::F32 => (gradcheck::run_mixed(gradcheck::EPSILON)?, gradcheck::TOLERANCE_F32),
    };
    let mut ok = true;
    for m in by_module(&reports) {
        let pass = m.max_rel_err <= threshold;
        ok &= pass;
        println!(
            "{:20} max rel err {:.3e} over {} cases ({} components) {}",
            m.module,
            m.max_rel_err,
            m.cases,
            m.components,
            if pass { "ok" } else { "FAIL" }
        );
    }
    for r in reports.iter().filter(|r| r.max_rel_err > threshold) {
        println!("  {} {}: {:.3e}", r.module, r.case, r.max_rel_err);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
