//! `msaw`: data generation, training, evaluation and verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msaw::ablation::{self, AblationMode};
use msaw::awc::write_weights_csv;
use msaw::data::synth::{self, SyntheticClassSpec};
use msaw::evaluator::{self, Layout};
use msaw::gradcheck;
use msaw::msfa::{similarity_matrix, separation_gap, write_similarity_csv};
use msaw::trainer::{self, Checkpoint, TrainConfig};
use msaw::{Error, Tensor};
use serde::Serialize;

const OP_TOLERANCE: f64 = 1e-4;
const PIPELINE_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "msaw", version, about = "Multi-scale attention SAR ship classifier laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    GenData(GenData),
    /// Train a model on a manifest's train split.
    Train(Train),
    /// Evaluate checkpoints on a manifest's test split.
    Eval(Eval),
    /// Dump principal-vector similarities and scale weights.
    Diagnose(Diagnose),
    /// Run the finite-difference gradient suites.
    GradCheck(GradCheck),
    /// Train and evaluate paired ablation arms over several seeds.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 3 for the overlapping 3-class set, 6 for the 6-class set.
    #[arg(long, default_value_t = 3, value_parser = parse_class_count)]
    classes: usize,
    /// Named preset (overlap3, separable3, six); overrides --classes.
    #[arg(long)]
    preset: Option<String>,
    /// JSON array of class specs; overrides --preset and --classes.
    #[arg(long)]
    specs: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
}

/// Training flags; each one overrides the `--config` file.
#[derive(Args, Clone)]
struct TrainFlags {
    /// JSON file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    triplets: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Balanced draws per class and epoch.
    #[arg(long)]
    target_per_class: Option<usize>,
    /// Random flips and shifts during training.
    #[arg(long)]
    augment: bool,
    /// Expected class count of the manifest.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    classes: Option<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct Eval {
    /// One or more checkpoints; reports are keyed by training samples per class.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Args)]
struct Diagnose {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channel whose similarity matrices are written.
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// full, no-attention, uniform-weights, no-final-concat or baseline.
    #[arg(long)]
    mode: String,
    /// Seeds run per arm, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric { .. } | Error::DegenerateBatch(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn parse_class_count(s: &str) -> Result<usize, String> {
    match s {
        "3" => Ok(3),
        "6" => Ok(6),
        _ => Err(format!("expected 3 or 6, got {s}")),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Every command echoes its resolved configuration to standard error.
fn print_resolved<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    eprintln!("{command} configuration:\n{json}");
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, body).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

#[derive(Serialize)]
struct GenDataResolved<'a> {
    out: &'a Path,
    seed: u64,
    train_per_class: usize,
    test_per_class: usize,
    classes: &'a [SyntheticClassSpec],
}

fn gen_data(a: GenData) -> Outcome {
    let specs = match (&a.specs, &a.preset) {
        (Some(path), _) => synth::load_specs(path)?,
        (None, Some(name)) => synth::preset(name)
            .ok_or_else(|| usage(format!("unknown preset {name}; expected one of {}", synth::PRESETS.join(", "))))?,
        (None, None) if a.classes == 6 => synth::six_class(),
        (None, None) => synth::overlapping_three_class(),
    };
    print_resolved(
        "gen-data",
        &GenDataResolved {
            out: &a.out,
            seed: a.seed,
            train_per_class: a.train_per_class,
            test_per_class: a.test_per_class,
            classes: &specs,
        },
    );
    let manifest = synth::generate_synthetic(&specs, a.train_per_class, a.test_per_class, a.seed, &a.out)?;
    println!("{}", a.out.join("manifest.csv").display());
    eprintln!("wrote {} images", manifest.entries().len());
    Ok(())
}

fn resolve_train_config(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.triplets {
        cfg.triplets_per_batch = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.lambda1 {
        cfg.loss_weights.lambda_att = v;
    }
    if let Some(v) = flags.lambda2 {
        cfg.loss_weights.lambda_recg = v;
    }
    if let Some(v) = flags.margin {
        cfg.attention.margin = v;
    }
    if flags.target_per_class.is_some() {
        cfg.target_per_class = flags.target_per_class;
    }
    if flags.augment {
        cfg.augment = true;
    }
    Ok(cfg)
}

fn load_manifest(path: &Path, classes: Option<u64>) -> Result<msaw::data::Manifest, Failure> {
    let m = msaw::data::Manifest::load(path)?;
    if let Some(k) = classes {
        if m.num_classes() as u64 != k {
            return Err(usage(format!("--classes {k} but the manifest has {} classes", m.num_classes())));
        }
    }
    Ok(m)
}

fn train(a: Train) -> Outcome {
    let manifest = load_manifest(&a.manifest, a.flags.classes)?;
    let mut cfg = resolve_train_config(&a.flags)?;
    cfg.model.num_classes = manifest.num_classes();
    cfg.validate()?;
    print_resolved("train", &cfg);
    create_dir(&a.out)?;
    write(&a.out.join("config.json"), serde_json::to_string_pretty(&cfg).expect("serializes") + "\n")?;
    let fit = trainer::fit(&manifest, &cfg, Some(&a.out))?;
    if let Some(last) = fit.epochs.last() {
        eprintln!(
            "epoch {}: loss {:.4} (att {:.4}, recg {:.4}), train accuracy {:.4}",
            last.epoch, last.total_loss, last.att_loss, last.recg_loss, last.train_acc
        );
    }
    println!("{}", a.out.join(trainer::CHECKPOINT).display());
    Ok(())
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    checkpoints: &'a [PathBuf],
    manifest: &'a Path,
    out: &'a Path,
    workers: u64,
}

fn eval(a: Eval) -> Outcome {
    print_resolved(
        "eval",
        &EvalResolved {
            checkpoints: &a.checkpoint,
            manifest: &a.manifest,
            out: &a.out,
            workers: a.workers,
        },
    );
    create_dir(&a.out)?;
    let mut reports = BTreeMap::new();
    let mut summary = Vec::new();
    let mut classes = None;
    for (i, path) in a.checkpoint.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let manifest = evaluator::manifest_for(&ck, &a.manifest)?;
        let model = ck.model::<f32>()?;
        let ev = evaluate_parallel(&model, &ck.meta.classes, &manifest, a.workers as usize)?;
        let report = evaluator::metrics(&ev.confusion)?;
        let suffix = if a.checkpoint.len() == 1 { String::new() } else { format!("_{i}") };
        write(&a.out.join(format!("confusion{suffix}.csv")), ev.confusion.to_csv())?;
        let weights: Tensor<f64> = ev.inference.weights.cast();
        write_weights_csv(
            &a.out.join(format!("weights{suffix}.csv")),
            &ev.ids,
            &weights,
            &ev.inference.predicted(),
            &ev.labels,
        )?;
        let key = ck.meta.train_counts.iter().copied().min().unwrap_or(0);
        if reports.contains_key(&key) {
            return Err(usage(format!("two checkpoints trained with {key} samples per class")));
        }
        summary.push((path.display().to_string(), report.clone()));
        classes.get_or_insert(ck.meta.classes.clone());
        reports.insert(key, report);
    }
    let layout = Layout::for_classes(classes.as_deref().unwrap_or_default());
    let table = evaluator::render_report(&reports, &layout)?;
    write(&a.out.join("report.txt"), &table)?;
    write(&a.out.join("report.csv"), evaluator::report_csv(&reports, &layout)?)?;
    let rows: Vec<(String, &evaluator::EvalReport)> = summary.iter().map(|(n, r)| (n.clone(), r)).collect();
    let summary_text = evaluator::render_summary(&rows);
    write(&a.out.join("summary.txt"), &summary_text)?;
    print!("{table}\n{summary_text}");
    Ok(())
}

/// Splits the test set across `workers` threads at inference-chunk
/// boundaries, so results do not depend on the worker count.
fn evaluate_parallel(
    model: &msaw::model::Model<f32>,
    classes: &[String],
    manifest: &msaw::data::Manifest,
    workers: usize,
) -> Result<evaluator::Evaluation, Failure> {
    if workers <= 1 {
        return Ok(evaluator::evaluate(model, classes, manifest, None)?);
    }
    let test = manifest.load_split::<f32>(msaw::data::Split::Test)?;
    if manifest.classes() != classes {
        return Err(usage("class-set mismatch between checkpoint and manifest"));
    }
    let n = test.len();
    if n == 0 {
        return Err(Error::Data("manifest has no test samples".into()).into());
    }
    let chunk = msaw::model::INFER_CHUNK * n.div_ceil(msaw::model::INFER_CHUNK).div_ceil(workers);
    let parts: Vec<Vec<usize>> = (0..n).step_by(chunk).map(|s| (s..(s + chunk).min(n)).collect()).collect();
    let results: Vec<msaw::Result<msaw::model::Inference<f32>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|idx| {
                let test = &test;
                scope.spawn(move || model.infer(&test.batch(idx)?, None))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut probs = Vec::new();
    let mut weights = Vec::new();
    for r in results {
        let inf = r?;
        probs.extend_from_slice(inf.probs.data());
        weights.extend_from_slice(inf.weights.data());
    }
    let k = classes.len();
    let inference = msaw::model::Inference {
        probs: Tensor::new(vec![n, k], probs)?,
        weights: Tensor::new(vec![n, msaw::pyramid::NUM_SCALES], weights)?,
        vectors: Vec::new(),
    };
    let confusion =
        evaluator::ConfusionMatrix::from_predictions(classes.to_vec(), &test.labels, &inference.predicted())?;
    Ok(evaluator::Evaluation {
        confusion,
        inference,
        ids: test.ids,
        labels: test.labels,
    })
}

fn diagnose(a: Diagnose) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print_resolved("diagnose", &serde_json::json!({
        "checkpoint": a.checkpoint, "manifest": a.manifest, "out": a.out, "channel": a.channel,
        "attention": ck.meta.train.attention,
    }));
    let manifest = evaluator::manifest_for(&ck, &a.manifest)?;
    let model = ck.model::<f32>()?;
    let ev = evaluator::evaluate(&model, &ck.meta.classes, &manifest, Some(&ck.meta.train.attention))?;
    create_dir(&a.out)?;
    let weights: Tensor<f64> = ev.inference.weights.cast();
    write_weights_csv(&a.out.join("weights.csv"), &ev.ids, &weights, &ev.inference.predicted(), &ev.labels)?;
    for (k, (vectors, degenerate)) in ev.inference.vectors.iter().enumerate() {
        let sims = similarity_matrix(vectors, degenerate, a.channel)?;
        write_similarity_csv(&a.out.join(format!("similarity_scale{}.csv", k + 1)), &ev.ids, &sims)?;
        let flat = degenerate.iter().filter(|&&d| d).count() as f64 / degenerate.len().max(1) as f64;
        match separation_gap(vectors, degenerate, &ev.labels)? {
            Some(g) => println!("scale {}: separation gap {g:.6}, degenerate maps {:.1}%", k + 1, 100.0 * flat),
            None => println!("scale {}: separation gap undefined, degenerate maps {:.1}%", k + 1, 100.0 * flat),
        }
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> Outcome {
    print_resolved("grad-check", &serde_json::json!({
        "seed": a.seed, "seeds": a.seeds,
        "op_step": gradcheck::OP_STEP, "pipeline_step": gradcheck::PIPELINE_STEP,
        "op_tolerance": OP_TOLERANCE, "pipeline_tolerance": PIPELINE_TOLERANCE,
    }));
    let mut ops: BTreeMap<String, gradcheck::CheckOutcome> = BTreeMap::new();
    let mut pipeline = gradcheck::CheckOutcome {
        name: "full pipeline".into(),
        ..Default::default()
    };
    for seed in a.seed..a.seed + a.seeds {
        for o in gradcheck::elementary_ops(seed)? {
            ops.entry(o.name.clone()).or_insert_with(|| gradcheck::CheckOutcome {
                name: o.name.clone(),
                ..Default::default()
            }).merge(&o);
        }
        pipeline.merge(&gradcheck::full_pipeline(seed)?);
    }
    let mut ok = true;
    for o in ops.values().chain(std::iter::once(&pipeline)) {
        let tol = if o.name == pipeline.name { PIPELINE_TOLERANCE } else { OP_TOLERANCE };
        let pass = o.max_rel_error < tol && o.checked > 0;
        ok &= pass;
        println!(
            "{:<22} max rel error {:.3e}  (< {tol:e})  checked {:>5}  skipped {:>3}  {}",
            o.name,
            o.max_rel_error,
            o.checked,
            o.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "gradient check failed".into(),
        })
    }
}

fn ablate(a: Ablate) -> Outcome {
    let mode = AblationMode::parse(&a.mode).ok_or_else(|| {
        let names: Vec<&str> = AblationMode::ALL.iter().map(|m| m.name()).collect();
        usage(format!("unknown mode {}; expected one of {}", a.mode, names.join(", ")))
    })?;
    let manifest = load_manifest(&a.manifest, a.flags.classes)?;
    let mut cfg = resolve_train_config(&a.flags)?;
    cfg.model.num_classes = manifest.num_classes();
    cfg.validate()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    print_resolved("ablate", &serde_json::json!({ "mode": mode, "seeds": a.seeds, "train": cfg }));
    let arms: Vec<AblationMode> = if mode == AblationMode::Full {
        vec![AblationMode::Full]
    } else {
        vec![AblationMode::Full, mode]
    };
    let mut results = Vec::new();
    for arm in &arms {
        for seed in cfg.seed..cfg.seed + a.seeds {
            eprintln!("training {} with seed {seed}", arm.name());
            results.push(ablation::run_arm(&manifest, &cfg, *arm, seed, Some(&a.out))?);
        }
    }
    ablation::write_outputs(&a.out, &results)?;
    let summaries = ablation::summarize(&results);
    for arm in &arms {
        let rows: Vec<(String, &evaluator::EvalReport)> = results
            .iter()
            .filter(|r| r.mode == *arm)
            .map(|r| (format!("{} seed {}", arm.name(), r.seed), &r.report))
            .collect();
        print!("{}", evaluator::render_summary(&rows));
    }
    println!();
    print!("{}", ablation::ablation_csv(&summaries));
    Ok(())
}
