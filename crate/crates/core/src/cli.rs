//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error,
//! 3 gradient verification failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OpKind;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    decode_image, load_manifest, load_samples, preprocess, stratified_split, synth_generate,
    write_manifest, DatasetManifest, Sample, SplitSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GradCheckRow, TOLERANCE};
use crate::model::Model;
use crate::train::{ablation_run, argmax, evaluate, predict_proba, train_with_progress, MetricsReport};

/// `println!` that ignores a closed stdout instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fabnet", version, about = "Feature-attention CNN: synthesize, train, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled image dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, curves and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Paired with/without attention runs over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 0 = easy, 1 = heavily overlapping classes.
    #[arg(long, default_value_t = 0.0)]
    difficulty: f64,
    /// Write P5 grayscale images.
    #[arg(long)]
    grayscale: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set max_epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(seed) = self.seed {
            o.push(format!("seed={seed}"));
        }
        o
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Manifest CSV (`path,label`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the baseline without the attention block.
    #[arg(long)]
    no_fab: bool,
    /// Only train the attention block and head.
    #[arg(long)]
    freeze_backbone: bool,
    /// Initialize the backbone from this checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Corrupt one op's backward rule (harness self-test).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of paired seeds, starting at 0.
    #[arg(long, default_value_t = 10)]
    pairs: u64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        size: (a.size, a.size),
        seed: a.seed,
        difficulty: a.difficulty,
        grayscale: a.grayscale,
    };
    let manifest = synth_generate(&a.out, &spec)?;
    out!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, report: &MetricsReport, class_names: &[String]) -> Result<()> {
    write_file(&dir.join("metrics.csv"), report.to_csv(class_names))?;
    write_file(&dir.join("confusion.csv"), report.confusion.to_csv())?;
    write_file(&dir.join("metrics.txt"), report.to_text(class_names))
}

fn print_summary(report: &MetricsReport) {
    out!("accuracy: {}", report.accuracy);
    out!("top1_error: {}", report.top1_error_percent);
}

fn absolute(m: &DatasetManifest) -> Result<DatasetManifest> {
    let mut m = m.clone();
    for e in &mut m.entries {
        e.path = fs::canonicalize(&e.path).map_err(|err| Error::io(&e.path, err))?;
    }
    Ok(m)
}

struct PreparedData {
    manifest: DatasetManifest,
    train: Vec<Sample>,
    test: Vec<Sample>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

fn prepare(data: &Path, cfg: &RunConfig) -> Result<PreparedData> {
    let manifest = load_manifest(data)?;
    let split = SplitSpec {
        seed: cfg.seed(),
        ..SplitSpec::default()
    };
    let (train_idx, test_idx) = stratified_split(&manifest, &split)?;
    let samples = load_samples(&manifest, cfg.model.input_size)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(PreparedData {
        train: pick(&train_idx),
        test: pick(&test_idx),
        manifest,
        train_idx,
        test_idx,
    })
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut overrides = a.run.overrides();
    if a.no_fab {
        overrides.push("use_fab=false".into());
    }
    if a.freeze_backbone {
        overrides.push("freeze_backbone=true".into());
    }
    let mut cfg = RunConfig::load(a.run.config.as_deref(), &overrides)?;
    let data = prepare(&a.data, &cfg)?;
    cfg.model.num_classes = data.manifest.num_classes();

    let mut model = Model::build(cfg.model.clone(), data.manifest.class_names.clone(), cfg.seed())?;
    if let Some(src) = &a.init_from {
        model.load_backbone_from(&load_checkpoint(src)?)?;
    }
    create_dir(&a.out)?;

    let started = Instant::now();
    let quiet = a.quiet;
    let epochs = cfg.train.max_epochs;
    let curve = train_with_progress(&mut model, &data.train, &data.test, &cfg.train, |r| {
        if !quiet {
            eprintln!(
                "epoch {}/{epochs}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
    })?;
    let report = evaluate(&model, &data.test)?;

    save_checkpoint(&model, a.out.join("model.fabn"))?;
    write_file(&a.out.join("curves.csv"), curve.to_csv())?;
    write_report(&a.out, &report, model.class_names())?;
    let full = absolute(&data.manifest)?;
    write_manifest(a.out.join("train_manifest.csv"), &full.subset(&data.train_idx).entries)?;
    write_manifest(a.out.join("test_manifest.csv"), &full.subset(&data.test_idx).entries)?;

    if !quiet {
        eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
    }
    print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    if manifest.class_names != model.class_names() {
        return Err(Error::Config(format!(
            "class mismatch: checkpoint has {} classes [{}], manifest has {} [{}]",
            model.num_classes(),
            model.class_names().join(", "),
            manifest.num_classes(),
            manifest.class_names.join(", ")
        )));
    }
    let samples = load_samples(&manifest, model.config().input_size)?;
    let report = evaluate(&model, &samples)?;
    create_dir(&a.report)?;
    write_report(&a.report, &report, model.class_names())?;
    print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?;
    let raw = decode_image(&a.image)?;
    let x = preprocess(&raw, model.config().input_size)?;
    let probs = predict_proba(&model, &x)?.remove(0);
    let best = argmax(&probs);
    out!("prediction: {}", model.class_names()[best]);
    for (name, p) in model.class_names().iter().zip(&probs) {
        out!("{name}: {p}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Ops implicated by the failures: used by every failing case and by no
/// passing case.
fn suspects(rows: &[GradCheckRow]) -> Vec<OpKind> {
    let failing: Vec<&GradCheckRow> = rows.iter().filter(|r| !r.passed()).collect();
    let Some(first) = failing.first() else {
        return Vec::new();
    };
    first
        .ops
        .iter()
        .copied()
        .filter(|op| failing.iter().all(|r| r.ops.contains(op)))
        .filter(|op| !rows.iter().any(|r| r.passed() && r.ops.contains(op)))
        .collect()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let fault = match a.corrupt.as_deref() {
        None => None,
        Some(name) => match OpKind::from_name(name) {
            Some(OpKind::Leaf) | None => {
                eprintln!("error: unknown op {name:?}");
                return Ok(ExitCode::from(EXIT_USAGE));
            }
            Some(k) => Some(k),
        },
    };
    let started = Instant::now();
    let mut all = Vec::new();
    out!("{:<6} {:<36} {:>14}  result", "seed", "case", "max_rel_error");
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for row in run_suite(seed, fault)? {
            out!(
                "{seed:<6} {:<36} {:>14.3e}  {}",
                row.name,
                row.max_rel_error,
                if row.passed() { "PASS" } else { "FAIL" }
            );
            all.push(row);
        }
    }
    let worst = all.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    out!(
        "{} cases, worst {worst:.3e}, tolerance {TOLERANCE:e}, {:.2}s",
        all.len(),
        started.elapsed().as_secs_f64()
    );
    if all.iter().all(GradCheckRow::passed) {
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed: Vec<&str> = all.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    failed.dedup();
    let blamed: Vec<&str> = suspects(&all).iter().map(|k| k.name()).collect();
    eprintln!("gradient check FAILED for: {}", failed.join(", "));
    eprintln!("offending op: {}", if blamed.is_empty() { "unknown".into() } else { blamed.join(", ") });
    Ok(ExitCode::from(EXIT_VERIFY))
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(a.run.config.as_deref(), &a.run.overrides())?;
    let data = prepare(&a.data, &cfg)?;
    cfg.model.num_classes = data.manifest.num_classes();
    let seeds: Vec<u64> = (0..a.pairs).collect();
    let table = ablation_run(
        &cfg.model,
        &data.manifest.class_names,
        &data.train,
        &data.test,
        &cfg.train,
        &seeds,
    )?;
    create_dir(&a.out)?;
    write_file(&a.out.join("ablation.csv"), table.to_csv())?;
    out!("mean accuracy with attention:    {:.4}", table.mean_with());
    out!("mean accuracy without attention: {:.4}", table.mean_without());
    out!("difference (points):             {:+.2}", table.mean_difference_points());
    Ok(ExitCode::SUCCESS)
}
