use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use terrafuse::ablation::{run_ablation, AblationConfig, AblationTarget, ZeroAt};
use terrafuse::data::{generate_dataset, load_split, AugmentConfig, MaskMap, Patch, Split};
use terrafuse::fusion::{argmax_map, fuse, FusionConfig, ProbMap};
use terrafuse::metrics::{evaluate, Aggregation};
use terrafuse::nets::ModelKind;
use terrafuse::trainer::{timestamp, train, Checkpoint, Predictor, TrainConfig};
use terrafuse::Error;

#[derive(Parser)]
#[command(
    name = "terrafuse",
    version,
    about = "Terrace and wall segmentation with two fused networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of patch/mask pairs and a manifest.
    GenData(GenData),
    /// Train one network on a dataset directory.
    Train(Train),
    /// Write class probabilities (PRB) for each input patch.
    Predict(Predict),
    /// Blend two probability maps and write the argmax mask.
    Fuse(Fuse),
    /// Score predicted masks against ground truth.
    Eval(Eval),
    /// Feature importance by zeroing one input channel at a time.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    patches: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Unet,
    Deeplab,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Unet => ModelKind::UNet,
            ModelArg::Deeplab => ModelKind::DeepLab,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resample training crops to this side length.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Train on the patches as stored, without augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Keep the final weights instead of the best-validation ones.
    #[arg(long)]
    keep_last: bool,
    /// Write the per-epoch loss and validation IoU here.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    ckpt: PathBuf,
    /// Glob of MCR patch files.
    #[arg(long)]
    input: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Fuse {
    /// U-Net probabilities.
    #[arg(long)]
    a: PathBuf,
    /// DeepLab probabilities.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Micro,
    PerPatch,
}

#[derive(Args)]
struct Eval {
    /// Glob of predicted MSK files.
    #[arg(long)]
    pred: String,
    /// Glob of ground-truth MSK files, paired with predictions by file stem.
    #[arg(long)]
    truth: String,
    #[arg(long, value_enum, default_value_t = AggregationArg::Micro)]
    aggregation: AggregationArg,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    ckpt_unet: Option<PathBuf>,
    #[arg(long)]
    ckpt_deeplab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    data: PathBuf,
    /// Score only one network.
    #[arg(long, value_enum)]
    single: Option<ModelArg>,
    /// Zero channels after normalization (channel mean) instead of raw values.
    #[arg(long)]
    zero_normalized: bool,
    #[arg(long)]
    report: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn threads() -> usize {
    std::env::var("TERRAFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Error::from(e).at(path).into())
}

/// Sorted paths matching `pattern`; at least one.
fn expand(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let paths =
        glob::glob(pattern).map_err(|e| Failure::Usage(format!("bad glob {pattern:?}: {e}")))?;
    let mut out: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Data(e.to_string()))?;
    out.sort();
    if out.is_empty() {
        return Err(Failure::Data(format!("no files match {pattern:?}")));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn gen_data(a: GenData) -> CliResult {
    let m = generate_dataset(a.patches, a.size, a.seed, &a.out)?;
    println!(
        "wrote {} patches ({} train, {} val) to {}",
        m.entries.len(),
        m.ids(Split::Train).count(),
        m.ids(Split::Val).count(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> CliResult {
    let train_set = load_split(&a.data, Split::Train)?;
    let val_set = load_split(&a.data, Split::Val)?;
    let cfg = TrainConfig {
        kind: a.model.into(),
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        beta: a.beta,
        seed: a.seed,
        patch_size: a.patch_size,
        augment: if a.no_augment {
            AugmentConfig::identity()
        } else {
            AugmentConfig {
                seed: a.seed,
                ..Default::default()
            }
        },
        ..Default::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = train(&cfg, &train_set, &val_set)?;
    let mut ckpt = if a.keep_last {
        outcome.last
    } else {
        outcome.best
    };
    ckpt.created = Some(timestamp());
    ckpt.save(&a.out)?;
    if let Some(path) = &a.history {
        let mut text = String::from("epoch,train_loss,val_iou\n");
        for r in &outcome.history {
            let iou = r.val_iou.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, iou));
        }
        write_text(path, &text)?;
    }
    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == ckpt.epoch)
        .and_then(|r| r.val_iou);
    println!(
        "saved {} epoch {}{} to {}",
        ckpt.kind,
        ckpt.epoch,
        best.map(|v| format!(" (val IoU {v:.4})"))
            .unwrap_or_default(),
        a.out.display()
    );
    Ok(())
}

fn predict_cmd(a: Predict) -> CliResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let predictor = Predictor::from_checkpoint(&ckpt)?;
    let inputs = expand(&a.input)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::from(e).at(&a.out))?;
    let run = |paths: &[PathBuf]| -> Result<(), Error> {
        let mut p = predictor.clone();
        for path in paths {
            let patch = Patch::read(path)?;
            let probs = p.probs(&patch).map_err(|e| e.at(path))?;
            probs.write(a.out.join(format!("{}.prb", stem(path))))?;
        }
        Ok(())
    };
    let n = threads().min(inputs.len());
    let chunk = inputs.len().div_ceil(n);
    let results: Vec<Result<(), Error>> = if n == 1 {
        vec![run(&inputs)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .chunks(chunk)
                .map(|c| s.spawn(move || run(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    for r in results {
        r?;
    }
    println!(
        "wrote {} probability maps to {}",
        inputs.len(),
        a.out.display()
    );
    Ok(())
}

fn fuse_cmd(a: Fuse) -> CliResult {
    let cfg = FusionConfig { alpha: a.alpha };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let u = ProbMap::read(&a.a)?;
    let d = ProbMap::read(&a.b)?;
    let fused = fuse(&u, &d, &cfg)?;
    argmax_map(&fused).write(&a.out)?;
    Ok(())
}

fn eval_cmd(a: Eval) -> CliResult {
    let truth: BTreeMap<String, PathBuf> = expand(&a.truth)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let mut pairs = Vec::new();
    for p in expand(&a.pred)? {
        let t = truth.get(&stem(&p)).ok_or_else(|| {
            Failure::Data(format!(
                "{}: no ground truth with the same name",
                p.display()
            ))
        })?;
        pairs.push((MaskMap::read(&p)?, MaskMap::read(t)?));
    }
    let agg = match a.aggregation {
        AggregationArg::Micro => Aggregation::Micro,
        AggregationArg::PerPatch => Aggregation::PerPatch,
    };
    let report = evaluate(pairs.iter().map(|(p, t)| (p, t)), agg)?;
    let table = report.to_table("prediction");
    write_text(&a.report, &format!("{}\n{}", report.to_kv(), table))?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(a: Ablate) -> CliResult {
    let fusion = FusionConfig { alpha: a.alpha };
    fusion
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let load = |p: &Option<PathBuf>, flag: &str| -> CliResult<Checkpoint> {
        let p = p
            .as_ref()
            .ok_or_else(|| Failure::Usage(format!("--{flag} is required")))?;
        Ok(Checkpoint::load(p)?)
    };
    let target = match a.single {
        Some(ModelArg::Unet) => AblationTarget::Single(load(&a.ckpt_unet, "ckpt-unet")?),
        Some(ModelArg::Deeplab) => AblationTarget::Single(load(&a.ckpt_deeplab, "ckpt-deeplab")?),
        None => AblationTarget::Fused {
            unet: load(&a.ckpt_unet, "ckpt-unet")?,
            deeplab: load(&a.ckpt_deeplab, "ckpt-deeplab")?,
            fusion,
        },
    };
    let val = load_split(&a.data, Split::Val)?;
    let cfg = AblationConfig {
        zero_at: if a.zero_normalized {
            ZeroAt::Normalized
        } else {
            ZeroAt::Raw
        },
        threads: threads(),
    };
    let report = run_ablation(&target, &val, &cfg)?;
    let text = report.render();
    write_text(&a.report, &text)?;
    print!(
        "{}",
        text.split_once("\n\n").map_or(text.as_str(), |(_, t)| t)
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("error: {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() {
                3
            } else if e.is_data_error() {
                2
            } else {
                1
            })
        }
    }
}
