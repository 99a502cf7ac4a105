use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cosim_core::data::{
    generate_synthetic, load_dataset, load_image, save_change_map, save_dataset, save_mask,
    split_dataset, ImagePair, ScenePair, SynthConfig,
};
use cosim_core::encoder::{EncoderConfig, LEVELS};
use cosim_core::evalsuite::{write_json, write_pr_csv};
use cosim_core::losses::LossKind;
use cosim_core::numerics::Scalar;
use cosim_core::pipeline::{
    contrast_analysis, default_head, evaluate_model, export_features, infer, select_thresholds,
    train_with, Checkpoint, InferenceConfig, RunHistory, TrainConfig, TrainMode,
};
use cosim_core::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(
    name = "cosim",
    version,
    about = "Siamese metric-learning scene change detection"
)]
#[command(args_override_self = true)]
struct Cli {
    /// File of `key=value` lines read as flags of the subcommand; explicit
    /// flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict the change map of one image pair.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Tabulate contrast trajectories from a training history.
    Contrast(ContrastArgs),
    /// Export sampled per-location features with labels.
    ExportFeatures(ExportArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 320)]
    count: usize,
    /// Height and width, multiples of 8.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 0.75)]
    p_change: f64,
    /// Rotation amplitude in degrees.
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    /// Largest zoom factor; zoom is sampled from [1, F].
    #[arg(long, default_value_t = 1.0)]
    zoom: f64,
    /// Translation amplitude in pixels.
    #[arg(long, default_value_t = 0.0)]
    translation: f64,
    #[arg(long, default_value_t = 0.15)]
    brightness: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    shadow: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LossArg {
    L2,
    Cos,
    Tcl,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Metric,
    Fcn,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "l2")]
    loss: LossArg,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Backbone learning rate.
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Head learning rate; defaults to `--lr`.
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-5)]
    wd: f64,
    #[arg(long, value_enum, default_value = "metric")]
    mode: ModeArg,
    #[arg(long, default_value_t = 3.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Inverse-frequency weighting of changed and unchanged pixels.
    #[arg(long)]
    balance: bool,
    /// Fraction held out for per-epoch F and threshold selection.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Dtype,
}

#[derive(clap::Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    t0: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    /// Fused change map, 8-bit grayscale.
    #[arg(long)]
    out_map: Option<PathBuf>,
    /// Binary prediction, changed = 255.
    #[arg(long)]
    out_mask: Option<PathBuf>,
    /// Per-level thresholds; defaults to those stored in the checkpoint.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 101)]
    n_thresholds: usize,
}

#[derive(clap::Args, Debug)]
struct ContrastArgs {
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 1 (finest) to 3.
    #[arg(long, default_value_t = 3)]
    level: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

const FLAG_KEYS: [&str; 1] = ["balance"];

/// Splices `--config FILE` contents in as flags right after the subcommand
/// name, so later explicit flags override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, Error> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            match it.next() {
                Some(p) => path = Some(PathBuf::from(p)),
                None => rest.push(a),
            }
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.clone() },
        _ => Error::Format {
            what: "config file",
            message: format!("{}: {e}", path.display()),
        },
    })?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                n + 1
            ))
        })?;
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        if FLAG_KEYS.contains(&key.as_str()) {
            match value {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{}:{}: `{key}` expects true or false",
                        path.display(),
                        n + 1
                    )))
                }
            }
            continue;
        }
        injected.push(format!("--{key}"));
        injected.extend(value.split_whitespace().map(str::to_owned));
    }
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    rest.splice(sub..sub, injected);
    Ok(rest)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => match a.dtype {
            Dtype::F32 => train_cmd::<f32>(a),
            Dtype::F64 => train_cmd::<f64>(a),
        },
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Contrast(a) => {
            let report = contrast_analysis(&RunHistory::read_csv(&a.history)?)?;
            report.write_csv(&a.out)?;
            println!(
                "wrote {} contrast rows to {}",
                report.rows.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::ExportFeatures(a) => export_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let cfg = SynthConfig {
        height: a.size[0],
        width: a.size[1],
        count: a.count,
        p_change: a.p_change,
        brightness: a.brightness,
        noise_sigma: a.noise,
        shadow_opacity: a.shadow,
        rotation_deg: a.rotation,
        zoom: (1.0, a.zoom),
        translation: a.translation,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic::<f64>(&cfg)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} pairs to {}", ds.len(), a.out.display());
    Ok(())
}

fn three(v: &[f64], what: &str) -> Result<[f64; LEVELS], Error> {
    v.try_into().map_err(|_| {
        Error::InvalidArgument(format!("{what} needs {LEVELS} values, got {}", v.len()))
    })
}

fn train_cmd<T: Scalar>(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr_backbone: a.lr,
        lr_head: a.lr_head.unwrap_or(a.lr),
        momentum: a.momentum,
        weight_decay: a.wd,
        mode: match a.mode {
            ModeArg::Metric => TrainMode::Metric,
            ModeArg::Fcn => TrainMode::FcnMetrics,
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.loss.kind = match a.loss {
        LossArg::L2 => LossKind::L2Contrastive,
        LossArg::Cos => LossKind::Cosine,
        LossArg::Tcl => LossKind::Thresholded,
    };
    cfg.loss.margin = a.margin;
    cfg.loss.tau = a.tau;
    cfg.loss.betas = three(&a.betas, "--betas")?.to_vec();
    cfg.loss.lambda = a.lambda;
    cfg.loss.balance_classes = a.balance;
    cfg.validate()?;
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(Error::InvalidArgument(format!(
            "--holdout must lie in [0, 1), got {}",
            a.holdout
        )));
    }

    let ds = load_dataset::<T>(&a.data)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no image pairs found in {}",
            a.data.display()
        )));
    }
    let ds = if a.holdout > 0.0 {
        split_dataset(ds, 1.0 - a.holdout, a.seed)?
    } else {
        ds
    };
    let model = cfg.init_model::<T>(EncoderConfig {
        seed: a.seed,
        ..EncoderConfig::default()
    })?;
    let (model, history) = train_with(model, &ds, &cfg, |step, _| {
        if step.batch == 0 {
            eprintln!("epoch {} batch 0 loss {:.6}", step.epoch, step.loss);
        }
    })?;
    let select: Vec<&ScenePair<T>> = if ds.split.test.is_empty() {
        ds.train().collect()
    } else {
        ds.test().collect()
    };
    let head = default_head(&model);
    let thresholds = select_thresholds(&model, &select, head, cfg.eval_thresholds)?;
    Checkpoint::new(model, thresholds).save(&a.out)?;
    if let Some(h) = &a.history {
        history.write_csv(h)?;
    }
    let last = history.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} pairs; final loss {:.6}; thresholds {:?}; wrote {}",
        history.len(),
        ds.split.train.len(),
        last.loss,
        thresholds,
        a.out.display()
    );
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<(), Error> {
    let ck = Checkpoint::<f64>::load(&a.ckpt)?;
    let pair = ImagePair::new(
        load_image::<f64>(&a.t0)?,
        load_image::<f64>(&a.t1)?,
        a.t0.file_stem().and_then(|s| s.to_str()).unwrap_or("pair"),
    )?;
    let mut icfg = InferenceConfig::for_model(&ck.model);
    icfg.thresholds = match &a.thresholds {
        Some(t) => three(t, "--thresholds")?,
        None => ck.thresholds,
    };
    let out = infer(&ck.model, &pair, &icfg)?;
    if let Some(p) = &a.out_map {
        save_change_map(&out.fused, p)?;
    }
    if let Some(p) = &a.out_mask {
        save_mask(&out.prediction, p)?;
    }
    println!(
        "threshold {:.4}; {} of {} pixels changed",
        icfg.fused_threshold(),
        out.prediction.changed_count(),
        out.prediction.len()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::<f64>::load(&a.ckpt)?;
    let ds = load_dataset::<f64>(&a.data)?;
    let items: Vec<&ScenePair<f64>> = ds.items.iter().collect();
    let mut icfg = InferenceConfig::for_model(&ck.model);
    icfg.thresholds = ck.thresholds;
    let report = evaluate_model(&ck.model, &items, &icfg, a.n_thresholds)?;
    if let Some(p) = &a.report {
        write_json(&report, p)?;
    }
    if let Some(p) = &a.pr_csv {
        write_pr_csv(&report.pr_points, p)?;
    }
    println!(
        "P {:.4} R {:.4} F {:.4} at {:.4}; best F {:.4} at {:.4}",
        report.precision,
        report.recall,
        report.f_score,
        report.threshold,
        report.best_f,
        report.best_threshold
    );
    for d in &report.degenerate {
        eprintln!("warning: {d} is undefined on this data (zero denominator)");
    }
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<(), Error> {
    let ck = Checkpoint::<f64>::load(&a.ckpt)?;
    let ds = load_dataset::<f64>(&a.data)?;
    let file = create(&a.out)?;
    let rows = export_features(&ck.model, &ds.items, a.level, a.samples, a.seed, file)?;
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

fn create(path: &Path) -> Result<fs::File, Error> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
