//! The `vis4mer` command line.
//!
//! Exit codes: 0 on success, 1 when a check fails or a run errors,
//! 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, BenchConfig, BenchResult, Metric};
use crate::data::{load_features, Dataset, FeatureManifest, Split, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{parse_kv, parse_value, DecoderKind, EncoderConfig, Model, ModelConfig};
use crate::plot::{loglog_svg, Series};
use crate::scalar::{Precision, Scalar};
use crate::ssm::mode_equivalence;
use crate::train::{train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "vis4mer", version, about = "S4 video decoder experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a decoder on a synthetic task or a feature manifest.
    Train(TrainArgs),
    /// Time and count memory of one training step across token counts.
    Bench(BenchArgs),
    /// Finite-difference audit of the toy model's gradients.
    Gradcheck(GradcheckArgs),
    /// Compare convolution and recurrent SSM evaluation on random systems.
    Equiv(EquivArgs),
    /// Print the token and channel schedule of a configuration.
    Shapes(ShapesArgs),
    /// Render bench CSV files as a log-log SVG chart.
    ExportPlot(PlotArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    DelayedClass,
    LongMajority,
    Features,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "delayed-class")]
    task: TaskArg,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Majority window for long-majority (default L/2).
    #[arg(long)]
    window: Option<usize>,
    /// Training manifest for `--task features`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Output directory for metrics.jsonl, summary.csv and checkpoint/.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    S4,
    Attention,
    Both,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "s4")]
    variant: VariantArg,
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096, 8192])]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Activation budget per step in MiB.
    #[arg(long, default_value_t = 3072)]
    budget_mb: usize,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless wall-time slopes are <= 1.3 (s4) and >= 1.7 (attention).
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args, Debug)]
struct EquivArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    max_state: usize,
    #[arg(long, default_value_t = 2048)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol64: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol32: f64,
}

#[derive(Args, Debug)]
struct ShapesArgs {
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 224)]
    hw: usize,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    WallMs,
    PeakBytes,
    Flops,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Bench CSV files; repeatable.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "wall-ms")]
    metric: MetricArg,
    #[arg(long, default_value = "Decoder cost vs input tokens")]
    title: String,
}

/// Failed checks and errors both map to exit code 1.
enum Outcome {
    Pass,
    Fail,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a, out),
        Cmd::Bench(a) => cmd_bench(a, out, err),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, out),
        Cmd::Equiv(a) => cmd_equiv(a, out),
        Cmd::Shapes(a) => cmd_shapes(a, out),
        Cmd::ExportPlot(a) => cmd_plot(a, out),
    };
    match res {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

/// Config file entries, then `--set` overrides.
fn gather_kv(c: &ConfigArgs) -> Result<BTreeMap<String, String>> {
    let mut kv = match &c.config {
        Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

const TRAIN_KEYS: [&str; 11] = [
    "lr",
    "weight_decay",
    "batch_size",
    "max_steps",
    "seed",
    "precision",
    "clip",
    "eval_every",
    "target_accuracy",
    "train_size",
    "val_size",
];

/// Splits `kv` into training keys and a model config built on `base`.
fn split_config(
    kv: BTreeMap<String, String>,
    base: ModelConfig,
) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let (train_kv, model_kv): (BTreeMap<_, _>, BTreeMap<_, _>) = kv
        .into_iter()
        .partition(|(k, _)| TRAIN_KEYS.contains(&k.as_str()));
    let mut cfg = base;
    cfg.apply(&model_kv)?;
    cfg.validate()?;
    Ok((cfg, train_kv))
}

struct TrainPlan {
    train: TrainConfig,
    precision: Precision,
    train_size: usize,
    val_size: usize,
}

fn train_plan(a: &TrainArgs, kv: &BTreeMap<String, String>) -> Result<TrainPlan> {
    let mut tc = TrainConfig {
        batch_size: 16,
        max_steps: 2000,
        ..Default::default()
    };
    let mut precision = Precision::F32;
    let (mut train_size, mut val_size) = (50_000, 256);
    for (k, v) in kv {
        match k.as_str() {
            "lr" => tc.lr = parse_value(k, v)?,
            "weight_decay" => tc.weight_decay = parse_value(k, v)?,
            "batch_size" => tc.batch_size = parse_value(k, v)?,
            "max_steps" => tc.max_steps = parse_value(k, v)?,
            "seed" => tc.seed = parse_value(k, v)?,
            "precision" => precision = parse_precision(parse_value(k, v)?)?,
            "clip" => tc.clip = (v != "none").then(|| parse_value(k, v)).transpose()?,
            "eval_every" => tc.eval_every = parse_value(k, v)?,
            "target_accuracy" => tc.target_accuracy = Some(parse_value(k, v)?),
            "train_size" => train_size = parse_value(k, v)?,
            "val_size" => val_size = parse_value(k, v)?,
            _ => unreachable!("filtered by TRAIN_KEYS"),
        }
    }
    if let Some(v) = a.steps {
        tc.max_steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.precision {
        precision = parse_precision(v)?;
    }
    if let Some(v) = a.eval_every {
        tc.eval_every = v;
    }
    if a.target_accuracy.is_some() {
        tc.target_accuracy = a.target_accuracy;
    }
    if a.no_clip {
        tc.clip = None;
    }
    train_size = a.train_size.unwrap_or(train_size);
    val_size = a.val_size.unwrap_or(val_size);
    if !(tc.lr > 0.0) || tc.batch_size == 0 {
        return Err(Error::Config("lr must be > 0 and batch_size >= 1".into()));
    }
    tc.metrics_path = Some(a.out.join("metrics.jsonl"));
    tc.summary_path = Some(a.out.join("summary.csv"));
    tc.checkpoint_dir = Some(a.out.join("checkpoint"));
    Ok(TrainPlan {
        train: tc,
        precision,
        train_size,
        val_size,
    })
}

fn parse_precision(bits: u32) -> Result<Precision> {
    Precision::from_bits(bits)
        .ok_or_else(|| Error::Config(format!("precision must be 32 or 64, got {bits}")))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let base = ModelConfig {
        encoder: None,
        ..Default::default()
    };
    let (mut cfg, train_kv) = split_config(gather_kv(&a.cfg)?, base)?;
    let plan = train_plan(&a, &train_kv)?;
    if matches!(a.task, TaskArg::LongMajority) {
        cfg.classes = 2;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    match plan.precision {
        Precision::F32 => train_with::<f32>(&a, cfg, &plan, out),
        Precision::F64 => train_with::<f64>(&a, cfg, &plan, out),
    }
}

fn train_with<T: Scalar>(
    a: &TrainArgs,
    cfg: ModelConfig,
    plan: &TrainPlan,
    out: &mut dyn Write,
) -> Result<Outcome> {
    let seed = plan.train.seed;
    let (tr, va): (Box<dyn Dataset<T>>, Box<dyn Dataset<T>>) = match a.task {
        TaskArg::DelayedClass | TaskArg::LongMajority => {
            if cfg.encoder.is_some() {
                return Err(Error::Config(
                    "synthetic tasks feed tokens; unset encoder".into(),
                ));
            }
            let task = match a.task {
                TaskArg::DelayedClass => {
                    SyntheticTask::delayed_class(cfg.grid, cfg.width, cfg.classes, seed)
                }
                _ => {
                    let window = a.window.unwrap_or(cfg.tokens() / 2);
                    SyntheticTask::long_majority(cfg.grid, cfg.width, window, seed)
                }
            };
            (
                Box::new(task.split(Split::Train, plan.train_size)),
                Box::new(task.split(Split::Val, plan.val_size)),
            )
        }
        TaskArg::Features => {
            let m = a
                .manifest
                .as_ref()
                .ok_or_else(|| Error::Config("--task features needs --manifest".into()))?;
            let vm = a.val_manifest.as_ref().unwrap_or(m);
            let k = Some(cfg.classes);
            (
                Box::new(load_features(FeatureManifest::read(m, None)?, k)?),
                Box::new(load_features(FeatureManifest::read(vm, None)?, k)?),
            )
        }
    };
    let mut model: Model<T> = Model::new(cfg, seed)?;
    let report = train(&mut model, tr.as_ref(), Some(va.as_ref()), &plan.train)?;
    let last = report.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    writeln!(
        out,
        "steps {}  final loss {:.4}  wall {:.1} s",
        report.history.len(),
        last,
        report.wall_ms / 1e3
    )
    .map_err(io_err)?;
    if let Some((step, ev)) = report.best {
        match ev.accuracy {
            Some(acc) => writeln!(out, "best val accuracy {acc:.4} at step {step}"),
            None => writeln!(out, "best val loss {:.6} at step {step}", ev.loss),
        }
        .map_err(io_err)?;
    }
    writeln!(out, "outputs in {}", a.out.display()).map_err(io_err)?;
    Ok(Outcome::Pass)
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Outcome> {
    let base = ModelConfig {
        encoder: None,
        ..Default::default()
    };
    let (model, _) = split_config(gather_kv(&a.cfg)?, base)?;
    let cfg = BenchConfig {
        model,
        trials: a.trials,
        seed: a.seed,
        budget_bytes: Some(a.budget_mb << 20),
    };
    let variants: &[DecoderKind] = match a.variant {
        VariantArg::S4 => &[DecoderKind::S4],
        VariantArg::Attention => &[DecoderKind::Attention],
        VariantArg::Both => &[DecoderKind::S4, DecoderKind::Attention],
    };
    let mut rows: Vec<BenchResult> = Vec::new();
    for &v in variants {
        rows.extend(bench::run_scaling(v, &a.tokens, &cfg));
    }
    match &a.out {
        Some(p) => bench::write_csv(&rows, fs::File::create(p).map_err(|e| Error::io(p, e))?)?,
        None => bench::write_csv(&rows, &mut *out)?,
    }
    writeln!(
        err,
        "# forward+backward at batch 1, median of {} trials; peak_bytes counts activations only (no optimizer state)",
        a.trials
    )
    .map_err(io_err)?;
    let mut pass = true;
    for &v in variants {
        let mine: Vec<BenchResult> = rows
            .iter()
            .filter(|r| r.variant == v.to_string())
            .cloned()
            .collect();
        for r in mine.iter().filter(|r| !r.ok()) {
            writeln!(
                err,
                "# {v} L={} failed: {}",
                r.tokens,
                r.error.as_deref().unwrap_or("")
            )
            .map_err(io_err)?;
        }
        match bench::fit_results(&mine, Metric::WallMs) {
            Ok(fit) => {
                let bytes = bench::fit_results(&mine, Metric::PeakBytes)?;
                writeln!(
                    err,
                    "# {v}: wall_ms slope {:.3} (r2 {:.3}), peak_bytes slope {:.3}",
                    fit.slope, fit.r2, bytes.slope
                )
                .map_err(io_err)?;
                if a.check {
                    pass &= match v {
                        DecoderKind::S4 => fit.slope <= 1.3,
                        DecoderKind::Attention => fit.slope >= 1.7,
                    };
                }
            }
            Err(e) => {
                writeln!(err, "# {v}: no slope ({e})").map_err(io_err)?;
                pass &= !a.check;
            }
        }
    }
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    let model = Model::<f64>::new(ModelConfig::toy(a.frames), a.seed)?;
    let r = model.grad_audit(a.seed, a.step)?;
    let name = &model.params.names()[r.worst_param];
    writeln!(
        out,
        "checked {} parameters; max rel err {:.3e} at {name}[{}] (analytic {:.6e}, numeric {:.6e})",
        r.checked, r.max_rel_error, r.worst_index, r.worst_analytic, r.worst_numeric
    )
    .map_err(io_err)?;
    let pass = r.max_rel_error < a.tol;
    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" }).map_err(io_err)?;
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn cmd_equiv(a: EquivArgs, out: &mut dyn Write) -> Result<Outcome> {
    let r = mode_equivalence(a.count, a.max_state, a.max_len, a.seed)?;
    writeln!(
        out,
        "{} systems: max rel err f64 {:.3e} (system {}), f32 {:.3e} (system {})",
        r.systems, r.max_rel_f64, r.worst_f64, r.max_rel_f32, r.worst_f32
    )
    .map_err(io_err)?;
    let pass = r.max_rel_f64 < a.tol64 && r.max_rel_f32 < a.tol32;
    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" }).map_err(io_err)?;
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

/// Model config for a `frames x hw x hw` video cut into `patch`-pixel patches.
fn video_config(a: &ShapesArgs) -> Result<ModelConfig> {
    if a.patch == 0 || a.hw < a.patch {
        return Err(Error::Config(format!(
            "patch {} does not fit frame {}",
            a.patch, a.hw
        )));
    }
    let side = a.hw / a.patch;
    let base = ModelConfig {
        width: a.width,
        blocks: a.blocks,
        grid: [a.frames, side, side],
        encoder: Some(EncoderConfig {
            frame_h: a.hw,
            frame_w: a.hw,
            patch: a.patch,
            ..Default::default()
        }),
        ..Default::default()
    };
    Ok(split_config(gather_kv(&a.cfg)?, base)?.0)
}

fn cmd_shapes(a: ShapesArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = video_config(&a)?;
    let [t, h, w] = cfg.grid;
    let mut lines = vec![format!(
        "input: {t} frames of {}x{} px, patch {} -> {t}x{h}x{w} grid, {} tokens, width {}",
        a.hw,
        a.hw,
        a.patch,
        cfg.tokens(),
        cfg.width
    )];
    for (i, b) in cfg.schedule()?.iter().enumerate() {
        let g = |x: [usize; 3]| format!("{}x{}x{}", x[0], x[1], x[2]);
        lines.push(format!(
            "block {}: {} x {} ({} tokens) -> pool k{} s{} -> {} x {} ({} tokens)",
            i + 1,
            g(b.grid_in),
            b.width_in,
            b.tokens_in(),
            g(b.kernel),
            g(b.stride),
            g(b.grid_out),
            b.width_out,
            b.tokens_out()
        ));
    }
    lines.push(format!(
        "head: {} -> {} classes",
        cfg.final_width()?,
        cfg.classes
    ));
    for l in lines {
        writeln!(out, "{l}").map_err(io_err)?;
    }
    Ok(Outcome::Pass)
}

fn cmd_plot(a: PlotArgs, out: &mut dyn Write) -> Result<Outcome> {
    let metric = match a.metric {
        MetricArg::WallMs => Metric::WallMs,
        MetricArg::PeakBytes => Metric::PeakBytes,
        MetricArg::Flops => Metric::Flops,
    };
    let mut series: Vec<Series> = Vec::new();
    for p in &a.input {
        let rows = bench::read_csv(fs::File::open(p).map_err(|e| Error::io(p, e))?)?;
        for r in rows.iter().filter(|r| r.ok()) {
            let pt = (r.tokens as f64, metric.of(r));
            match series.iter_mut().find(|s| s.name == r.variant) {
                Some(s) => s.points.push(pt),
                None => series.push(Series {
                    name: r.variant.clone(),
                    points: vec![pt],
                }),
            }
        }
    }
    let y_label = match metric {
        Metric::WallMs => "wall time per step (ms)",
        Metric::PeakBytes => "peak activation bytes",
        Metric::Flops => "flops per step",
    };
    let svg = loglog_svg(&series, &a.title, "input tokens L", y_label)?;
    write_file(&a.out, &svg)?;
    writeln!(out, "wrote {}", a.out.display()).map_err(io_err)?;
    Ok(Outcome::Pass)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
