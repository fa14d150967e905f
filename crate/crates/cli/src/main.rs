//! `lsseg`: synthetic data, training with the level set loss, evaluation,
//! classic level set segmentation and gradient checks.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsseg_core::chan_vese::{cv_segment, orient_bright_inside, CvParams, LevelSetField};
use lsseg_core::curves::{
    energy_trace_csv, iou_table_csv, line_plot_svg, training_curve_csv, training_curve_svg, write_csv, Series,
};
use lsseg_core::data_synth::{build_dataset, Dataset, SceneSpec};
use lsseg_core::gradcheck::{run_gradcheck, GradcheckConfig};
use lsseg_core::heaviside::{HeavisideKind, DEFAULT_ARCTAN_EPSILON, DEFAULT_TANH_EPSILON};
use lsseg_core::ls_loss::{LossWeights, DEFAULT_LAMBDA};
use lsseg_core::pgm::{read_image, read_labels, write_atomic, write_image};
use lsseg_core::tinynet::{NetConfig, SgdConfig, TinyNet};
use lsseg_core::train::{evaluate, train, TrainConfig};
use lsseg_core::{BinaryMask, Error, Image};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Format { .. } => CliError::Io(msg),
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::UndefinedMetric
            | Error::StaleCache { .. }
            | Error::IterationOutOfRange { .. } => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "lsseg", version, about = "Level set loss for semantic segmentation", args_override_self = true)]
struct Cli {
    /// `key = value` file of flags for the subcommand; command line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes corpus (PGM images, PGM label maps, manifest).
    Generate(GenerateArgs),
    /// Train the network and write a checkpoint plus loss curves.
    Train(TrainArgs),
    /// Mean IoU of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Two-region level set segmentation of a single image.
    Cv(CvArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a training curve CSV as SVG.
    Plot(PlotArgs),
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not of the form HxW"))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("`{s}` is not of the form HxW"))
    };
    Ok((dim(h)?, dim(w)?))
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size, default_value = "64x64")]
    size: (usize, usize),
    /// Classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    shapes_min: usize,
    #[arg(long, default_value_t = 4)]
    shapes_max: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum HeavisideArg {
    /// Hyperbolic tangent step.
    Mahf,
    /// Arctangent step.
    Ahf,
    /// Exact step (has no usable gradient; rejected for training).
    Hf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Held-out corpus for periodic mean IoU.
    #[arg(long, value_name = "DIR")]
    eval_data: Option<PathBuf>,
    /// Output directory for the checkpoint and curves.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Weight of the level set term; 0 trains with cross-entropy only.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Smoothing width of the step function (defaults depend on --heaviside).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = HeavisideArg::Mahf)]
    heaviside: HeavisideArg,
    #[arg(long, default_value_t = SgdConfig::default().lr0)]
    lr: f64,
    #[arg(long, default_value_t = SgdConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = SgdConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = SgdConfig::default().poly_power)]
    poly_power: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Random square crop side.
    #[arg(long)]
    crop: Option<usize>,
    /// Disable random horizontal flips.
    #[arg(long)]
    no_flip: bool,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    width1: usize,
    #[arg(long, default_value_t = 32)]
    width2: usize,
    /// Also write curves.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Print one IoU row per class.
    #[arg(long)]
    per_class: bool,
    /// Write the IoU table as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// Length weight; only 0 is supported.
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    /// Area weight; only 0 is supported.
    #[arg(long, default_value_t = 0.0)]
    nu: f64,
    /// Seed of the random initial level set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output mask (bright region white).
    #[arg(long, value_name = "FILE", default_value = "mask.pgm")]
    mask: PathBuf,
    #[arg(long, value_name = "FILE", default_value = "energy.csv")]
    trace: PathBuf,
    /// Label map to score the mask against (nonzero = foreground).
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Curve CSV written by `train`.
    #[arg(long, value_name = "FILE")]
    curves: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Moving average window for the loss series.
    #[arg(long, default_value_t = 100)]
    window: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_generate(a: &GenerateArgs) -> CliResult {
    let spec = SceneSpec {
        height: a.size.0,
        width: a.size.1,
        num_classes: a.classes,
        shapes_min: a.shapes_min,
        shapes_max: a.shapes_max,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    if a.n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let manifest = build_dataset(&spec, a.n, &a.out)?;
    if !manifest.shortfall.is_empty() {
        eprintln!(
            "warning: {} scene(s) hold fewer shapes than requested",
            manifest.shortfall.len()
        );
    }
    println!("wrote {} samples to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_heaviside(a: &TrainArgs) -> CliResult<HeavisideKind> {
    let kind = match a.heaviside {
        HeavisideArg::Hf => {
            return Err(CliError::Config(
                "--heaviside hf: the exact step has no usable derivative, so the level set term \
                 cannot be trained with it; use mahf or ahf"
                    .into(),
            ))
        }
        HeavisideArg::Mahf => HeavisideKind::tanh(a.epsilon.unwrap_or(DEFAULT_TANH_EPSILON)),
        HeavisideArg::Ahf => HeavisideKind::arctan(a.epsilon.unwrap_or(DEFAULT_ARCTAN_EPSILON)),
    };
    Ok(kind?)
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let heaviside = train_heaviside(a)?;
    if !(a.lambda >= 0.0) || !a.lambda.is_finite() {
        return Err(CliError::Config(format!("--lambda must be >= 0, got {}", a.lambda)));
    }
    let cfg = TrainConfig {
        sgd: SgdConfig {
            lr0: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            max_iter: a.iters,
            poly_power: a.poly_power,
        },
        batch_size: a.batch,
        crop: a.crop,
        hflip: !a.no_flip,
        eval_every: a.eval_every,
        skip_ls: false,
    };
    cfg.validate()?;
    let weights = LossWeights {
        lambda_ls: a.lambda,
        heaviside,
        ..Default::default()
    };
    let data = Dataset::load(&a.data)?;
    let eval_data = a.eval_data.as_deref().map(Dataset::load).transpose()?;
    let net = TinyNet::new(
        NetConfig {
            in_channels: 1,
            width1: a.width1,
            width2: a.width2,
            num_classes: data.num_classes,
        },
        a.seed,
    )?;
    create_dir(&a.out)?;
    let outcome = match train(net, &data, eval_data.as_ref(), &cfg, &weights, a.seed) {
        Err(Error::Diverged { iter, last_good }) => {
            let path = a.out.join("last_good.ckpt");
            last_good.save(&path)?;
            return Err(CliError::Numeric(format!(
                "training diverged at iteration {iter}; last good parameters saved to {}",
                path.display()
            )));
        }
        other => other?,
    };
    outcome.net.save(&a.out.join("model.ckpt"))?;
    write_csv(&a.out.join("curves.csv"), &training_curve_csv(&outcome.curve)?)?;
    if a.svg {
        let svg = training_curve_svg(&outcome.curve, 100);
        write_atomic(&a.out.join("curves.svg"), svg.as_bytes())?;
    }
    if let Some(last) = outcome.curve.iterations.last() {
        println!(
            "iter {}: ce {:.6} ls {:.6} total {:.6}",
            last.iter, last.report.ce, last.report.ls, last.report.total
        );
    }
    if let Some(e) = outcome.curve.evals.last() {
        println!("eval miou {:.6}", e.miou);
    }
    println!("checkpoint {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let net = TinyNet::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    if data.num_classes != net.config().num_classes {
        return Err(CliError::Config(format!(
            "corpus has {} classes but the checkpoint predicts {}",
            data.num_classes,
            net.config().num_classes
        )));
    }
    let (_, m) = evaluate(&net, &data)?;
    if a.per_class {
        for (c, iou) in m.per_class.iter().enumerate() {
            match iou {
                Some(v) => println!("class {c} iou {v:.10}"),
                None => println!("class {c} iou -"),
            }
        }
    }
    println!("miou {:.10}", m.miou);
    if let Some(path) = &a.csv {
        write_csv(path, &iou_table_csv(&m)?)?;
    }
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> CliResult {
    let params = CvParams {
        mu: a.mu,
        nu: a.nu,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        heaviside: HeavisideKind::Exact,
        max_iters: a.iters,
        tol: a.tol,
    };
    params.validate()?;
    let image = read_image(&a.image)?;
    let init = LevelSetField::random_binary(image.height(), image.width(), a.seed)?;
    let out = cv_segment(&image, &params, &init)?;
    if out.degenerate {
        eprintln!("warning: degenerate result, all pixels ended up in one region");
    }
    let phi = orient_bright_inside(&image, &out.phi)?;
    let mask = phi.interior();
    write_image(&a.mask, &Image::new(mask.height(), mask.width(), 1, mask.data().to_vec())?)?;
    write_csv(&a.trace, &energy_trace_csv(&out.energy_trace)?)?;
    println!(
        "iterations {} final energy {:.10}",
        out.iterations(),
        out.energy_trace.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(truth) = &a.truth {
        let labels = read_labels(truth)?;
        let fg = BinaryMask::from_fn(labels.height(), labels.width(), |y, x| labels.get(y, x) != 0)?;
        println!("iou {:.6}", mask.iou(&fg)?);
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.cases == 0 {
        return Err(CliError::Config("--cases must be at least 1".into()));
    }
    let report = run_gradcheck(&GradcheckConfig {
        seed: a.seed,
        cases: a.cases,
        inject_sign_flip: a.inject_sign_flip,
    })?;
    for c in &report.components {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<12} max rel err {:.3e} (tol {:.0e}, {} entries)",
            c.name, c.max_rel_err, c.tolerance, c.checked
        );
    }
    println!(
        "info ls-gradient vs free-means differences: max rel err {:.3e}",
        report.ls_unfrozen_max_rel_err
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check FAILED".into()))
    }
}

fn cmd_plot(a: &PlotArgs) -> CliResult {
    let mut reader = csv::Reader::from_path(&a.curves).map_err(|e| CliError::Io(format!("{}: {e}", a.curves.display())))?;
    let mut ce = Vec::new();
    let mut ls = Vec::new();
    let mut miou = Vec::new();
    let bad = |e: String| CliError::Io(format!("{}: {e}", a.curves.display()));
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let cell = |i: usize| -> CliResult<Option<f64>> {
            match rec.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`"))),
            }
        };
        let iter = cell(0)?.ok_or_else(|| bad("missing iteration".into()))?;
        if let (Some(c), Some(l)) = (cell(1)?, cell(2)?) {
            ce.push((iter, c));
            ls.push((iter, l));
        }
        if let Some(m) = cell(4)? {
            miou.push((iter, m));
        }
    }
    let smooth = |pts: &[(f64, f64)]| {
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let avg = lsseg_core::metrics::moving_average(&ys, a.window);
        pts.iter().map(|p| p.0).zip(avg).collect()
    };
    let series = [
        Series {
            name: "cross-entropy",
            points: smooth(&ce),
        },
        Series {
            name: "level set energy",
            points: smooth(&ls),
        },
        Series {
            name: "eval mIoU",
            points: miou,
        },
    ];
    let svg = line_plot_svg("training curves (each series rescaled)", "iteration", &series, true);
    write_atomic(&a.out, svg.as_bytes())?;
    Ok(())
}

fn init_threads() -> CliResult {
    if let Ok(v) = std::env::var("LSSEG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("LSSEG_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(args: Vec<OsString>) -> CliResult {
    let args = config::expand_config(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code.into());
        }
    };
    init_threads()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
