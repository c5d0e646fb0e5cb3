//! The `lkca` command line.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 usage or config
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::autodiff::{grad_check, OpKind};
use crate::bench;
use crate::checkpoint;
use crate::config::{self, ConfigFile};
use crate::error::{Error, Result};
use crate::lkca::{self, KernelInit, LkcaLayer, View};
use crate::model::{ModelLossTarget, VisionModel};
use crate::rng::SeededRng;
use crate::tensor::{self, Scalar, Tensor};
use crate::train::{self, evaluate, Dataset};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Gradient-check tolerance for full models.
pub const MODEL_GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "lkca", version, about = "Large-kernel convolutional attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// `GhxGw`, both at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid(pub usize, pub usize);

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected GhxGw, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid extent {v:?}"));
        let (h, w) = (parse(h)?, parse(w)?);
        if h == 0 || w == 0 {
            return Err(format!("grid extents must be at least 1, got {s}"));
        }
        Ok(Grid(h, w))
    }
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every built view on random layers and inputs.
    Equiv {
        #[arg(long, default_value = "4x4")]
        grid: Grid,
        #[arg(long, default_value_t = 8, value_parser = positive)]
        dim: usize,
        #[arg(long, default_value_t = 2, value_parser = positive)]
        batch: usize,
        #[arg(long, default_value_t = 10, value_parser = positive)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Full-model gradient check in f64 against central differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        /// Scales the adjoint of one primitive (negative control).
        #[arg(long, hide = true)]
        fault_inject: Option<String>,
    },
    /// Train and write metrics plus a checkpoint under `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on the config's test set or on IDX files.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `IMAGES.idx,LABELS.idx`.
        #[arg(long)]
        data: Option<String>,
    },
    /// Parameter accounting per tensor and group.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time the views over the cases in a CSV file.
    Bench {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure of one command, already classified for the exit code.
enum Failure {
    Usage(Error),
    Runtime(Error),
    /// Checks ran and did not pass; details were printed.
    Check,
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

pub fn run<I, S>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Equiv {
            grid,
            dim,
            batch,
            cases,
            seed,
            precision,
        } => match precision {
            Precision::F32 => cmd_equiv::<f32>(grid, dim, batch, cases, seed, out),
            Precision::F64 => cmd_equiv::<f64>(grid, dim, batch, cases, seed, out),
        },
        Command::GradCheck {
            config,
            fault_inject,
        } => cmd_grad_check(&config, fault_inject.as_deref(), out),
        Command::Train { config, out: dir } => cmd_train(&config, &dir, out),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => cmd_eval(&config, &checkpoint, data.as_deref(), out),
        Command::Params { config } => cmd_params(&config, out),
        Command::Bench { cases, out: csv } => cmd_bench(&cases, &csv, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Check) => EXIT_FAILURE,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

pub fn main() -> ExitCode {
    let code = run(std::env::args_os(), &mut std::io::stdout().lock());
    ExitCode::from(code)
}

fn load_config(path: &Path) -> std::result::Result<ConfigFile, Failure> {
    config::load(path).map_err(usage)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))?
    };
}

/// Deviation bound for comparing a view against the attention view.
fn tolerance<T: Scalar>(view: View, out_scale: f64) -> f64 {
    match view {
        View::Spectral => 1e-4 * (1.0 + out_scale),
        _ if T::NAME == "f64" => 1e-10,
        _ => 1e-5 * (1.0 + out_scale),
    }
}

fn cmd_equiv<T: Scalar>(
    Grid(gh, gw): Grid,
    dim: usize,
    batch: usize,
    cases: usize,
    seed: u64,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let views: Vec<View> = View::ALL.into_iter().filter(|v| v.is_available()).collect();
    say!(
        out,
        "equiv grid={gh}x{gw} dim={dim} batch={batch} precision={} views={}",
        T::NAME,
        views.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(",")
    );
    let mut failures = 0;
    for case in 0..cases {
        let mut rng = SeededRng::new(seed).fork(case as u64);
        let layer = LkcaLayer::<T>::init(gh, gw, dim, KernelInit::TruncNormal, View::Attention, &mut rng)?;
        // unit-scale kernels exercise the sums harder than the 0.02 init
        let (kh, kw) = lkca::kernel_extent(gh, gw);
        let mut layer = layer;
        *layer.kernel.weights_mut() = tensor::rand_normal(&mut rng, [kh, kw], 0.0, 1.0)?;
        let x = tensor::rand_normal::<T>(&mut rng, [batch, gh * gw, dim], 0.0, 1.0)?;
        let reference = layer.forward(&x)?;
        let scale = reference.max_abs().as_f64();
        let mut line = format!("case {case}:");
        for &view in &views[1..] {
            let y = layer.clone().with_view(view).forward(&x)?;
            let dev = reference.max_abs_diff(&y)?.as_f64();
            let ok = dev <= tolerance::<T>(view, scale);
            failures += usize::from(!ok);
            line.push_str(&format!(
                " {}={dev:.3e}{}",
                view.as_str(),
                if ok { "" } else { " FAIL" }
            ));
        }
        say!(out, "{line}");
    }
    if failures > 0 {
        say!(out, "FAIL: {failures} view comparisons out of tolerance");
        return Err(Failure::Check);
    }
    say!(out, "PASS: {cases} cases");
    Ok(())
}

/// First `n` samples of the config's training data.
fn sample_batch(cfg: &ConfigFile, n: usize) -> Result<(Tensor<f64>, Vec<usize>)> {
    let (train, _) = cfg.train.datasets::<f64>()?;
    let idx: Vec<usize> = (0..n.min(train.len())).collect();
    Ok(train.batch(&idx))
}

fn cmd_grad_check(path: &Path, fault: Option<&str>, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(path)?;
    let fault = match fault {
        Some(name) => Some((
            OpKind::parse(name).ok_or_else(|| usage(Error::Config(format!("unknown op {name:?}"))))?,
            1.5,
        )),
        None => None,
    };
    let (images, labels) = sample_batch(&cfg, 2)?;
    let model = VisionModel::<f64>::init(&cfg.train.model, cfg.train.seed)?;
    let target = ModelLossTarget {
        model,
        images,
        labels,
        smoothing: cfg.train.label_smoothing,
        fault,
    };
    let report = grad_check(&target, MODEL_GRAD_TOL)?;
    say!(out, "{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn cmd_train(path: &Path, dir: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(path)?;
    say!(out, "{}", config::render(&cfg).trim_end());
    let t = &cfg.train;
    t.validate()?;
    let (train, test) = t.datasets::<f32>()?;
    let mut lines = Vec::new();
    let outcome = train::train_on(t, &train, &test, |m| {
        if let (Some(tr), Some(te)) = (m.train_acc, m.test_acc) {
            lines.push(format!(
                "step {} loss {:.6} train_acc {tr:.4} test_acc {te:.4}",
                m.step, m.loss
            ));
        }
    })?;
    for l in lines {
        say!(out, "{l}");
    }
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))?;
    let metrics = dir.join(&t.metrics_path);
    let ckpt = dir.join(&t.checkpoint_path);
    outcome.history.write_csv(&metrics).map_err(Failure::Runtime)?;
    checkpoint::save(&outcome.model, &ckpt).map_err(Failure::Runtime)?;
    say!(out, "wrote {} and {}", metrics.display(), ckpt.display());
    Ok(())
}

fn cmd_eval(
    path: &Path,
    ckpt: &Path,
    data: Option<&str>,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let cfg = load_config(path)?;
    let dataset: Dataset<f32> = match data {
        Some(spec) => {
            let (images, labels) = spec.split_once(',').ok_or_else(|| {
                usage(Error::Config(format!("--data expects IMAGES,LABELS, got {spec:?}")))
            })?;
            train::load_idx_dataset(images, labels, cfg.train.model.num_classes).map_err(Failure::Runtime)?
        }
        None => cfg.train.datasets::<f32>()?.1,
    };
    let model: VisionModel<f32> = checkpoint::load(&cfg.train.model, ckpt).map_err(Failure::Runtime)?;
    let acc = evaluate(&model, &dataset).map_err(Failure::Runtime)?;
    say!(out, "accuracy {acc:.6} on {} samples", dataset.len());
    Ok(())
}

/// `blocks.0.mlp.fc1.weight` → `blocks.0.mlp`; `embed.pos` → `embed`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", i, part, ..] => {
            let part = if part.starts_with("ln") { "ln" } else { part };
            format!("blocks.{i}.{part}")
        }
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

fn cmd_params(path: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(path)?;
    let model = VisionModel::<f32>::init(&cfg.train.model, 0)?;
    let mut groups: indexmap::IndexMap<String, u64> = indexmap::IndexMap::new();
    for (name, t) in model.registry() {
        say!(out, "{name:<28} {:<14} {}", format!("{:?}", t.shape()), t.len());
        *groups.entry(group_of(&name)).or_default() += t.len() as u64;
    }
    say!(out, "");
    for (g, n) in &groups {
        say!(out, "{g:<28} {n}");
    }
    let total = crate::model::count_model_params(&model);
    let closed = cfg.train.model.param_count()?;
    say!(out, "total {total}");
    if total != closed {
        say!(out, "closed form gives {closed}, registry gives {total}");
        return Err(Failure::Check);
    }
    Ok(())
}

fn cmd_bench(cases: &Path, csv: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cases = bench::read_cases(cases).map_err(|e| match e {
        Error::Io { .. } | Error::Csv(_) => Failure::Usage(e),
        e => Failure::from(e),
    })?;
    let results = bench::run_suite(&cases).map_err(Failure::Runtime)?;
    bench::write_csv(&results, csv).map_err(Failure::Runtime)?;
    let mut bad = 0;
    for r in &results {
        let c = &r.case;
        let label = format!("{}x{} d={} b={} {}", c.grid_h, c.grid_w, c.dim, c.batch, c.view.as_str());
        match &r.outcome {
            bench::Outcome::Skipped(reason) => say!(out, "{label}: skipped ({reason})"),
            bench::Outcome::Timed(t) => {
                let macs_ok = c.view == View::Spectral || t.macs_measured == r.macs_analytic;
                let dev_ok = r.deviation.is_none_or(|d| d <= tolerance::<f32>(c.view, 0.0));
                bad += usize::from(!macs_ok || !dev_ok);
                say!(
                    out,
                    "{label}: min {:.6}s mean {:.6}s macs {}/{}{}",
                    t.min_s,
                    t.mean_s,
                    t.macs_measured,
                    r.macs_analytic,
                    if macs_ok && dev_ok { "" } else { " FAIL" }
                );
            }
        }
    }
    say!(out, "wrote {}", csv.display());
    if bad > 0 {
        return Err(Failure::Check);
    }
    Ok(())
}
