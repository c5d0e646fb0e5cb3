//! Wall-clock and MAC accounting for the LKCA realizations.
//!
//! Equal MAC counts do not mean equal wall time: the attention view streams
//! an `N × N` score matrix through a dense product, the convolution view
//! walks a padded grid per channel, and the spectral view trades MACs for
//! FFT passes. The harness only measures; min is the statistic to compare.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::lkca::{count_flops, working_set_bytes, KernelInit, LkcaLayer, View};
use crate::rng::SeededRng;
use crate::tensor::{self, MacCounter, Tensor};

pub const CSV_HEADER: &str =
    "grid_h,grid_w,dim,batch,view,reps,mean_s,std_s,min_s,macs_measured,macs_analytic";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub batch: usize,
    pub view: View,
    pub reps: usize,
    pub warmup: usize,
    /// Seeds the layer and the input; the same seed gives the same work
    /// for every view.
    pub seed: u64,
}

impl BenchCase {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, batch: usize, view: View) -> Self {
        Self {
            grid_h,
            grid_w,
            dim,
            batch,
            view,
            reps: 5,
            warmup: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 || self.warmup < 1 {
            return Err(Error::Config(format!(
                "bench case needs reps >= 3 and warmup >= 1, got {} and {}",
                self.reps, self.warmup
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.dim == 0 || self.batch == 0 {
            return Err(Error::Config("bench extents must be positive".into()));
        }
        Ok(())
    }

    fn same_work(&self, other: &Self) -> bool {
        (self.grid_h, self.grid_w, self.dim, self.batch, self.seed)
            == (other.grid_h, other.grid_w, other.dim, other.batch, other.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub samples: Vec<f64>,
    pub mean_s: f64,
    /// Sample standard deviation.
    pub std_s: f64,
    pub min_s: f64,
    pub macs_measured: u64,
    pub peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Timed(Timing),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub case: BenchCase,
    pub outcome: Outcome,
    pub macs_analytic: u64,
    /// Largest deviation from the first timed view of the same work in a
    /// suite, scaled by `1 + max|out|`.
    pub deviation: Option<f64>,
}

impl BenchResult {
    pub fn timing(&self) -> Option<&Timing> {
        match &self.outcome {
            Outcome::Timed(t) => Some(t),
            Outcome::Skipped(_) => None,
        }
    }
}

fn stats(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, var.sqrt(), min)
}

fn setup(case: &BenchCase) -> Result<(LkcaLayer<f32>, Tensor<f32>)> {
    let mut rng = SeededRng::new(case.seed);
    let layer = LkcaLayer::init(
        case.grid_h,
        case.grid_w,
        case.dim,
        KernelInit::TruncNormal,
        case.view,
        &mut rng,
    )?;
    let x = tensor::rand_normal(&mut rng, [case.batch, case.grid_h * case.grid_w, case.dim], 0.0, 1.0)?;
    Ok((layer, x))
}

fn run(case: &BenchCase) -> Result<(BenchResult, Option<Tensor<f32>>)> {
    case.validate()?;
    let (layer, x) = setup(case)?;
    let macs_analytic = count_flops(&layer, case.batch) / 2;
    if !case.view.is_available() {
        let result = BenchResult {
            case: case.clone(),
            outcome: Outcome::Skipped(format!("{} view not built", case.view.as_str())),
            macs_analytic,
            deviation: None,
        };
        return Ok((result, None));
    }
    for _ in 0..case.warmup {
        layer.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(case.reps);
    let mut macs = None;
    let mut out = None;
    for _ in 0..case.reps {
        let counter = MacCounter::enabled();
        let start = Instant::now();
        let y = layer.forward_counted(&x, &counter)?;
        samples.push(start.elapsed().as_secs_f64());
        match macs {
            None => macs = Some(counter.macs()),
            Some(m) if m != counter.macs() => {
                return Err(Error::InvalidArgument(format!(
                    "MAC count changed between repetitions: {m} vs {}",
                    counter.macs()
                )))
            }
            Some(_) => {}
        }
        out = Some(y);
    }
    let (mean_s, std_s, min_s) = stats(&samples);
    let timing = Timing {
        samples,
        mean_s,
        std_s,
        min_s,
        macs_measured: macs.unwrap_or(0),
        peak_bytes: working_set_bytes(case.view, case.batch, case.grid_h, case.grid_w, case.dim, 4),
    };
    Ok((
        BenchResult {
            case: case.clone(),
            outcome: Outcome::Timed(timing),
            macs_analytic,
            deviation: None,
        },
        out,
    ))
}

/// Times one case. Unavailable views come back as skipped results.
pub fn run_case(case: &BenchCase) -> Result<BenchResult> {
    run(case).map(|(r, _)| r)
}

/// Runs every case in order and cross-checks outputs between views of
/// the same work.
pub fn run_suite(cases: &[BenchCase]) -> Result<Vec<BenchResult>> {
    if cases.is_empty() {
        return Err(Error::Config("bench suite has no cases".into()));
    }
    let mut results: Vec<BenchResult> = Vec::with_capacity(cases.len());
    let mut references: Vec<(BenchCase, Tensor<f32>)> = Vec::new();
    for case in cases {
        let (mut result, out) = run(case)?;
        if let Some(out) = out {
            match references.iter().find(|(c, _)| c.same_work(case)) {
                Some((_, reference)) => {
                    let scale = 1.0 + reference.max_abs() as f64;
                    result.deviation = Some(reference.max_abs_diff(&out)? as f64 / scale);
                }
                None => references.push((case.clone(), out)),
            }
        }
        results.push(result);
    }
    Ok(results)
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        let c = &r.case;
        let (mean, std, min, measured) = match r.timing() {
            Some(t) => (
                format!("{:.9}", t.mean_s),
                format!("{:.9}", t.std_s),
                format!("{:.9}", t.min_s),
                t.macs_measured.to_string(),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{mean},{std},{min},{measured},{}\n",
            c.grid_h,
            c.grid_w,
            c.dim,
            c.batch,
            c.view.as_str(),
            c.reps,
            r.macs_analytic
        ));
    }
    out
}

pub fn write_csv(results: &[BenchResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(results)).map_err(|e| Error::io(path, e))
}

/// Reads cases from CSV. Required columns: `grid_h,grid_w,dim,batch,view`;
/// optional: `reps` (5), `warmup` (1), `seed` (0).
pub fn read_cases(path: impl AsRef<Path>) -> Result<Vec<BenchCase>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!("matched io above"),
            },
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["grid_h", "grid_w", "dim", "batch", "view"];
    for name in required {
        if col(name).is_none() {
            return Err(Error::Config(format!(
                "{}: missing column {name}",
                path.display()
            )));
        }
    }
    let mut cases = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |name: &str| col(name).and_then(|i| record.get(i)).filter(|s| !s.is_empty());
        let num = |name: &str, default: Option<u64>| -> Result<u64> {
            match field(name) {
                Some(s) => s.parse().map_err(|_| {
                    Error::Config(format!("{} line {line}: bad {name} {s:?}", path.display()))
                }),
                None => default.ok_or_else(|| {
                    Error::Config(format!("{} line {line}: missing {name}", path.display()))
                }),
            }
        };
        let view: View = field("view")
            .unwrap_or("")
            .parse()
            .map_err(|e| Error::Config(format!("{} line {line}: {e}", path.display())))?;
        let case = BenchCase {
            grid_h: num("grid_h", None)? as usize,
            grid_w: num("grid_w", None)? as usize,
            dim: num("dim", None)? as usize,
            batch: num("batch", None)? as usize,
            view,
            reps: num("reps", Some(5))? as usize,
            warmup: num("warmup", Some(1))? as usize,
            seed: num("seed", Some(0))?,
        };
        case.validate().map_err(|e| {
            let msg = match e {
                Error::Config(m) => m,
                e => e.to_string(),
            };
            Error::Config(format!("{} line {line}: {msg}", path.display()))
        })?;
        cases.push(case);
    }
    Ok(cases)
}
