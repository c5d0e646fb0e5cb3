use indexmap::IndexMap;

use crate::error::Result;
use crate::tensor::Tensor;

use super::tape::GradientMap;

/// Named f64 parameters a gradient check perturbs.
pub type ParamMap = IndexMap<String, Tensor<f64>>;

/// Step used by every finite-difference comparison.
pub const FD_STEP: f64 = 1e-4;

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central differences `(f(θ + h·e) − f(θ − h·e)) / 2h`, one coordinate at a
/// time.
pub fn finite_diff<F>(mut f: F, params: &ParamMap, h: f64) -> Result<GradientMap<f64>>
where
    F: FnMut(&ParamMap) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = GradientMap::new();
    for (name, tensor) in params {
        let mut grad = vec![0.0; tensor.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = tensor.data()[i];
            work[name].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[name].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[name].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Something with f64 parameters, a scalar loss, and an analytic gradient.
pub trait GradCheckTarget {
    fn parameters(&self) -> ParamMap;
    fn loss(&self, params: &ParamMap) -> Result<f64>;
    fn gradients(&self, params: &ParamMap) -> Result<GradientMap<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<40} max_rel_err={:.3e} {}",
                g.name,
                g.max_rel_error,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} ({} groups, tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.groups.len(),
            self.tolerance
        )
    }
}

/// Compares two gradient maps group by group.
pub fn compare(analytic: &GradientMap<f64>, numeric: &GradientMap<f64>, tolerance: f64) -> GradCheckReport {
    let groups = numeric
        .iter()
        .map(|(name, num)| {
            let (max_rel_error, worst_index) = match analytic.get(name) {
                Some(ana) if ana.shape() == num.shape() => ana
                    .data()
                    .iter()
                    .zip(num.data())
                    .map(|(&a, &b)| relative_error(a, b))
                    .enumerate()
                    .fold((0.0, 0), |(m, wi), (i, e)| if e > m { (e, i) } else { (m, wi) }),
                _ => (f64::INFINITY, 0),
            };
            GroupReport {
                name: name.clone(),
                max_rel_error,
                worst_index,
                passed: max_rel_error <= tolerance,
            }
        })
        .collect();
    GradCheckReport { tolerance, groups }
}

/// Runs both gradient routes in f64 and reports the worst relative error
/// per parameter group.
pub fn grad_check(target: &impl GradCheckTarget, tolerance: f64) -> Result<GradCheckReport> {
    let params = target.parameters();
    let analytic = target.gradients(&params)?;
    let numeric = finite_diff(|p| target.loss(p), &params, FD_STEP)?;
    Ok(compare(&analytic, &numeric, tolerance))
}
