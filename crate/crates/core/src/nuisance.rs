//! Sequential outcome regressions `Q_K, ..., Q_1`.
//!
//! The innermost stage regresses the outcome; every other stage regresses
//! the pseudo-outcome `m_{k+1}(x; Q̂_{k+1})`. Fits are sieve least squares
//! or, for binary outcomes, sieve logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisConfig};
use crate::data::{Dataset, Support};
use crate::error::{Error, Result};
use crate::linalg::{self, Normal};
use crate::riesz::Ridge;
use crate::sim::expit;
use crate::spec::{BoundMap, BoundSpec, RegressTarget, RowFunction};

pub const LOGISTIC_TOLERANCE: f64 = 1e-9;
pub const LOGISTIC_MAX_ITER: usize = 100;
/// Extra full Newton steps taken after convergence.
const POLISH_STEPS: usize = 2;
/// Below this gradient size Newton steps are taken without line search.
const FULL_STEP_GRADIENT: f64 = 1e-4;
/// Fitted linear predictors beyond this magnitude indicate separation.
const SEPARATION_ETA: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FamilyChoice {
    /// Logistic for a binary outcome at the innermost stage, least squares elsewhere.
    #[default]
    Auto,
    LeastSquares,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LeastSquares,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NuisanceSettings {
    pub basis: BasisConfig,
    pub ridge: Ridge,
    pub family: FamilyChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub stage: usize,
    pub family: Family,
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub condition: f64,
    /// Newton iterations (logistic only).
    pub iterations: usize,
    /// Asymptotic standard errors of the coefficients (logistic only).
    pub std_errors: Option<Vec<f64>>,
}

impl NuisanceFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.basis
            .features
            .iter()
            .zip(&self.coefficients)
            .map(|(f, c)| c * f.eval(row))
            .sum()
    }

    pub fn coefficient(&self, feature: &str) -> Option<f64> {
        self.basis
            .features
            .iter()
            .position(|f| f.name == feature)
            .map(|i| self.coefficients[i])
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("fits serialize") + "\n"
    }
}

impl RowFunction for NuisanceFit {
    fn eval(&self, row: &[f64]) -> f64 {
        let eta = self.linear_predictor(row);
        match self.family {
            Family::LeastSquares => eta,
            Family::Logistic => expit(eta),
        }
    }
}

/// `apply_map(map, f, row)` for every row.
pub fn predict_mapped<F: RowFunction + ?Sized>(f: &F, map: &BoundMap, data: &Dataset) -> Vec<f64> {
    let mut scratch = vec![0.0; data.n_cols()];
    data.rows().map(|r| map.apply_with(f, r, &mut scratch)).collect()
}

/// Regression targets of stage `k`: `y` at the innermost stage, otherwise
/// the stage-`k+1` map applied to `prev`.
pub fn stage_targets(spec: &BoundSpec, k: usize, data: &Dataset, prev: Option<&dyn RowFunction>) -> Result<Vec<f64>> {
    match spec.stage(k).target {
        RegressTarget::Outcome => Ok(data.column(spec.outcome).collect()),
        RegressTarget::PreviousMap => {
            let prev = prev.ok_or_else(|| Error::usage(format!("stage {k} needs the stage-{} fit", k + 1)))?;
            Ok(predict_mapped(prev, &spec.stage(k + 1).map, data))
        }
    }
}

fn resolve_family(spec: &BoundSpec, k: usize, choice: FamilyChoice) -> Family {
    match choice {
        FamilyChoice::LeastSquares => Family::LeastSquares,
        FamilyChoice::Logistic => Family::Logistic,
        FamilyChoice::Auto => {
            if spec.stage(k).target == RegressTarget::Outcome && *spec.outcome_support() == Support::Binary {
                Family::Logistic
            } else {
                Family::LeastSquares
            }
        }
    }
}

/// Fits stage `k` of `spec`.
pub fn fit_stage(
    spec: &BoundSpec,
    k: usize,
    data: &Dataset,
    prev: Option<&dyn RowFunction>,
    settings: &NuisanceSettings,
) -> Result<NuisanceFit> {
    let targets = stage_targets(spec, k, data, prev)?;
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::numerical(format!("non-finite regression target at stage {k}, row {i}")));
    }
    let basis = Basis::build(&data.schema, &spec.stage(k).given, &settings.basis);
    match resolve_family(spec, k, settings.family) {
        Family::LeastSquares => fit_least_squares(k, data, &targets, basis, settings.ridge),
        Family::Logistic => fit_logistic(k, data, &targets, basis, settings.ridge),
    }
}

/// Fits every stage, innermost first; the result is indexed by `k − 1`.
pub fn fit_nuisances(spec: &BoundSpec, data: &Dataset, settings: &NuisanceSettings) -> Result<Vec<NuisanceFit>> {
    let mut fits: Vec<NuisanceFit> = Vec::with_capacity(spec.depth());
    for k in (1..=spec.depth()).rev() {
        let prev = fits.last().map(|f| f as &dyn RowFunction);
        let fit = fit_stage(spec, k, data, prev, settings)?;
        fits.push(fit);
    }
    fits.reverse();
    Ok(fits)
}

fn design(data: &Dataset, basis: &Basis) -> Vec<Vec<f64>> {
    data.rows().map(|r| basis.eval(r)).collect()
}

pub fn fit_least_squares(k: usize, data: &Dataset, y: &[f64], basis: Basis, ridge: Ridge) -> Result<NuisanceFit> {
    let p = basis.dim();
    let mut acc = Normal::new(p);
    let mut phi = vec![0.0; p];
    let mut t = vec![0.0; p];
    for (row, &yi) in data.rows().zip(y) {
        basis.eval_into(row, &mut phi);
        for (tj, pj) in t.iter_mut().zip(&phi) {
            *tj = pj * yi;
        }
        acc.push(&phi, 1.0, &t);
    }
    let (gram, b) = acc.finish();
    let lambda = ridge.resolve(&gram)?;
    let intercept = basis.features.iter().position(|f| f.is_intercept());
    let (coef, condition) = linalg::solve_spd(&(&gram + linalg::ridge_matrix(p, lambda, intercept)), &b)?;
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::numerical(format!("non-finite regression coefficients at stage {k}")));
    }
    Ok(NuisanceFit {
        stage: k,
        family: Family::LeastSquares,
        basis,
        coefficients: coef.iter().copied().collect(),
        lambda,
        condition,
        iterations: 0,
        std_errors: None,
    })
}

/// Penalised mean log-likelihood `mean[y·η − log(1 + e^η)] − λ/2 · cᵀDc`.
fn logistic_objective(x: &[Vec<f64>], y: &[f64], c: &DVector<f64>, penalty: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let ll: f64 = x
        .iter()
        .zip(y)
        .map(|(phi, &yi)| {
            let eta: f64 = phi.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            // log(1 + e^η) without overflow
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            yi * eta - softplus
        })
        .sum();
    ll / n - 0.5 * (c.transpose() * penalty * c)[(0, 0)]
}

fn logistic_derivatives(
    x: &[Vec<f64>],
    y: &[f64],
    c: &DVector<f64>,
    penalty: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = c.len();
    let mut acc = Normal::new(p);
    let mut t = vec![0.0; p];
    for (phi, &yi) in x.iter().zip(y) {
        let eta: f64 = phi.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let mu = expit(eta);
        for (tj, pj) in t.iter_mut().zip(phi) {
            *tj = pj * (yi - mu);
        }
        acc.push(phi, mu * (1.0 - mu), &t);
    }
    let (info, score) = acc.finish();
    (score - penalty * c, info + penalty)
}

pub fn fit_logistic(k: usize, data: &Dataset, y: &[f64], basis: Basis, ridge: Ridge) -> Result<NuisanceFit> {
    if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::schema(format!(
            "logistic regression needs targets in [0, 1]; row {i} has {}",
            y[i]
        )));
    }
    let p = basis.dim();
    let x = design(data, &basis);
    let mut gram_acc = Normal::new(p);
    for phi in &x {
        gram_acc.push(phi, 1.0, &vec![0.0; p]);
    }
    let (gram, _) = gram_acc.finish();
    let lambda = ridge.resolve(&gram)?;
    let intercept = basis.features.iter().position(|f| f.is_intercept());
    let penalty = linalg::ridge_matrix(p, lambda, intercept);

    let mut c = DVector::zeros(p);
    if let Some(i) = intercept {
        let ybar = (y.iter().sum::<f64>() / y.len() as f64).clamp(1e-6, 1.0 - 1e-6);
        c[i] = (ybar / (1.0 - ybar)).ln();
    }
    let mut objective = logistic_objective(&x, y, &c, &penalty);
    let mut iterations = 0;
    let mut polish = 0;
    let mut condition = f64::NAN;
    loop {
        let (grad, hess) = logistic_derivatives(&x, y, &c, &penalty);
        let max_grad = grad.amax();
        if !max_grad.is_finite() {
            return Err(Error::numerical(format!("logistic fit at stage {k} produced a non-finite gradient")));
        }
        if max_grad < LOGISTIC_TOLERANCE {
            if polish == POLISH_STEPS {
                break;
            }
            polish += 1;
        }
        if iterations == LOGISTIC_MAX_ITER {
            return Err(Error::numerical(format!(
                "logistic fit at stage {k} did not converge in {LOGISTIC_MAX_ITER} iterations (max gradient {max_grad:.3e}); \
                 the outcome may be separable, try a ridge penalty > 0"
            )));
        }
        let (step, cond) = linalg::solve_spd(&hess, &grad)?;
        condition = cond;
        iterations += 1;
        if max_grad < FULL_STEP_GRADIENT {
            c += &step;
            objective = logistic_objective(&x, y, &c, &penalty);
            continue;
        }
        // Backtracking on the penalised likelihood.
        let mut t = 1.0;
        loop {
            let candidate = &c + &step * t;
            let value = logistic_objective(&x, y, &candidate, &penalty);
            if value >= objective - 1e-15 * objective.abs() || t < 1e-10 {
                c = candidate;
                objective = value;
                break;
            }
            t *= 0.5;
        }
    }
    let max_eta = x
        .iter()
        .map(|phi| phi.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if max_eta > SEPARATION_ETA {
        return Err(Error::numerical(format!(
            "logistic fit at stage {k} has fitted probabilities of 0 or 1 (|linear predictor| {max_eta:.1}); \
             the outcome is separable, try a ridge penalty > 0"
        )));
    }
    let (_, hess) = logistic_derivatives(&x, y, &c, &penalty);
    let n = y.len() as f64;
    let std_errors = hess
        .clone()
        .try_inverse()
        .map(|inv| (0..p).map(|j| (inv[(j, j)] / n).sqrt()).collect());
    Ok(NuisanceFit {
        stage: k,
        family: Family::Logistic,
        basis,
        coefficients: c.iter().copied().collect(),
        lambda,
        condition,
        iterations,
        std_errors,
    })
}

/// `mean[φ_j · (target − Q̂)]` for every feature of the fit's basis.
pub fn residual_orthogonality(fit: &NuisanceFit, data: &Dataset, targets: &[f64]) -> Vec<f64> {
    let p = fit.basis.dim();
    let mut out = vec![0.0; p];
    let mut phi = vec![0.0; p];
    for (row, &t) in data.rows().zip(targets) {
        fit.basis.eval_into(row, &mut phi);
        let r = t - fit.eval(row);
        for (o, f) in out.iter_mut().zip(&phi) {
            *o += f * r;
        }
    }
    let n = data.n_rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
