//! Influence-function assembly and cross-fit one-step estimation.
//!
//! For a `K`-stage estimand with fitted representers `α̂_k` and regressions
//! `Q̂_k` the influence function is `φ = Σ_k D_k` with
//!
//! ```text
//! D_k = α̂_k · (m_{k+1}(x; Q̂_{k+1}) − Q̂_k(x))   for k > 1
//! D_1 = α̂_1 · (m_2(x; Q̂_2) − θ)
//! ```
//!
//! and `m_{K+1}(x; ·) = y`. `φ` is linear in `θ`, so the one-step estimate
//! solves `mean φ = 0` directly:
//! `θ̂ = mean[Σ_{k>1} D_k + α̂_1·m_2] / mean[α̂_1]`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisances, NuisanceSettings};
use crate::riesz::{fit_representers, RieszMethod, RieszSettings};
use crate::rng;
use crate::spec::{BoundSpec, EstimandSpec, RowFunction};

pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EifTerm {
    pub k: usize,
    pub values: Vec<f64>,
}

impl EifTerm {
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len().max(2) - 1) as f64).sqrt()
}

/// Per-row target of the stage-`k` correction: `y` at the innermost stage,
/// otherwise `m_{k+1}(x; Q̂_{k+1})`.
fn next_mapped(spec: &BoundSpec, k: usize, nuisances: &[&dyn RowFunction], row: &[f64], scratch: &mut [f64]) -> f64 {
    if k == spec.depth() {
        row[spec.outcome]
    } else {
        spec.stage(k + 1).map.apply_with(nuisances[k], row, scratch)
    }
}

fn check_counts(spec: &BoundSpec, alphas: usize, nuisances: usize) -> Result<()> {
    if alphas != spec.depth() || nuisances != spec.depth() {
        return Err(Error::usage(format!(
            "{} stages need {} representers and regressions, got {alphas} and {nuisances}",
            spec.name,
            spec.depth()
        )));
    }
    Ok(())
}

/// `D_1, ..., D_K` on every row of `data`.
pub fn assemble_eif(
    spec: &BoundSpec,
    alphas: &[&dyn RowFunction],
    nuisances: &[&dyn RowFunction],
    data: &Dataset,
    theta: f64,
) -> Result<Vec<EifTerm>> {
    check_counts(spec, alphas.len(), nuisances.len())?;
    let mut scratch = vec![0.0; data.n_cols()];
    let mut terms = Vec::with_capacity(spec.depth());
    for k in 1..=spec.depth() {
        let mut values = Vec::with_capacity(data.n_rows());
        for (i, row) in data.rows().enumerate() {
            let next = next_mapped(spec, k, nuisances, row, &mut scratch);
            let base = if k == 1 { theta } else { nuisances[k - 1].eval(row) };
            let d = alphas[k - 1].eval(row) * (next - base);
            if !d.is_finite() {
                return Err(Error::numerical(format!("non-finite EIF term D_{k} at row {i}")));
            }
            values.push(d);
        }
        terms.push(EifTerm { k, values });
    }
    Ok(terms)
}

/// Per-row pieces of the influence function that do not involve `θ`.
struct RowParts {
    /// `Σ_{k>1} D_k + α̂_1 · m_2`
    numerator: f64,
    /// `α̂_1`
    weight: f64,
    /// `m_1(x; Q̂_1)`
    plug_in: f64,
    /// `D_k` for `k > 1`, in stage order.
    inner: Vec<f64>,
}

fn row_parts(
    spec: &BoundSpec,
    alphas: &[&dyn RowFunction],
    nuisances: &[&dyn RowFunction],
    row: &[f64],
    row_index: usize,
    scratch: &mut [f64],
) -> Result<RowParts> {
    let mut inner = Vec::with_capacity(spec.depth() - 1);
    for k in 2..=spec.depth() {
        let next = next_mapped(spec, k, nuisances, row, scratch);
        let d = alphas[k - 1].eval(row) * (next - nuisances[k - 1].eval(row));
        if !d.is_finite() {
            return Err(Error::numerical(format!("non-finite EIF term D_{k} at row {row_index}")));
        }
        inner.push(d);
    }
    let weight = alphas[0].eval(row);
    let m2 = next_mapped(spec, 1, nuisances, row, scratch);
    let numerator = inner.iter().sum::<f64>() + weight * m2;
    let plug_in = spec.stage(1).map.apply_with(nuisances[0], row, scratch);
    if !numerator.is_finite() || !weight.is_finite() {
        return Err(Error::numerical(format!("non-finite EIF term D_1 at row {row_index}")));
    }
    if !plug_in.is_finite() {
        return Err(Error::numerical(format!("non-finite plug-in value at row {row_index}")));
    }
    Ok(RowParts {
        numerator,
        weight,
        plug_in,
        inner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    /// Representer fitting; `riesz.basis` is the representer basis.
    pub riesz: RieszSettings,
    /// Regression fitting; `nuisance.basis` is the regression basis.
    pub nuisance: NuisanceSettings,
    /// `1` disables cross-fitting.
    pub folds: usize,
    pub min_fold_rows: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            riesz: RieszSettings::default(),
            nuisance: NuisanceSettings::default(),
            folds: 5,
            min_fold_rows: 50,
            level: 0.95,
            seed: 0,
        }
    }
}

impl EstimatorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::usage("at least one fold is required"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::usage(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        if let RieszMethod::Mlp(cfg) = &self.riesz.method {
            cfg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Fitted Riesz loss per stage, `k = 1..K`.
    pub riesz_loss: Vec<f64>,
    pub clipped: Vec<usize>,
    /// Gram condition numbers of the regressions, `k = 1..K`.
    pub regression_condition: Vec<f64>,
    /// Fold-level solution of `mean φ = 0`.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub value: f64,
    pub theta_hat: f64,
    pub plug_in: f64,
    pub std_error: f64,
    pub ci: Interval,
    pub eif_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub param: String,
    pub arms: Vec<ArmReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub fold_seed: u64,
    pub settings: EstimatorSettings,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub n: usize,
    pub theta_hat: f64,
    pub plug_in: f64,
    pub std_error: f64,
    pub ci: Interval,
    /// `φ_i / mean(α̂_1)` evaluated at `θ = plug_in`; its mean is `theta_hat − plug_in`.
    pub eif_values: Vec<f64>,
    /// `α̂_1,i / mean(α̂_1)`: the slope of `eif_values` in `θ`. Absent for
    /// contrasts whose arms have different outer weights.
    pub outer_weights: Option<Vec<f64>>,
    /// Means of `D_k` for `k > 1`.
    pub term_means: Vec<(usize, f64)>,
    pub per_fold: Vec<FoldDiagnostics>,
    pub contrast: Option<ContrastReport>,
    pub provenance: Provenance,
}

impl EstimateReport {
    /// Influence values at an arbitrary `θ`.
    pub fn eif_at(&self, theta: f64) -> Option<Vec<f64>> {
        let w = self.outer_weights.as_ref()?;
        Some(
            self.eif_values
                .iter()
                .zip(w)
                .map(|(e, w)| e - (theta - self.plug_in) * w)
                .collect(),
        )
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }
}

/// Standard normal quantile (Acklam's rational approximation, relative error < 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

fn interval(theta: f64, se: f64, level: f64) -> Interval {
    let z = normal_quantile(0.5 + level / 2.0);
    Interval {
        lo: theta - z * se,
        hi: theta + z * se,
        level,
    }
}

/// Fold index of every row from a seeded permutation.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::STREAM_FOLDS));
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

struct FoldResult {
    rows: Vec<usize>,
    parts: Vec<RowParts>,
    diagnostics: FoldDiagnostics,
}

fn fit_and_evaluate(
    spec: &BoundSpec,
    train: &Dataset,
    eval: &Dataset,
    eval_rows: Vec<usize>,
    fold: usize,
    settings: &EstimatorSettings,
) -> Result<FoldResult> {
    let mut riesz = settings.riesz.clone();
    if let RieszMethod::Mlp(cfg) = &mut riesz.method {
        cfg.seed = rng::derive_seed(settings.seed, fold as u64);
    }
    let alphas = fit_representers(spec, train, &riesz)?;
    let qs = fit_nuisances(spec, train, &settings.nuisance)?;
    let alpha_refs: Vec<&dyn RowFunction> = alphas.iter().map(|a| a as &dyn RowFunction).collect();
    let q_refs: Vec<&dyn RowFunction> = qs.iter().map(|q| q as &dyn RowFunction).collect();
    let mut scratch = vec![0.0; eval.n_cols()];
    let parts = eval
        .rows()
        .zip(&eval_rows)
        .map(|(row, &i)| row_parts(spec, &alpha_refs, &q_refs, row, i, &mut scratch))
        .collect::<Result<Vec<_>>>()?;
    let num: f64 = parts.iter().map(|p| p.numerator).sum();
    let den: f64 = parts.iter().map(|p| p.weight).sum();
    Ok(FoldResult {
        rows: eval_rows,
        diagnostics: FoldDiagnostics {
            fold,
            n_train: train.n_rows(),
            n_eval: eval.n_rows(),
            riesz_loss: alphas.iter().map(|a| a.fitted_loss).collect(),
            clipped: alphas.iter().map(|a| a.clipped).collect(),
            regression_condition: qs.iter().map(|q| q.condition).collect(),
            theta: num / den,
        },
        parts,
    })
}

struct ArmEstimate {
    theta_hat: f64,
    plug_in: f64,
    /// Per row, in dataset order.
    eif_values: Vec<f64>,
    outer_weights: Vec<f64>,
    term_means: Vec<(usize, f64)>,
    per_fold: Vec<FoldDiagnostics>,
}

fn check_fold(spec: &BoundSpec, data: &Dataset, rows: &[usize], what: &str, fold: usize) -> Result<()> {
    if let Some((col, levels)) = spec.treatment_levels() {
        for level in levels {
            if !rows.iter().any(|&i| data.row(i)[col] == level) {
                return Err(Error::numerical(format!(
                    "degenerate fold: {what} rows of fold {fold} contain no `{}` = {level}",
                    data.schema.column(col).name
                )));
            }
        }
    }
    Ok(())
}

fn estimate_arm(spec: &BoundSpec, data: &Dataset, folds: &[usize], settings: &EstimatorSettings) -> Result<ArmEstimate> {
    let v = settings.folds;
    let n = data.n_rows();
    let plans: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..v)
        .map(|f| {
            let eval: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = if v == 1 {
                eval.clone()
            } else {
                (0..n).filter(|&i| folds[i] != f).collect()
            };
            (f, train, eval)
        })
        .collect();
    for (f, train, eval) in &plans {
        check_fold(spec, data, eval, "evaluation", *f)?;
        check_fold(spec, data, train, "training", *f)?;
    }
    let results = plans
        .into_par_iter()
        .map(|(f, train, eval)| {
            let train_data = data.subset(&train);
            let eval_data = data.subset(&eval);
            fit_and_evaluate(spec, &train_data, &eval_data, eval, f, settings)
        })
        .collect::<Vec<Result<FoldResult>>>();

    let mut by_row: Vec<Option<RowParts>> = (0..n).map(|_| None).collect();
    let mut per_fold = Vec::with_capacity(v);
    for r in results {
        let r = r?;
        for (i, p) in r.rows.into_iter().zip(r.parts) {
            by_row[i] = Some(p);
        }
        per_fold.push(r.diagnostics);
    }
    let parts: Vec<RowParts> = by_row.into_iter().map(|p| p.expect("every row is in one fold")).collect();

    let nf = n as f64;
    let d_bar = parts.iter().map(|p| p.weight).sum::<f64>() / nf;
    if !(d_bar.abs() > 0.0) {
        return Err(Error::numerical("outer representer has zero mean; the estimand is not identified"));
    }
    let num_bar = parts.iter().map(|p| p.numerator).sum::<f64>() / nf;
    let theta_hat = num_bar / d_bar;
    let plug_in = parts.iter().map(|p| p.plug_in).sum::<f64>() / nf;
    let eif_values: Vec<f64> = parts.iter().map(|p| (p.numerator - p.weight * plug_in) / d_bar).collect();
    let outer_weights: Vec<f64> = parts.iter().map(|p| p.weight / d_bar).collect();
    let term_means = (2..=spec.depth())
        .map(|k| (k, parts.iter().map(|p| p.inner[k - 2]).sum::<f64>() / nf))
        .collect();
    Ok(ArmEstimate {
        theta_hat,
        plug_in,
        eif_values,
        outer_weights,
        term_means,
        per_fold,
    })
}

/// Cross-fit one-step estimate of `spec` on `data`.
pub fn one_step_estimate(spec: &EstimandSpec, data: &Dataset, settings: &EstimatorSettings) -> Result<EstimateReport> {
    settings.validate()?;
    spec.validate()?;
    for arm in spec.arms() {
        arm.bind(&data.schema)?;
    }
    let n = data.n_rows();
    let v = settings.folds;
    if n / v < settings.min_fold_rows {
        return Err(Error::usage(format!(
            "{n} rows cannot fill {v} folds of at least {} rows",
            settings.min_fold_rows
        )));
    }
    let fold_seed = rng::derive_seed(settings.seed, 0);
    let folds = if v == 1 { vec![0; n] } else { assign_folds(n, v, fold_seed) };
    let provenance = Provenance {
        spec_hash: spec.content_hash(),
        dataset_hash: data.content_hash(),
        seed: settings.seed,
        fold_seed,
        settings: settings.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let sqrt_n = (n as f64).sqrt();

    match &spec.contrast {
        None => {
            let bound = spec.bind(&data.schema)?;
            let arm = estimate_arm(&bound, data, &folds, settings)?;
            let std_error = sample_sd(&arm.eif_values) / sqrt_n;
            Ok(EstimateReport {
                estimand: spec.name.clone(),
                n,
                theta_hat: arm.theta_hat,
                plug_in: arm.plug_in,
                std_error,
                ci: interval(arm.theta_hat, std_error, settings.level),
                eif_values: arm.eif_values,
                outer_weights: Some(arm.outer_weights),
                term_means: arm.term_means,
                per_fold: arm.per_fold,
                contrast: None,
                provenance,
            })
        }
        Some(contrast) => {
            let arms = contrast
                .values
                .iter()
                .map(|&value| {
                    let bound = spec.resolve(value).bind(&data.schema)?;
                    Ok((value, estimate_arm(&bound, data, &folds, settings)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (a, b) = (&arms[0].1, &arms[1].1);
            let eif_values: Vec<f64> = a.eif_values.iter().zip(&b.eif_values).map(|(x, y)| x - y).collect();
            let theta_hat = a.theta_hat - b.theta_hat;
            let std_error = sample_sd(&eif_values) / sqrt_n;
            let outer_weights = (a.outer_weights == b.outer_weights).then(|| a.outer_weights.clone());
            let term_means = a
                .term_means
                .iter()
                .zip(&b.term_means)
                .map(|(&(k, x), &(_, y))| (k, x - y))
                .collect();
            let per_fold = arms.iter().flat_map(|(_, arm)| arm.per_fold.clone()).collect();
            let arm_reports = arms
                .iter()
                .map(|(value, arm)| {
                    let se = sample_sd(&arm.eif_values) / sqrt_n;
                    ArmReport {
                        value: *value,
                        theta_hat: arm.theta_hat,
                        plug_in: arm.plug_in,
                        std_error: se,
                        ci: interval(arm.theta_hat, se, settings.level),
                        eif_values: arm.eif_values.clone(),
                    }
                })
                .collect();
            Ok(EstimateReport {
                estimand: spec.name.clone(),
                n,
                theta_hat,
                plug_in: a.plug_in - b.plug_in,
                std_error,
                ci: interval(theta_hat, std_error, settings.level),
                eif_values,
                outer_weights,
                term_means,
                per_fold,
                contrast: Some(ContrastReport {
                    param: contrast.param.clone(),
                    arms: arm_reports,
                }),
                provenance,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    /// `(k, mean D_k)` for every stage.
    pub term_means: Vec<(usize, f64)>,
    /// Largest `|mean D_k|` over `k > 1`.
    pub max_inner: f64,
    pub passed: bool,
}

/// Means of the assembled terms on the training data itself. With a common
/// basis for representers and regressions and no ridge, every `k > 1` term
/// averages to zero.
pub fn verify_orthogonality(
    spec: &BoundSpec,
    data: &Dataset,
    alphas: &[&dyn RowFunction],
    nuisances: &[&dyn RowFunction],
) -> Result<OrthogonalityReport> {
    check_counts(spec, alphas.len(), nuisances.len())?;
    let mut scratch = vec![0.0; data.n_cols()];
    let plug_in = mean(
        &data
            .rows()
            .map(|r| spec.stage(1).map.apply_with(nuisances[0], r, &mut scratch))
            .collect::<Vec<_>>(),
    );
    let terms = assemble_eif(spec, alphas, nuisances, data, plug_in)?;
    let term_means: Vec<(usize, f64)> = terms.iter().map(|t| (t.k, t.mean())).collect();
    let max_inner = term_means.iter().skip(1).map(|(_, m)| m.abs()).fold(0.0, f64::max);
    Ok(OrthogonalityReport {
        term_means,
        max_inner,
        passed: max_inner <= ORTHOGONALITY_TOLERANCE,
    })
}
