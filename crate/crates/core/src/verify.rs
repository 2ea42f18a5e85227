//! Numerical identity checks.
//!
//! Each check recomputes a finite-sample identity that must hold exactly (up
//! to floating-point error) and reports the largest residual against its
//! tolerance:
//!
//! * `representation`: `mean[α̂·φ_j] = mean[w·m(φ_j)]` for every sieve feature.
//! * `closed_form`: saturated sieve representers equal the empirical-frequency
//!   inverse-probability weights.
//! * `eif_formula`: generic term assembly equals the hand-written influence
//!   functions of the ATE, the control mean among the treated, and the NDE.
//! * `orthogonality`: inner terms `D_k` (`k > 1`) average to zero in-sample.
//! * `saturated`: single-fold saturated estimates equal cell-mean enumeration.
//! * `gradients`: network gradients of the Riesz loss match central differences.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisConfig};
use crate::data::Dataset;
use crate::eif::{assemble_eif, one_step_estimate, verify_orthogonality, EstimatorSettings};
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpConfig};
use crate::nuisance::{fit_nuisances, NuisanceSettings};
use crate::riesz::{fit_representers, mlp_loss_and_grad, representation_residuals, riesz_loss, RieszSettings, Ridge};
use crate::rng;
use crate::sim::{expit, Dgp, DgpAppendix, DgpDiscrete};
use crate::spec::{BoundMap, BoundSpec, Builtin, EstimandSpec, FunctionalMap, RowFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Representation,
    ClosedForm,
    EifFormula,
    Orthogonality,
    Saturated,
    Gradients,
}

impl CheckName {
    pub const ALL: [CheckName; 6] = [
        CheckName::Representation,
        CheckName::ClosedForm,
        CheckName::EifFormula,
        CheckName::Orthogonality,
        CheckName::Saturated,
        CheckName::Gradients,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::Representation => "representation",
            CheckName::ClosedForm => "closed_form",
            CheckName::EifFormula => "eif_formula",
            CheckName::Orthogonality => "orthogonality",
            CheckName::Saturated => "saturated",
            CheckName::Gradients => "gradients",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            CheckName::Representation | CheckName::Orthogonality | CheckName::Saturated => 1e-10,
            CheckName::ClosedForm => 1e-8,
            CheckName::EifFormula => 1e-12,
            CheckName::Gradients => 1e-4,
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CheckName::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = CheckName::ALL.iter().map(|c| c.as_str()).collect();
                Error::usage(format!("unknown check `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: CheckName,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    /// Largest residual per sub-case.
    pub cases: Vec<(String, f64)>,
}

impl CheckResult {
    fn from_cases(name: CheckName, cases: Vec<(String, f64)>) -> Self {
        let residual = cases.iter().map(|c| c.1).fold(0.0, f64::max);
        let tolerance = name.tolerance();
        let finite = cases.iter().all(|c| c.1.is_finite());
        CheckResult {
            name,
            passed: finite && residual <= tolerance,
            residual: if finite { residual } else { f64::INFINITY },
            tolerance,
            cases,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub n: usize,
    pub seed: u64,
    /// Flips the sign of every fitted representer in the representation check.
    pub inject_sign_flip: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n: 2000,
            seed: 0,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }
}

pub fn run_checks(checks: &[CheckName], options: &VerifyOptions) -> Result<VerifyReport> {
    let results = checks
        .iter()
        .map(|&c| run_check(c, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        options: options.clone(),
        passed: results.iter().all(|r| r.passed),
        checks: results,
    })
}

pub fn run_check(check: CheckName, options: &VerifyOptions) -> Result<CheckResult> {
    let cases = match check {
        CheckName::Representation => representation_cases(options)?,
        CheckName::ClosedForm => closed_form_cases(options)?,
        CheckName::EifFormula => eif_formula_cases(options)?,
        CheckName::Orthogonality => orthogonality_cases(options)?,
        CheckName::Saturated => saturated_cases(options)?,
        CheckName::Gradients => gradient_cases(options)?,
    };
    Ok(CheckResult::from_cases(check, cases))
}

/// Every built-in arm, bound to seeded data from the DGP it is meant for.
fn builtin_cases(options: &VerifyOptions) -> Result<Vec<(String, BoundSpec, Dataset)>> {
    let discrete = Dgp::Discrete(DgpDiscrete::default()).simulate(options.n, options.seed)?;
    let appendix = Dgp::Appendix(DgpAppendix::default()).simulate(options.n, options.seed)?;
    let mut out = Vec::new();
    for b in Builtin::ALL {
        let data = if b == Builtin::Nde { &appendix } else { &discrete };
        let spec = b.spec();
        let arms: Vec<(String, EstimandSpec)> = match &spec.contrast {
            Some(c) => c
                .values
                .iter()
                .map(|&v| (format!("{}({}={v})", b.name(), c.param), spec.resolve(v)))
                .collect(),
            None => vec![(b.name().to_string(), spec.clone())],
        };
        for (label, arm) in arms {
            out.push((label, arm.bind(&data.schema)?, data.clone()));
        }
    }
    Ok(out)
}

fn exact_riesz(basis: BasisConfig) -> RieszSettings {
    RieszSettings {
        basis,
        ridge: Ridge::Fixed(0.0),
        ..Default::default()
    }
}

fn shared_basis() -> BasisConfig {
    BasisConfig::with_degree(2)
}

fn representation_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    let mut cases = Vec::new();
    let settings = exact_riesz(shared_basis());
    for (label, spec, data) in builtin_cases(options)? {
        let fits = fit_representers(&spec, &data, &settings)?;
        let sign = if options.inject_sign_flip { -1.0 } else { 1.0 };
        let mut weights: Option<Vec<f64>> = None;
        for (k, fit) in (1..).zip(&fits) {
            let stage = spec.stage(k);
            let basis = Basis::build(&data.schema, &stage.given, &settings.basis);
            let alpha = |r: &[f64]| sign * fit.eval(r);
            let res = representation_residuals(&alpha, &stage.map, &data, &basis, weights.as_deref());
            let worst = res.iter().map(|r| r.abs()).fold(0.0, f64::max);
            cases.push((format!("{label} k={k}"), worst));
            weights = Some(data.rows().map(|r| fit.eval(r)).collect());
        }
    }
    Ok(cases)
}

/// Cell counts `n[a][w]` over binary `(A, W)` in the first two columns.
fn cell_counts(data: &Dataset) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for r in data.rows() {
        c[r[1] as usize][r[0] as usize] += 1.0;
    }
    c
}

fn closed_form_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    let data = Dgp::Discrete(DgpDiscrete::default()).simulate(options.n, options.seed)?;
    let settings = exact_riesz(BasisConfig::default());
    let c = cell_counts(&data);
    let n = data.n_rows() as f64;
    let n1 = c[1][0] + c[1][1];
    let pi = n1 / n;
    let p = |w: usize| c[1][w] / (c[0][w] + c[1][w]);
    let mut cases = Vec::new();
    let mut compare = |label: &str, fit: &dyn RowFunction, target: &dyn Fn(usize, usize) -> f64| {
        let mut worst: f64 = 0.0;
        for a in 0..2 {
            for w in 0..2 {
                let row = [w as f64, a as f64, 0.0];
                worst = worst.max((fit.eval(&row) - target(a, w)).abs());
            }
        }
        cases.push((label.to_string(), worst));
    };

    let mt = fit_representers(&Builtin::MeanTreated.spec().bind(&data.schema)?, &data, &settings)?;
    compare("mean_treated k=1", &mt[0], &|a, _| if a == 1 { 1.0 / pi } else { 0.0 });

    let ate = fit_representers(&Builtin::Ate.spec().bind(&data.schema)?, &data, &settings)?;
    compare("ate k=2", &ate[1], &|a, w| if a == 1 { 1.0 / p(w) } else { -1.0 / (1.0 - p(w)) });

    let att = fit_representers(&Builtin::AttControlMean.spec().bind(&data.schema)?, &data, &settings)?;
    compare("att_control_mean k=1", &att[0], &|a, _| if a == 1 { 1.0 / pi } else { 0.0 });
    compare("att_control_mean k=2", &att[1], &|a, w| {
        if a == 0 {
            p(w) / (pi * (1.0 - p(w)))
        } else {
            0.0
        }
    });
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Hand-written influence functions

/// Random nuisance values for binary `(W, A)` designs.
#[derive(Debug, Clone)]
pub struct BinaryNuisances {
    /// `P(A = 1 | W = w)`
    pub g: [f64; 2],
    /// `P(A = 1)`
    pub pi: f64,
    /// `E[Y | A = a, W = w]`
    pub q: [[f64; 2]; 2],
    pub theta: f64,
}

/// `{1(A=1)/g(W) − 1(A=0)/(1−g(W))}(Y − Q(A,W)) + Q(1,W) − Q(0,W) − θ`
pub fn ate_eif_direct(nu: &BinaryNuisances, w: f64, a: f64, y: f64) -> f64 {
    let wi = w as usize;
    let g = nu.g[wi];
    let h = if a == 1.0 { 1.0 / g } else { -1.0 / (1.0 - g) };
    h * (y - nu.q[a as usize][wi]) + nu.q[1][wi] - nu.q[0][wi] - nu.theta
}

/// `1(A=0)/π · g(W)/(1−g(W)) · (Y − Q(A,W)) + 1(A=1)/π · (Q(0,W) − θ)`
pub fn att_eif_direct(nu: &BinaryNuisances, w: f64, a: f64, y: f64) -> f64 {
    let wi = w as usize;
    let g = nu.g[wi];
    let control = if a == 0.0 { 1.0 } else { 0.0 };
    let treated = 1.0 - control;
    control / nu.pi * g / (1.0 - g) * (y - nu.q[a as usize][wi]) + treated / nu.pi * (nu.q[0][wi] - nu.theta)
}

/// Random nuisance values for the mediation design.
#[derive(Debug, Clone)]
pub struct MediationNuisances {
    pub a_prime: f64,
    /// `P(A = 1 | W = w)`
    pub g: [f64; 2],
    /// Mean of `M` given `A = a, W = w`; `M` is normal with sd `m_sd`.
    pub m_mean: [[f64; 2]; 2],
    pub m_sd: f64,
    /// `Q_3 = expit(c0 + c1·A + c2·M + c3·W)`
    pub q3: [f64; 4],
    /// `Q_2(a, w)`
    pub q2: [[f64; 2]; 2],
    pub theta: f64,
}

impl MediationNuisances {
    pub fn q3_at(&self, a: f64, m: f64, w: f64) -> f64 {
        expit(self.q3[0] + self.q3[1] * a + self.q3[2] * m + self.q3[3] * w)
    }

    fn density(&self, m: f64, a: f64, w: f64) -> f64 {
        let z = (m - self.m_mean[a as usize][w as usize]) / self.m_sd;
        (-0.5 * z * z).exp() / (self.m_sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn prob_a(&self, a: f64, w: f64) -> f64 {
        let g = self.g[w as usize];
        if a == 1.0 {
            g
        } else {
            1.0 - g
        }
    }
}

/// ```text
/// 1(A=a')/f(a'|W) · f(M|0,W)/f(M|a',W) · (Y − Q3(A,M,W))
///   + 1(A=0)/f(0|W) · (Q3(a',M,W) − Q2(A,W))
///   + Q2(0,W) − θ
/// ```
pub fn nde_eif_direct(nu: &MediationNuisances, w: f64, a: f64, m: f64, y: f64) -> f64 {
    let ap = nu.a_prime;
    let ind_ap = if a == ap { 1.0 } else { 0.0 };
    let ind_0 = if a == 0.0 { 1.0 } else { 0.0 };
    let ratio = nu.density(m, 0.0, w) / nu.density(m, ap, w);
    ind_ap / nu.prob_a(ap, w) * ratio * (y - nu.q3_at(a, m, w))
        + ind_0 / nu.prob_a(0.0, w) * (nu.q3_at(ap, m, w) - nu.q2[a as usize][w as usize])
        + nu.q2[0][w as usize]
        - nu.theta
}

fn random_binary(rng: &mut rng::Rng) -> BinaryNuisances {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    BinaryNuisances {
        g: [u(0.05, 0.95), u(0.05, 0.95)],
        pi: u(0.05, 0.95),
        q: [[u(0.0, 1.0), u(0.0, 1.0)], [u(0.0, 1.0), u(0.0, 1.0)]],
        theta: u(-1.0, 1.0),
    }
}

fn random_mediation(rng: &mut rng::Rng) -> MediationNuisances {
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let m_mean = [[normal(), normal()], [normal(), normal()]];
    let q3 = [normal(), normal(), normal(), normal()];
    MediationNuisances {
        a_prime: if rng.random::<bool>() { 1.0 } else { 0.0 },
        g: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
        m_mean,
        m_sd: rng.random_range(0.5..2.0),
        q3,
        q2: [
            [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        ],
        theta: rng.random_range(-1.0..1.0),
    }
}

fn random_bit(rng: &mut rng::Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        0.0
    }
}

/// Largest `|generic − direct|` over `draws` random nuisance inputs, per estimand.
pub fn eif_formula_residuals(draws: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = rng::stream(rng::derive_seed(seed, 0xE1F), rng::STREAM_DATA);
    let discrete = Dgp::Discrete(DgpDiscrete::default()).schema();
    let appendix = Dgp::Appendix(DgpAppendix::default()).schema();
    let ate = Builtin::Ate.spec().bind(&discrete)?;
    let att = Builtin::AttControlMean.spec().bind(&discrete)?;
    let (mut worst_ate, mut worst_att, mut worst_nde) = (0.0f64, 0.0f64, 0.0f64);

    for _ in 0..draws {
        let nu = random_binary(&mut rng);
        let (w, a, y) = (random_bit(&mut rng), random_bit(&mut rng), random_bit(&mut rng));
        let data = Dataset::from_rows(discrete.clone(), vec![w, a, y], None)?;
        let q2 = |r: &[f64]| nu.q[r[1] as usize][r[0] as usize];
        let q1 = |_: &[f64]| 0.0;
        let one = |_: &[f64]| 1.0;

        let ate_alpha2 = |r: &[f64]| {
            let g = nu.g[r[0] as usize];
            if r[1] == 1.0 {
                1.0 / g
            } else {
                -1.0 / (1.0 - g)
            }
        };
        let generic = sum_terms(&ate, &[&one, &ate_alpha2], &[&q1, &q2], &data, nu.theta)?;
        worst_ate = worst_ate.max((generic - ate_eif_direct(&nu, w, a, y)).abs());

        let att_alpha1 = |r: &[f64]| if r[1] == 1.0 { 1.0 / nu.pi } else { 0.0 };
        let att_alpha2 = |r: &[f64]| {
            let g = nu.g[r[0] as usize];
            if r[1] == 0.0 {
                g / (nu.pi * (1.0 - g))
            } else {
                0.0
            }
        };
        let generic = sum_terms(&att, &[&att_alpha1, &att_alpha2], &[&q1, &q2], &data, nu.theta)?;
        worst_att = worst_att.max((generic - att_eif_direct(&nu, w, a, y)).abs());

        let nu = random_mediation(&mut rng);
        let nde = Builtin::Nde.spec().resolve(nu.a_prime).bind(&appendix)?;
        let (w, a, y) = (random_bit(&mut rng), random_bit(&mut rng), random_bit(&mut rng));
        let m = nu.m_mean[a as usize][w as usize] + nu.m_sd * rng.sample::<f64, _>(StandardNormal);
        let data = Dataset::from_rows(appendix.clone(), vec![w, a, m, y], None)?;
        let q3 = |r: &[f64]| nu.q3_at(r[1], r[2], r[0]);
        let q2 = |r: &[f64]| nu.q2[r[1] as usize][r[0] as usize];
        let alpha2 = |r: &[f64]| if r[1] == 0.0 { 1.0 / nu.prob_a(0.0, r[0]) } else { 0.0 };
        let alpha3 = |r: &[f64]| {
            if r[1] == nu.a_prime {
                nu.density(r[2], 0.0, r[0]) / nu.density(r[2], nu.a_prime, r[0]) / nu.prob_a(nu.a_prime, r[0])
            } else {
                0.0
            }
        };
        let generic = sum_terms(&nde, &[&one, &alpha2, &alpha3], &[&q1, &q2, &q3], &data, nu.theta)?;
        worst_nde = worst_nde.max((generic - nde_eif_direct(&nu, w, a, m, y)).abs());
    }
    Ok(vec![
        ("ate".into(), worst_ate),
        ("att_control_mean".into(), worst_att),
        ("nde".into(), worst_nde),
    ])
}

fn sum_terms(
    spec: &BoundSpec,
    alphas: &[&dyn RowFunction],
    qs: &[&dyn RowFunction],
    data: &Dataset,
    theta: f64,
) -> Result<f64> {
    Ok(assemble_eif(spec, alphas, qs, data, theta)?.iter().map(|t| t.values[0]).sum())
}

fn eif_formula_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    eif_formula_residuals(1000, options.seed)
}

fn orthogonality_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    let basis = shared_basis();
    let riesz = exact_riesz(basis);
    let nuisance = NuisanceSettings {
        basis,
        ridge: Ridge::Fixed(0.0),
        ..Default::default()
    };
    let mut cases = Vec::new();
    for (label, spec, data) in builtin_cases(options)? {
        let alphas = fit_representers(&spec, &data, &riesz)?;
        let qs = fit_nuisances(&spec, &data, &nuisance)?;
        let a: Vec<&dyn RowFunction> = alphas.iter().map(|x| x as &dyn RowFunction).collect();
        let q: Vec<&dyn RowFunction> = qs.iter().map(|x| x as &dyn RowFunction).collect();
        let report = verify_orthogonality(&spec, &data, &a, &q)?;
        cases.push((label, report.max_inner));
    }
    Ok(cases)
}

/// Enumeration of the ATE and the control mean among the treated from the
/// empirical cell means of a binary `(W, A, Y)` sample.
pub fn enumerate_discrete(data: &Dataset) -> (f64, f64) {
    let c = cell_counts(data);
    let mut s = [[0.0; 2]; 2];
    for r in data.rows() {
        s[r[1] as usize][r[0] as usize] += r[2];
    }
    let n = data.n_rows() as f64;
    let mean = |a: usize, w: usize| s[a][w] / c[a][w];
    let n1 = c[1][0] + c[1][1];
    let ate = (0..2)
        .map(|w| (mean(1, w) - mean(0, w)) * (c[0][w] + c[1][w]) / n)
        .sum();
    let att = (0..2).map(|w| mean(0, w) * c[1][w] / n1).sum();
    (ate, att)
}

fn saturated_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    let data = Dgp::Discrete(DgpDiscrete::default()).simulate(options.n, options.seed)?;
    let settings = EstimatorSettings {
        riesz: exact_riesz(BasisConfig::default()),
        nuisance: NuisanceSettings {
            ridge: Ridge::Fixed(0.0),
            ..Default::default()
        },
        folds: 1,
        seed: options.seed,
        ..Default::default()
    };
    let (ate, att) = enumerate_discrete(&data);
    let est_ate = one_step_estimate(&Builtin::Ate.spec(), &data, &settings)?;
    let est_att = one_step_estimate(&Builtin::AttControlMean.spec(), &data, &settings)?;
    Ok(vec![
        ("ate".into(), (est_ate.theta_hat - ate).abs()),
        ("att_control_mean".into(), (est_att.theta_hat - att).abs()),
    ])
}

/// Largest relative error between the analytic gradient of the Riesz loss of
/// a network and central finite differences with step `h`.
pub fn mlp_gradient_error(
    map: &BoundMap,
    data: &Dataset,
    inputs: &[usize],
    config: &MlpConfig,
    weights: Option<&[f64]>,
    h: f64,
) -> Result<f64> {
    let mut net = Mlp::new(inputs.len(), config);
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let mut grad = vec![0.0; net.n_params()];
    mlp_loss_and_grad(&net, inputs, map, data, &rows, weights, &mut grad);
    let loss_of = |net: &Mlp| -> Result<f64> {
        let f = |r: &[f64]| {
            let x: Vec<f64> = inputs.iter().map(|&j| r[j]).collect();
            net.forward(&x)
        };
        riesz_loss(&f, map, data, weights)
    };
    let mut worst: f64 = 0.0;
    for i in 0..net.n_params() {
        let orig = net.params[i];
        net.params[i] = orig + h;
        let up = loss_of(&net)?;
        net.params[i] = orig - h;
        let down = loss_of(&net)?;
        net.params[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        // Parameters feeding only inactive units have zero gradient exactly.
        let err = if scale < 1e-8 { (grad[i] - fd).abs() } else { (grad[i] - fd).abs() / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gradient_cases(options: &VerifyOptions) -> Result<Vec<(String, f64)>> {
    let mut cases = Vec::new();
    let discrete = Dgp::Discrete(DgpDiscrete::default()).simulate(16, options.seed)?;
    let appendix = Dgp::Appendix(DgpAppendix::default()).simulate(16, options.seed)?;
    let config = MlpConfig {
        seed: options.seed,
        ..Default::default()
    };
    let ate = FunctionalMap::difference("A").bind(&discrete.schema)?;
    cases.push((
        "ate map".into(),
        mlp_gradient_error(&ate, &discrete, &[0, 1], &config, None, 1e-5)?,
    ));
    let mut rng = rng::stream(rng::derive_seed(options.seed, 0x6AD), rng::STREAM_DATA);
    let weights: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
    let nde = FunctionalMap::point("A", 1.0).bind(&appendix.schema)?;
    cases.push((
        "weighted mediator map".into(),
        mlp_gradient_error(&nde, &appendix, &[0, 1, 2], &config, Some(&weights), 1e-5)?,
    ));
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            n: 600,
            seed: 3,
            inject_sign_flip: false,
        }
    }

    #[test]
    fn all_checks_pass() {
        let report = run_checks(&CheckName::ALL, &quick()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {:?}", c.name, c.cases);
        }
        assert!(report.passed);
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = VerifyOptions {
            inject_sign_flip: true,
            ..quick()
        };
        let r = run_check(CheckName::Representation, &opts).unwrap();
        assert!(!r.passed);
        assert!(r.residual > 1e-3);
    }

    #[test]
    fn check_names_parse() {
        for c in CheckName::ALL {
            assert_eq!(c.as_str().parse::<CheckName>().unwrap(), c);
        }
        assert!("nope".parse::<CheckName>().is_err());
    }

    #[test]
    fn direct_ate_formula_at_known_point() {
        let nu = BinaryNuisances {
            g: [0.5, 0.25],
            pi: 0.4,
            q: [[0.2, 0.3], [0.6, 0.9]],
            theta: 0.1,
        };
        // w=1, a=1, y=1: (1/0.25)(1-0.9) + 0.9 - 0.3 - 0.1
        assert!((ate_eif_direct(&nu, 1.0, 1.0, 1.0) - 0.9).abs() < 1e-15);
        // w=0, a=0, y=0: 1/0.4 * 0.5/0.5 * (0 - 0.2)
        assert!((att_eif_direct(&nu, 0.0, 0.0, 0.0) + 0.5).abs() < 1e-15);
    }
}
