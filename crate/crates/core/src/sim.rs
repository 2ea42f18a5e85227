//! Data-generating processes with exact ground truth.
//!
//! Two DGPs are provided. [`DgpAppendix`] is the binary-confounder /
//! normal-mediator / logistic-outcome mechanism used for the natural direct
//! effect; [`DgpDiscrete`] is a 2×2 design over binary `(W, A)` with a
//! Bernoulli outcome, used for the treatment-effect estimands.
//!
//! [`TruthOracle`] evaluates any estimand whose variables the DGP provides,
//! by exact summation over the binary variables and Gauss–Hermite quadrature
//! against the normal mediator density. It shares no code with the
//! estimators.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, Role, Schema, Support};
use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::rng;
use crate::spec::{BoundSpec, Builtin, EstimandSpec, RowFunction};

/// Logistic function, branch-stable for large `|x|`.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

// Column layout shared by both DGPs: W, A, [M], Y.
const COL_W: usize = 0;
const COL_A: usize = 1;
const COL_M: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpAppendix {
    pub p_w: f64,
    pub p_a: f64,
    pub m_intercept: f64,
    pub m_a: f64,
    pub m_w: f64,
    pub m_sd: f64,
    pub y_intercept: f64,
    pub y_a: f64,
    pub y_m: f64,
    pub y_w: f64,
}

impl Default for DgpAppendix {
    fn default() -> Self {
        DgpAppendix {
            p_w: 0.4,
            p_a: 0.5,
            m_intercept: 0.6,
            m_a: 0.05,
            m_w: -0.3,
            m_sd: 1.0,
            y_intercept: -(5f64.ln()),
            y_a: 2f64.ln(),
            y_m: 3f64.ln(),
            y_w: -(1.2f64.ln()),
        }
    }
}

impl DgpAppendix {
    pub fn validate(&self) -> Result<()> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.p_w) || !open(self.p_a) {
            return Err(Error::usage("DGP probabilities must lie strictly inside (0, 1)"));
        }
        if !(self.m_sd > 0.0) {
            return Err(Error::usage("mediator standard deviation must be positive"));
        }
        Ok(())
    }

    pub fn mediator_mean(&self, a: f64, w: f64) -> f64 {
        self.m_intercept + self.m_a * a + self.m_w * w
    }

    pub fn outcome_mean(&self, a: f64, m: f64, w: f64) -> f64 {
        expit(self.y_intercept + self.y_a * a + self.y_m * m + self.y_w * w)
    }
}

/// Binary `W`, binary `A`, Bernoulli `Y`; tables indexed `[a][w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpDiscrete {
    pub p_w: f64,
    /// `P(A = 1 | W = w)` for `w = 0, 1`.
    pub propensity: [f64; 2],
    /// `E[Y | A = a, W = w]` as `outcome_mean[a][w]`.
    pub outcome_mean: [[f64; 2]; 2],
}

impl DgpDiscrete {
    pub fn new(p_w: f64, propensity: [f64; 2], outcome_mean: [[f64; 2]; 2]) -> Result<Self> {
        let d = DgpDiscrete {
            p_w,
            propensity,
            outcome_mean,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.p_w) {
            return Err(Error::usage("P(W = 1) must lie strictly inside (0, 1)"));
        }
        if !self.propensity.iter().all(|&p| open(p)) {
            return Err(Error::usage("positivity violated: propensities must lie strictly inside (0, 1)"));
        }
        if !self.outcome_mean.iter().flatten().all(|&q| (0.0..=1.0).contains(&q)) {
            return Err(Error::usage("outcome means must be probabilities"));
        }
        Ok(())
    }
}

impl Default for DgpDiscrete {
    /// Confounded design: treated units are concentrated at `W = 1`, where
    /// outcomes are higher. ATE = 0.3.
    fn default() -> Self {
        DgpDiscrete {
            p_w: 0.5,
            propensity: [0.3, 0.7],
            outcome_mean: [[0.2, 0.4], [0.5, 0.7]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dgp {
    Appendix(DgpAppendix),
    Discrete(DgpDiscrete),
}

impl Dgp {
    pub fn name(&self) -> &'static str {
        match self {
            Dgp::Appendix(_) => "appendix",
            Dgp::Discrete(_) => "discrete",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::Appendix(d) => d.validate(),
            Dgp::Discrete(d) => d.validate(),
        }
    }

    pub fn has_mediator(&self) -> bool {
        matches!(self, Dgp::Appendix(_))
    }

    pub fn schema(&self) -> Schema {
        let mut cols = vec![
            Column::new("W", Role::Covariate, Support::Binary),
            Column::new("A", Role::Treatment, Support::Binary),
        ];
        if self.has_mediator() {
            cols.push(Column::new("M", Role::Mediator, Support::Real));
        }
        cols.push(Column::new("Y", Role::Outcome, Support::Binary));
        Schema::new(cols).expect("fixed schema")
    }

    pub fn p_w(&self) -> f64 {
        match self {
            Dgp::Appendix(d) => d.p_w,
            Dgp::Discrete(d) => d.p_w,
        }
    }

    /// `P(A = 1 | W = w)`
    pub fn propensity(&self, w: f64) -> f64 {
        match self {
            Dgp::Appendix(d) => d.p_a,
            Dgp::Discrete(d) => d.propensity[w as usize],
        }
    }

    /// `P(A = 1)`
    pub fn treated_share(&self) -> f64 {
        let pw = self.p_w();
        (1.0 - pw) * self.propensity(0.0) + pw * self.propensity(1.0)
    }

    /// `E[Y | A, M, W]` at a schema-ordered row.
    pub fn outcome_mean(&self, row: &[f64]) -> f64 {
        match self {
            Dgp::Appendix(d) => d.outcome_mean(row[COL_A], row[COL_M], row[COL_W]),
            Dgp::Discrete(d) => d.outcome_mean[row[COL_A] as usize][row[COL_W] as usize],
        }
    }

    /// `n` i.i.d. rows, deterministic in `seed`.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::usage("n must be at least 1"));
        }
        let mut rng = rng::stream(seed, rng::STREAM_DATA);
        let p = self.schema().len();
        let mut values = Vec::with_capacity(n * p);
        for _ in 0..n {
            let w = bernoulli(&mut rng, self.p_w());
            let a = bernoulli(&mut rng, self.propensity(w));
            match self {
                Dgp::Appendix(d) => {
                    let z: f64 = rng.sample(StandardNormal);
                    let m = d.mediator_mean(a, w) + d.m_sd * z;
                    let y = bernoulli(&mut rng, d.outcome_mean(a, m, w));
                    values.extend_from_slice(&[w, a, m, y]);
                }
                Dgp::Discrete(d) => {
                    let y = bernoulli(&mut rng, d.outcome_mean[a as usize][w as usize]);
                    values.extend_from_slice(&[w, a, y]);
                }
            }
        }
        Dataset::from_rows(self.schema(), values, Some(seed))
    }
}

fn bernoulli(rng: &mut rng::Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

pub fn simulate_appendix(n: usize, seed: u64) -> Result<Dataset> {
    Dgp::Appendix(DgpAppendix::default()).simulate(n, seed)
}

pub fn simulate_discrete(dgp: &DgpDiscrete, n: usize, seed: u64) -> Result<Dataset> {
    Dgp::Discrete(dgp.clone()).simulate(n, seed)
}

// ---------------------------------------------------------------------------
// Truth oracle

/// Ground-truth evaluation of one (resolved) estimand arm under a DGP.
///
/// Regressions are evaluated recursively,
/// `Q_k(x) = E[m_{k+1}(X; Q_{k+1}) | X_given = x_given]`, with the
/// conditional law computed from the DGP factorisation `p(w) p(a|w) p(m|a,w)`.
/// When the conditioning set contains `M`, the mediator density enters the
/// Bayes weights exactly; otherwise `M` is integrated out by quadrature.
pub struct TruthOracle<'a> {
    dgp: &'a Dgp,
    spec: BoundSpec,
    gh: GaussHermite,
    cache: RefCell<HashMap<(usize, Vec<u64>), f64>>,
}

impl<'a> TruthOracle<'a> {
    pub fn new(spec: &EstimandSpec, dgp: &'a Dgp, nodes: usize) -> Result<Self> {
        dgp.validate()?;
        let spec = spec.bind(&dgp.schema())?;
        Ok(TruthOracle {
            dgp,
            spec,
            gh: GaussHermite::new(nodes),
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn theta(&self) -> f64 {
        let row = vec![0.0; self.dgp.schema().len()];
        self.conditional_mean(1, &[], &row)
    }

    /// True `Q_k` (1-based).
    pub fn regression(&self, k: usize) -> impl RowFunction + '_ {
        move |row: &[f64]| self.q(k, row)
    }

    fn q(&self, k: usize, x: &[f64]) -> f64 {
        let given = &self.spec.stage(k).given;
        let key = (k, given.iter().map(|&j| x[j].to_bits()).collect::<Vec<_>>());
        if let Some(&v) = self.cache.borrow().get(&key) {
            return v;
        }
        let v = self.conditional_mean(k + 1, given, x);
        self.cache.borrow_mut().insert(key, v);
        v
    }

    /// `m_k(x; Q_k)`, with `m_{K+1}(x) = E[Y | A, M, W]`.
    fn target(&self, k: usize, x: &[f64]) -> f64 {
        if k > self.spec.depth() {
            self.dgp.outcome_mean(x)
        } else {
            self.spec.stage(k).map.apply(&|r: &[f64]| self.q(k, r), x)
        }
    }

    /// `E[target_k(X) | X_given = x_given]`.
    fn conditional_mean(&self, k: usize, given: &[usize], x: &[f64]) -> f64 {
        let pw = self.dgp.p_w();
        let fixes = |col: usize, v: f64| !given.contains(&col) || x[col] == v;
        let mut row = vec![0.0; x.len()];
        let mut num = 0.0;
        let mut den = 0.0;
        for w in [0.0, 1.0] {
            if !fixes(COL_W, w) {
                continue;
            }
            let p1 = self.dgp.propensity(w);
            for a in [0.0, 1.0] {
                if !fixes(COL_A, a) {
                    continue;
                }
                let mut weight = if w == 1.0 { pw } else { 1.0 - pw };
                weight *= if a == 1.0 { p1 } else { 1.0 - p1 };
                row[COL_W] = w;
                row[COL_A] = a;
                match self.dgp {
                    Dgp::Appendix(d) => {
                        let mu = d.mediator_mean(a, w);
                        if given.contains(&COL_M) {
                            row[COL_M] = x[COL_M];
                            weight *= normal_pdf(x[COL_M], mu, d.m_sd);
                            num += weight * self.target(k, &row);
                        } else {
                            let mut inner = 0.0;
                            for (m, p) in self.gh.normal_atoms(mu, d.m_sd) {
                                row[COL_M] = m;
                                inner += p * self.target(k, &row);
                            }
                            num += weight * inner;
                        }
                    }
                    Dgp::Discrete(_) => num += weight * self.target(k, &row),
                }
                den += weight;
            }
        }
        num / den
    }
}

/// Ground truth for a (possibly contrasted) estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub spec: String,
    pub dgp: Dgp,
    /// Per-arm values at the base node count; one entry without a contrast.
    pub arms: Vec<f64>,
    /// `arms[0] - arms[1]` for contrasts, else `arms[0]`.
    pub theta: f64,
    pub nodes: usize,
    /// Same quantity with twice the nodes.
    pub theta_doubled: f64,
    pub doubling_gap: f64,
}

pub const ORACLE_NODES: usize = 64;

pub fn truth_oracle(spec: &EstimandSpec, dgp: &Dgp) -> Result<TruthReport> {
    let eval = |nodes: usize| -> Result<Vec<f64>> {
        spec.arms()
            .iter()
            .map(|arm| Ok(TruthOracle::new(arm, dgp, nodes)?.theta()))
            .collect()
    };
    let combine = |v: &[f64]| if v.len() == 2 { v[0] - v[1] } else { v[0] };
    let arms = eval(ORACLE_NODES)?;
    let doubled = eval(2 * ORACLE_NODES)?;
    let theta = combine(&arms);
    let theta_doubled = combine(&doubled);
    Ok(TruthReport {
        spec: spec.name.clone(),
        dgp: dgp.clone(),
        arms,
        theta,
        nodes: ORACLE_NODES,
        theta_doubled,
        doubling_gap: (theta - theta_doubled).abs(),
    })
}

// ---------------------------------------------------------------------------
// Closed-form representers

/// Exact Riesz representer of a built-in estimand under a known DGP.
///
/// Rows are read in the DGP's own column layout (`W, A, [M], Y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormRepresenter {
    pub estimand: String,
    /// 1-based stage; `None` is the contrast representer of the
    /// innermost NDE stage.
    pub stage: Option<usize>,
    pub a_prime: Option<f64>,
    pub dgp: Dgp,
}

impl ClosedFormRepresenter {
    /// Stage-`k` representer of `estimand`. `a_prime` is required for `nde`.
    pub fn stage(estimand: Builtin, dgp: &Dgp, k: usize, a_prime: Option<f64>) -> Result<Self> {
        let depth = estimand.spec().depth();
        if k == 0 || k > depth {
            return Err(Error::usage(format!("{} has stages 1..={depth}", estimand.name())));
        }
        if estimand == Builtin::Nde {
            if !dgp.has_mediator() {
                return Err(Error::schema("the nde estimand needs a DGP with a mediator column `M`"));
            }
            match a_prime {
                Some(v) if v == 0.0 || v == 1.0 => {}
                _ => return Err(Error::usage("nde representers need a' in {0, 1}")),
            }
        }
        Ok(ClosedFormRepresenter {
            estimand: estimand.name().into(),
            stage: Some(k),
            a_prime,
            dgp: dgp.clone(),
        })
    }

    fn builtin(&self) -> Builtin {
        self.estimand.parse().expect("constructed from a builtin")
    }

    fn eval_stage(&self, k: usize, a_prime: Option<f64>, row: &[f64]) -> f64 {
        let d = &self.dgp;
        let (w, a) = (row[COL_W], row[COL_A]);
        let ind = |v: f64| if a == v { 1.0 } else { 0.0 };
        let p1 = d.propensity(w);
        let pi = d.treated_share();
        match (self.builtin(), k) {
            (Builtin::MeanTreated, _) => ind(1.0) / pi,
            (Builtin::Ate, 1) | (Builtin::Nde, 1) => 1.0,
            (Builtin::Ate, _) => ind(1.0) / p1 - ind(0.0) / (1.0 - p1),
            (Builtin::AttControlMean, 1) => ind(1.0) / pi,
            (Builtin::AttControlMean, _) => ind(0.0) / pi * p1 / (1.0 - p1),
            (Builtin::Nde, 2) => ind(0.0) / (1.0 - p1),
            (Builtin::Nde, _) => {
                let ap = a_prime.expect("validated");
                let Dgp::Appendix(app) = d else { unreachable!("validated") };
                let pa = if ap == 1.0 { p1 } else { 1.0 - p1 };
                let m = row[COL_M];
                let ratio = normal_pdf(m, app.mediator_mean(0.0, w), app.m_sd)
                    / normal_pdf(m, app.mediator_mean(ap, w), app.m_sd);
                ind(ap) / pa * ratio
            }
        }
    }
}

impl RowFunction for ClosedFormRepresenter {
    fn eval(&self, row: &[f64]) -> f64 {
        match self.stage {
            Some(k) => self.eval_stage(k, self.a_prime, row),
            None => {
                let k = self.builtin().spec().depth();
                self.eval_stage(k, Some(1.0), row) - self.eval_stage(k, Some(0.0), row)
            }
        }
    }
}

/// The innermost-stage representer of a built-in (the IPW weight of the
/// estimand). For `nde` this is the contrast representer
/// `1(A=1)/f(A=1|W) · f(M|A=0,W)/f(M|A=1,W) − 1(A=0)/f(A=0|W)`.
pub fn closed_form_representer(estimand: Builtin, dgp: &Dgp) -> Result<ClosedFormRepresenter> {
    let depth = estimand.spec().depth();
    if estimand == Builtin::Nde {
        let mut r = ClosedFormRepresenter::stage(estimand, dgp, depth, Some(1.0))?;
        r.stage = None;
        r.a_prime = None;
        Ok(r)
    } else {
        ClosedFormRepresenter::stage(estimand, dgp, depth, None)
    }
}
