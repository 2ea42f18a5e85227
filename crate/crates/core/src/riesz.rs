//! Riesz regression: direct estimation of Riesz representers.
//!
//! For a linear map `m` the representer `α` minimises the Riesz loss
//!
//! ```text
//! L(f) = mean_i [ f(x_i)² − 2 w_i · m(x_i; f) ]
//! ```
//!
//! where `m(x; f)` evaluates `f` at the rows produced by the map's
//! assignments and `w_i` are optional per-row weights (all ones by default).
//! Nested estimands are handled sequentially: the stage-`k` representer is
//! fitted with the stage-`(k−1)` representer as weights, which is how the
//! mediator representer is learned without ever estimating a density ratio.
//!
//! Two function classes are provided. Linear sieves are solved in closed
//! form from the normal equations `(G + λD) c = b`, with
//! `G = mean φφᵀ`, `b = mean w·m(φ)`, and `D` the identity with the
//! intercept left unpenalised. Small ReLU networks are trained with Adam on
//! the same loss.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Normal};
use crate::mlp::{Adam, Mlp, MlpConfig};
use crate::rng;
use crate::sim::ClosedFormRepresenter;
use crate::spec::{BoundMap, BoundSpec, Builtin, RowFunction};

/// Ridge penalty choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-6 · trace(G) / dim(G)`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub fn resolve(&self, gram: &nalgebra::DMatrix<f64>) -> Result<f64> {
        match *self {
            Ridge::Auto => Ok(linalg::auto_lambda(gram)),
            Ridge::Fixed(l) if l >= 0.0 && l.is_finite() => Ok(l),
            Ridge::Fixed(l) => Err(Error::usage(format!("ridge penalty must be >= 0, got {l}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveRepresenter {
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub condition: f64,
    /// `sqrt(bᵀc)`: the largest `|mean m(f)|` over unit-norm `f` in the span.
    pub map_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRepresenter {
    pub network: Mlp,
    /// Schema columns fed to the network, in order.
    pub inputs: Vec<usize>,
    pub config: MlpConfig,
    /// Training loss before each epoch, plus the final loss.
    pub curve: Vec<f64>,
    /// Epoch whose parameters were kept (lowest training loss).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ClosedFormRule {
    /// Representer of a map over an empty conditioning set.
    Constant { value: f64 },
    /// Exact representer under a known DGP.
    Dgp { representer: ClosedFormRepresenter },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RieszKind {
    Sieve(SieveRepresenter),
    Mlp(MlpRepresenter),
    ClosedForm(ClosedFormRule),
}

/// A fitted representer, evaluable on any schema-conformant row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszFit {
    #[serde(flatten)]
    pub kind: RieszKind,
    /// Empirical Riesz loss of the returned function on its training rows.
    pub fitted_loss: f64,
    pub n_train: usize,
    /// Optional symmetric bound on `|α|`.
    pub clip: Option<f64>,
    /// Training rows whose raw value exceeded `clip`.
    pub clipped: usize,
}

impl RieszFit {
    pub fn constant(value: f64) -> Self {
        RieszFit {
            kind: RieszKind::ClosedForm(ClosedFormRule::Constant { value }),
            fitted_loss: f64::NAN,
            n_train: 0,
            clip: None,
            clipped: 0,
        }
    }

    pub fn closed_form(representer: ClosedFormRepresenter) -> Self {
        RieszFit {
            kind: RieszKind::ClosedForm(ClosedFormRule::Dgp { representer }),
            fitted_loss: f64::NAN,
            n_train: 0,
            clip: None,
            clipped: 0,
        }
    }

    pub fn raw(&self, row: &[f64]) -> f64 {
        match &self.kind {
            RieszKind::Sieve(s) => s.basis.features.iter().zip(&s.coefficients).map(|(f, c)| c * f.eval(row)).sum(),
            RieszKind::Mlp(m) => {
                let x: Vec<f64> = m.inputs.iter().map(|&j| row[j]).collect();
                m.network.forward(&x)
            }
            RieszKind::ClosedForm(ClosedFormRule::Constant { value }) => *value,
            RieszKind::ClosedForm(ClosedFormRule::Dgp { representer }) => representer.eval(row),
        }
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("fits serialize") + "\n"
    }

    /// Same function with its output clamped to `[-bound, bound]`.
    pub fn with_clip(mut self, bound: f64, data: &Dataset) -> Self {
        self.clip = None;
        self.clipped = data.rows().filter(|r| self.raw(r).abs() > bound).count();
        self.clip = Some(bound);
        self
    }
}

impl RowFunction for RieszFit {
    fn eval(&self, row: &[f64]) -> f64 {
        let v = self.raw(row);
        match self.clip {
            Some(b) => v.clamp(-b, b),
            None => v,
        }
    }
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    match weights {
        Some(w) if w.len() != n => Err(Error::schema(format!("{} weights for {n} rows", w.len()))),
        Some(w) if w.iter().any(|x| !x.is_finite()) => Err(Error::numerical("non-finite Riesz weight")),
        _ => Ok(()),
    }
}

/// `mean_i [ f(x_i)² − 2 w_i m(x_i; f) ]`.
pub fn riesz_loss<F: RowFunction + ?Sized>(f: &F, map: &BoundMap, data: &Dataset, weights: Option<&[f64]>) -> Result<f64> {
    check_weights(weights, data.n_rows())?;
    let mut scratch = vec![0.0; data.n_cols()];
    let mut total = 0.0;
    for (i, row) in data.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let v = f.eval(row);
        total += v * v - 2.0 * w * map.apply_with(f, row, &mut scratch);
    }
    Ok(total / data.n_rows() as f64)
}

/// Exact minimiser of the (weighted, ridged) Riesz loss over the span of `basis`.
pub fn fit_sieve(map: &BoundMap, data: &Dataset, basis: &Basis, ridge: Ridge, weights: Option<&[f64]>) -> Result<RieszFit> {
    check_weights(weights, data.n_rows())?;
    let p = basis.dim();
    let mut acc = Normal::new(p);
    let mut phi = vec![0.0; p];
    let mut mapped = vec![0.0; p];
    let mut tmp = vec![0.0; p];
    let mut scratch = vec![0.0; data.n_cols()];
    for (i, row) in data.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        basis.eval_into(row, &mut phi);
        map.apply_vec(|r, out| basis.eval_into(r, out), row, &mut scratch, &mut tmp, &mut mapped);
        mapped.iter_mut().for_each(|m| *m *= w);
        acc.push(&phi, 1.0, &mapped);
    }
    let (gram, b) = acc.finish();
    let lambda = ridge.resolve(&gram)?;
    let intercept = basis.features.iter().position(|f| f.is_intercept());
    let system = &gram + linalg::ridge_matrix(p, lambda, intercept);
    let (coef, condition) = linalg::solve_spd(&system, &b)?;
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::numerical("non-finite sieve coefficients"));
    }
    let fitted_loss = (coef.transpose() * &gram * &coef)[(0, 0)] - 2.0 * coef.dot(&b);
    let map_bound = coef.dot(&b).max(0.0).sqrt();
    Ok(RieszFit {
        kind: RieszKind::Sieve(SieveRepresenter {
            basis: basis.clone(),
            coefficients: coef.iter().copied().collect(),
            lambda,
            condition,
            map_bound,
        }),
        fitted_loss,
        n_train: data.n_rows(),
        clip: None,
        clipped: 0,
    })
}

/// Loss and its gradient with respect to the network parameters.
pub fn mlp_loss_and_grad(
    net: &Mlp,
    inputs: &[usize],
    map: &BoundMap,
    data: &Dataset,
    rows: &[usize],
    weights: Option<&[f64]>,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = rows.len() as f64;
    let mut scratch = vec![0.0; data.n_cols()];
    let mut x = vec![0.0; inputs.len()];
    let mut loss = 0.0;
    for &i in rows {
        let row = data.row(i);
        let w = weights.map_or(1.0, |w| w[i]);
        for (xi, &j) in x.iter_mut().zip(inputs) {
            *xi = row[j];
        }
        let (out, tape) = net.forward_tape(&x);
        loss += out * out;
        net.backward(&tape, 2.0 * out / n, grad);
        for t in &map.terms {
            scratch.copy_from_slice(row);
            for &(j, v) in &t.assignments {
                scratch[j] = v;
            }
            for (xi, &j) in x.iter_mut().zip(inputs) {
                *xi = scratch[j];
            }
            let (mo, tape) = net.forward_tape(&x);
            loss -= 2.0 * w * t.coef * mo;
            net.backward(&tape, -2.0 * w * t.coef / n, grad);
        }
    }
    loss / n
}

/// Trains a ReLU network on the Riesz loss. The parameters with the lowest
/// full-data training loss seen during training are returned.
pub fn fit_mlp(
    map: &BoundMap,
    data: &Dataset,
    inputs: &[usize],
    config: &MlpConfig,
    weights: Option<&[f64]>,
) -> Result<RieszFit> {
    config.validate()?;
    check_weights(weights, data.n_rows())?;
    let mut net = Mlp::new(inputs.len(), config);
    let mut grad = vec![0.0; net.n_params()];
    let mut adam = Adam::new(net.n_params());
    let all: Vec<usize> = (0..data.n_rows()).collect();
    let mut order = all.clone();
    let mut shuffle_rng = rng::stream(config.seed, rng::STREAM_FOLDS);
    let mut curve = Vec::with_capacity(config.epochs + 1);
    let mut best = (f64::INFINITY, net.params.clone(), 0);

    for epoch in 0..=config.epochs {
        let loss = mlp_loss_and_grad(&net, inputs, map, data, &all, weights, &mut grad);
        if !loss.is_finite() {
            return Err(Error::numerical(format!("MLP training diverged at epoch {epoch} (loss {loss})")));
        }
        curve.push(loss);
        if loss < best.0 {
            best = (loss, net.params.clone(), epoch);
        }
        if epoch == config.epochs {
            break;
        }
        match config.batch_size {
            None => adam.step(&mut net.params, &grad, config),
            Some(bs) => {
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(bs) {
                    mlp_loss_and_grad(&net, inputs, map, data, chunk, weights, &mut grad);
                    adam.step(&mut net.params, &grad, config);
                }
            }
        }
    }
    let (fitted_loss, params, best_epoch) = best;
    net.params = params;
    Ok(RieszFit {
        kind: RieszKind::Mlp(MlpRepresenter {
            network: net,
            inputs: inputs.to_vec(),
            config: config.clone(),
            curve,
            best_epoch,
        }),
        fitted_loss,
        n_train: data.n_rows(),
        clip: None,
        clipped: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RieszMethod {
    Sieve,
    Mlp(MlpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszSettings {
    pub method: RieszMethod,
    pub basis: BasisConfig,
    pub ridge: Ridge,
    pub clip: Option<f64>,
}

impl Default for RieszSettings {
    fn default() -> Self {
        RieszSettings {
            method: RieszMethod::Sieve,
            basis: BasisConfig::default(),
            ridge: Ridge::Auto,
            clip: None,
        }
    }
}

/// Fits the representer of one stage given the previous stage's weights.
pub fn fit_stage_representer(
    spec: &BoundSpec,
    k: usize,
    data: &Dataset,
    weights: Option<&[f64]>,
    settings: &RieszSettings,
) -> Result<RieszFit> {
    let stage = spec.stage(k);
    let fit = if stage.given.is_empty() {
        // f is a constant c: loss c² − 2c·mean(w)·Σcoef.
        let mean_w = weights.map_or(1.0, |w| w.iter().sum::<f64>() / w.len() as f64);
        let value = mean_w * stage.map.total_coef();
        let mut fit = RieszFit::constant(value);
        fit.fitted_loss = -value * value;
        fit.n_train = data.n_rows();
        fit
    } else {
        match &settings.method {
            RieszMethod::Sieve => {
                let basis = Basis::build(&data.schema, &stage.given, &settings.basis);
                fit_sieve(&stage.map, data, &basis, settings.ridge, weights)?
            }
            RieszMethod::Mlp(cfg) => fit_mlp(&stage.map, data, &stage.given, cfg, weights)?,
        }
    };
    Ok(match settings.clip {
        Some(b) => fit.with_clip(b, data),
        None => fit,
    })
}

/// Fits `α_1, ..., α_K` in order; `α_k` is trained with weights `α̂_{k−1}(x_i)`.
pub fn fit_representers(spec: &BoundSpec, data: &Dataset, settings: &RieszSettings) -> Result<Vec<RieszFit>> {
    let mut fits: Vec<RieszFit> = Vec::with_capacity(spec.depth());
    let mut weights: Option<Vec<f64>> = None;
    for k in 1..=spec.depth() {
        let fit = fit_stage_representer(spec, k, data, weights.as_deref(), settings)?;
        let w: Vec<f64> = data.rows().map(|r| fit.eval(r)).collect();
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite representer value at stage {k}, row {i}")));
        }
        weights = Some(w);
        fits.push(fit);
    }
    Ok(fits)
}

/// Sequential Riesz regression for the direct-effect arm `a'`: returns
/// `(α̂_2, α̂_3)`, where `α̂_2` targets `f(0, w)` and `α̂_3` targets
/// `f(a', m, w)` weighted by `α̂_2`.
pub fn fit_sequential_nde(data: &Dataset, a_prime: f64, settings: &RieszSettings) -> Result<(RieszFit, RieszFit)> {
    let spec = Builtin::Nde.spec().resolve(a_prime).bind(&data.schema)?;
    let mut fits = fit_representers(&spec, data, settings)?;
    let alpha3 = fits.pop().expect("three stages");
    let alpha2 = fits.pop().expect("three stages");
    Ok((alpha2, alpha3))
}

/// Residuals `mean[α̂·φ_j] − mean[w·m(φ_j)]` of the empirical representation
/// identity, one per basis feature.
pub fn representation_residuals<F: RowFunction + ?Sized>(
    alpha: &F,
    map: &BoundMap,
    data: &Dataset,
    basis: &Basis,
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let p = basis.dim();
    let mut lhs = DVector::zeros(p);
    let mut rhs = DVector::zeros(p);
    let mut phi = vec![0.0; p];
    let mut mapped = vec![0.0; p];
    let mut tmp = vec![0.0; p];
    let mut scratch = vec![0.0; data.n_cols()];
    for (i, row) in data.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let a = alpha.eval(row);
        basis.eval_into(row, &mut phi);
        map.apply_vec(|r, out| basis.eval_into(r, out), row, &mut scratch, &mut tmp, &mut mapped);
        for j in 0..p {
            lhs[j] += a * phi[j];
            rhs[j] += w * mapped[j];
        }
    }
    let n = data.n_rows() as f64;
    ((lhs - rhs) / n).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Role, Schema, Support};
    use crate::sim::{Dgp, DgpDiscrete};
    use crate::spec::FunctionalMap;

    fn discrete(n: usize, seed: u64) -> Dataset {
        Dgp::Discrete(DgpDiscrete::default()).simulate(n, seed).unwrap()
    }

    #[test]
    fn loss_of_constant_under_difference_map() {
        let d = discrete(200, 1);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let loss = riesz_loss(&|_: &[f64]| 1.5, &map, &d, None).unwrap();
        assert!((loss - 2.25).abs() < 1e-15);
    }

    #[test]
    fn intercept_only_basis_gives_zero_for_difference_map() {
        let d = discrete(300, 2);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let fit = fit_sieve(&map, &d, &Basis::intercept_only(), Ridge::Fixed(0.0), None).unwrap();
        assert!(d.rows().all(|r| fit.eval(r).abs() < 1e-15));
    }

    #[test]
    fn fitted_loss_is_recomputable() {
        let d = discrete(500, 3);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let basis = Basis::build(&d.schema, &[0, 1], &BasisConfig::default());
        for ridge in [Ridge::Fixed(0.0), Ridge::Auto, Ridge::Fixed(0.5)] {
            let fit = fit_sieve(&map, &d, &basis, ridge, None).unwrap();
            let direct = riesz_loss(&fit, &map, &d, None).unwrap();
            assert!((fit.fitted_loss - direct).abs() < 1e-12, "{ridge:?}");
        }
    }

    #[test]
    fn zero_weights_give_zero_representer() {
        let d = discrete(100, 4);
        let map = FunctionalMap::point("A", 1.0).bind(&d.schema).unwrap();
        let basis = Basis::build(&d.schema, &[0, 1], &BasisConfig::default());
        let w = vec![0.0; 100];
        let fit = fit_sieve(&map, &d, &basis, Ridge::Fixed(1e-3), Some(&w)).unwrap();
        assert!(d.rows().all(|r| fit.eval(r) == 0.0));
    }

    #[test]
    fn weight_length_mismatch_is_an_error() {
        let d = discrete(10, 5);
        let map = FunctionalMap::point("A", 1.0).bind(&d.schema).unwrap();
        assert!(riesz_loss(&|_: &[f64]| 0.0, &map, &d, Some(&[1.0; 3])).is_err());
    }

    #[test]
    fn singular_gram_is_refused() {
        // A constant at 1 duplicates the intercept.
        let schema = Schema::new(vec![
            Column::new("W", Role::Covariate, Support::Binary),
            Column::new("A", Role::Treatment, Support::Binary),
            Column::new("Y", Role::Outcome, Support::Binary),
        ])
        .unwrap();
        let d = Dataset::from_rows(schema, [1.0, 1.0, 0.0, 1.0, 0.0, 1.0].repeat(5), None).unwrap();
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let basis = Basis::build(&d.schema, &[0, 1], &BasisConfig::default());
        let err = fit_sieve(&map, &d, &basis, Ridge::Fixed(0.0), None).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(fit_sieve(&map, &d, &basis, Ridge::Fixed(1e-2), None).is_ok());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let d = discrete(50, 6);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let cfg = MlpConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let fit = fit_mlp(&map, &d, &[0, 1], &cfg, None).unwrap();
        let RieszKind::Mlp(m) = &fit.kind else { panic!() };
        assert_eq!(m.network, Mlp::new(2, &cfg));
        assert_eq!(m.curve.len(), 1);
        assert_eq!(fit.fitted_loss, m.curve[0]);
    }

    #[test]
    fn mlp_training_never_ends_worse() {
        let d = discrete(400, 7);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let cfg = MlpConfig {
            epochs: 100,
            batch_size: Some(64),
            ..Default::default()
        };
        let fit = fit_mlp(&map, &d, &[0, 1], &cfg, None).unwrap();
        let RieszKind::Mlp(m) = &fit.kind else { panic!() };
        assert!(fit.fitted_loss <= m.curve[0]);
        let direct = riesz_loss(&fit, &map, &d, None).unwrap();
        assert!((direct - fit.fitted_loss).abs() < 1e-12);
        // deterministic
        assert_eq!(fit_mlp(&map, &d, &[0, 1], &cfg, None).unwrap(), fit);
    }

    #[test]
    fn clipping_counts_rows() {
        let d = discrete(400, 8);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let basis = Basis::build(&d.schema, &[0, 1], &BasisConfig::default());
        let fit = fit_sieve(&map, &d, &basis, Ridge::Fixed(0.0), None).unwrap();
        let max = d.rows().map(|r| fit.eval(r).abs()).fold(0.0, f64::max);
        let clipped = fit.clone().with_clip(1.0, &d);
        assert!(clipped.clipped > 0);
        assert!(d.rows().all(|r| clipped.eval(r).abs() <= 1.0));
        assert_eq!(fit.with_clip(max + 1.0, &d).clipped, 0);
    }

    #[test]
    fn fit_serializes() {
        let d = discrete(100, 9);
        let map = FunctionalMap::difference("A").bind(&d.schema).unwrap();
        let basis = Basis::build(&d.schema, &[0, 1], &BasisConfig::default());
        let fit = fit_sieve(&map, &d, &basis, Ridge::Auto, None).unwrap();
        let text = fit.to_document();
        assert!(text.contains("\"kind\": \"sieve\""));
        let back: RieszFit = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fit);
    }
}
