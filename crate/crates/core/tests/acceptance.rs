//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Tests share a lock so runtime budgets are measured without contention.

use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use riesz::basis::{Basis, BasisConfig};
use riesz::bench::{run_case, BenchmarkCase};
use riesz::data::Dataset;
use riesz::eif::{assemble_eif, one_step_estimate, EstimatorSettings};
use riesz::mlp::MlpConfig;
use riesz::nuisance::{fit_nuisances, NuisanceSettings};
use riesz::riesz::{fit_representers, fit_sequential_nde, Ridge, RieszSettings};
use riesz::sim::{closed_form_representer, Dgp, DgpAppendix, DgpDiscrete};
use riesz::spec::{BoundSpec, Builtin, EstimandSpec, RowFunction};
use riesz::verify::{eif_formula_residuals, mlp_gradient_error};

static SERIAL: Mutex<()> = Mutex::new(());

/// θ(1) − θ(0) for the NDE under the default mediation design, frozen from
/// the quadrature oracle.
const NDE_TRUTH: f64 = 0.125441868515800763;

fn report(id: u32, name: &str, passed: bool, detail: String, elapsed: Duration) {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {id} {name}: {status} ({detail}; {:.2}s)\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn discrete() -> Dgp {
    Dgp::Discrete(DgpDiscrete::default())
}

fn appendix() -> Dgp {
    Dgp::Appendix(DgpAppendix::default())
}

fn exact(basis: BasisConfig) -> RieszSettings {
    RieszSettings {
        basis,
        ridge: Ridge::Fixed(0.0),
        ..Default::default()
    }
}

/// Every built-in arm bound to data of size `n` from its natural design.
fn builtin_arms(n: usize, seed: u64) -> Vec<(String, BoundSpec, Dataset)> {
    let d = discrete().simulate(n, seed).unwrap();
    let a = appendix().simulate(n, seed).unwrap();
    let mut out = Vec::new();
    for b in Builtin::ALL {
        let data = if b == Builtin::Nde { &a } else { &d };
        let spec = b.spec();
        let arms: Vec<(String, EstimandSpec)> = match &spec.contrast {
            Some(c) => c.values.iter().map(|&v| (format!("{}[{v}]", b.name()), spec.resolve(v))).collect(),
            None => vec![(b.name().to_string(), spec.clone())],
        };
        for (label, arm) in arms {
            out.push((label, arm.bind(&data.schema).unwrap(), data.clone()));
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_representation_identity() {
    let _g = lock();
    let start = Instant::now();
    let settings = exact(BasisConfig::with_degree(2));
    let mut worst: f64 = 0.0;
    let mut features = 0;
    for (_, spec, data) in builtin_arms(2000, 11) {
        let fits = fit_representers(&spec, &data, &settings).unwrap();
        let mut weights = vec![1.0; data.n_rows()];
        for (k, fit) in (1..).zip(&fits) {
            let stage = spec.stage(k);
            let basis = if stage.given.is_empty() {
                Basis::intercept_only()
            } else {
                Basis::build(&data.schema, &stage.given, &settings.basis)
            };
            for feat in &basis.features {
                let phi = |r: &[f64]| feat.eval(r);
                let lhs: Vec<f64> = data.rows().map(|r| fit.eval(r) * feat.eval(r)).collect();
                let rhs: Vec<f64> = data
                    .rows()
                    .zip(&weights)
                    .map(|(r, w)| w * stage.map.apply(&phi, r))
                    .collect();
                worst = worst.max((mean(&lhs) - mean(&rhs)).abs());
                features += 1;
            }
            weights = data.rows().map(|r| fit.eval(r)).collect();
        }
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-10 && elapsed < Duration::from_secs(1);
    report(
        1,
        "representation identity",
        passed,
        format!("max residual {worst:.2e} over {features} features, tol 1e-10"),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_2_closed_form_recovery() {
    let _g = lock();
    let start = Instant::now();
    let data = discrete().simulate(2000, 12).unwrap();
    let mut count = [[0.0; 2]; 2];
    for r in data.rows() {
        count[r[1] as usize][r[0] as usize] += 1.0;
    }
    let n = data.n_rows() as f64;
    let pi = (count[1][0] + count[1][1]) / n;
    let g = |w: usize| count[1][w] / (count[0][w] + count[1][w]);

    let settings = exact(BasisConfig::default());
    let fit = |b: Builtin| fit_representers(&b.spec().bind(&data.schema).unwrap(), &data, &settings).unwrap();
    let ate = fit(Builtin::Ate);
    let att = fit(Builtin::AttControlMean);
    let mt = fit(Builtin::MeanTreated);

    let mut worst: f64 = 0.0;
    for a in 0..2 {
        for w in 0..2 {
            let row = [w as f64, a as f64, 0.0];
            let ind = |v: usize| if a == v { 1.0 } else { 0.0 };
            let ipw = ind(1) / g(w) - ind(0) / (1.0 - g(w));
            let odds = ind(0) * g(w) / (pi * (1.0 - g(w)));
            worst = worst
                .max((ate[1].eval(&row) - ipw).abs())
                .max((att[0].eval(&row) - ind(1) / pi).abs())
                .max((att[1].eval(&row) - odds).abs())
                .max((mt[0].eval(&row) - ind(1) / pi).abs());
        }
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-8 && elapsed < Duration::from_secs(1);
    report(
        2,
        "closed-form recovery",
        passed,
        format!("max deviation {worst:.2e}, tol 1e-8"),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_3_eif_formula_equivalence() {
    let _g = lock();
    let start = Instant::now();
    let cases = eif_formula_residuals(1000, 13).unwrap();
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let passed = cases.len() == 3 && worst <= 1e-12 && elapsed < Duration::from_secs(1);
    let detail: Vec<String> = cases.iter().map(|(l, r)| format!("{l} {r:.2e}")).collect();
    report(
        3,
        "EIF formula equivalence",
        passed,
        format!("{}; tol 1e-12", detail.join(", ")),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_4_orthogonality() {
    let _g = lock();
    let start = Instant::now();
    let basis = BasisConfig::with_degree(2);
    let riesz = exact(basis);
    let nuisance = NuisanceSettings {
        basis,
        ridge: Ridge::Fixed(0.0),
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut seen = Vec::new();
    for (label, spec, data) in builtin_arms(2000, 14) {
        let alphas = fit_representers(&spec, &data, &riesz).unwrap();
        let qs = fit_nuisances(&spec, &data, &nuisance).unwrap();
        let a: Vec<&dyn RowFunction> = alphas.iter().map(|x| x as &dyn RowFunction).collect();
        let q: Vec<&dyn RowFunction> = qs.iter().map(|x| x as &dyn RowFunction).collect();
        let terms = assemble_eif(&spec, &a, &q, &data, 0.0).unwrap();
        for t in terms.iter().filter(|t| t.k > 1) {
            worst = worst.max(mean(&t.values).abs());
        }
        seen.push(label);
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-10 && elapsed < Duration::from_secs(1);
    report(
        4,
        "orthogonality",
        passed,
        format!("max |mean D_k| {worst:.2e} over {}, tol 1e-10", seen.join(" ")),
        elapsed,
    );
    assert!(passed);
}

/// ATE and control mean among the treated from empirical cell means.
fn enumerate(data: &Dataset) -> (f64, f64) {
    let mut n = [[0.0; 2]; 2];
    let mut s = [[0.0; 2]; 2];
    for r in data.rows() {
        let (w, a) = (r[0] as usize, r[1] as usize);
        n[a][w] += 1.0;
        s[a][w] += r[2];
    }
    let total = data.n_rows() as f64;
    let treated = n[1][0] + n[1][1];
    let q = |a: usize, w: usize| s[a][w] / n[a][w];
    let mut ate = 0.0;
    let mut att = 0.0;
    for w in 0..2 {
        ate += (q(1, w) - q(0, w)) * (n[0][w] + n[1][w]) / total;
        att += q(0, w) * n[1][w] / treated;
    }
    (ate, att)
}

#[test]
fn criterion_5_saturated_exactness() {
    let _g = lock();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in [15, 16, 17] {
        let data = discrete().simulate(2000, seed).unwrap();
        let settings = EstimatorSettings {
            riesz: exact(BasisConfig::default()),
            nuisance: NuisanceSettings {
                ridge: Ridge::Fixed(0.0),
                ..Default::default()
            },
            folds: 1,
            seed,
            ..Default::default()
        };
        let (ate, att) = enumerate(&data);
        let est_ate = one_step_estimate(&Builtin::Ate.spec(), &data, &settings).unwrap();
        let est_att = one_step_estimate(&Builtin::AttControlMean.spec(), &data, &settings).unwrap();
        worst = worst
            .max((est_ate.theta_hat - ate).abs())
            .max((est_att.theta_hat - att).abs())
            .max((est_ate.plug_in - ate).abs())
            .max((est_att.plug_in - att).abs());
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-10 && elapsed < Duration::from_secs(1);
    report(
        5,
        "saturated-design exactness",
        passed,
        format!("max deviation {worst:.2e}, tol 1e-10"),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_6_nde_end_to_end() {
    let _g = lock();
    let start = Instant::now();
    let row = run_case(&BenchmarkCase {
        dgp: appendix(),
        spec: Builtin::Nde.spec(),
        settings: EstimatorSettings::default(),
        n: 5000,
        replicates: 200,
        seed: 0,
        truth: Some(NDE_TRUTH),
    })
    .unwrap();
    let elapsed = start.elapsed();
    let unbiased = row.bias.abs() <= 2.0 * row.mc_se;
    let covers = (0.90..=0.98).contains(&row.coverage);
    let passed = unbiased && covers && elapsed < Duration::from_secs(300);
    report(
        6,
        "NDE end-to-end",
        passed,
        format!(
            "bias {:.5}, MC-SE {:.5}, coverage {:.3}, mean CI width {:.4}",
            row.bias, row.mc_se, row.coverage, row.mean_ci_width
        ),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_7_double_robustness() {
    let _g = lock();
    let start = Instant::now();
    let arm = |alpha: BasisConfig, q: BasisConfig| {
        let mut settings = EstimatorSettings::default();
        settings.riesz.basis = alpha;
        settings.nuisance.basis = q;
        run_case(&BenchmarkCase {
            dgp: discrete(),
            spec: Builtin::Ate.spec(),
            settings,
            n: 20000,
            replicates: 200,
            seed: 7,
            truth: None,
        })
        .unwrap()
    };
    let a = arm(BasisConfig::default(), BasisConfig::intercept_only());
    let b = arm(BasisConfig::intercept_only(), BasisConfig::default());
    let elapsed = start.elapsed();
    let a_ok = a.bias.abs() <= 4.0 * a.mc_se;
    let b_ok = b.bias.abs() <= 4.0 * b.mc_se;
    let control = a.plug_in_bias.abs() > 4.0 * a.plug_in_mc_se.max(a.mc_se);
    let passed = a_ok && b_ok && control && elapsed < Duration::from_secs(180);
    report(
        7,
        "double robustness",
        passed,
        format!(
            "arm a bias {:.5} (MC-SE {:.5}), arm b bias {:.5} (MC-SE {:.5}), arm a plug-in bias {:.4} (MC-SE {:.5})",
            a.bias, a.mc_se, b.bias, b.mc_se, a.plug_in_bias, a.plug_in_mc_se
        ),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_8_mlp_gradients() {
    let _g = lock();
    let start = Instant::now();
    let cfg = MlpConfig {
        seed: 8,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;

    let data = appendix().simulate(16, 18).unwrap();
    let nde = Builtin::Nde.spec().resolve(1.0).bind(&data.schema).unwrap();
    let stage = nde.stage(3);
    let weights: Vec<f64> = (0..16).map(|i| 0.5 + 0.1 * i as f64).collect();
    worst = worst.max(mlp_gradient_error(&stage.map, &data, &stage.given, &cfg, Some(&weights), 1e-6).unwrap());

    let data = discrete().simulate(16, 28).unwrap();
    let ate = Builtin::Ate.spec().bind(&data.schema).unwrap();
    let stage = ate.stage(2);
    worst = worst.max(mlp_gradient_error(&stage.map, &data, &stage.given, &cfg, None, 1e-6).unwrap());

    let elapsed = start.elapsed();
    let passed = worst < 1e-4 && elapsed < Duration::from_secs(1);
    report(
        8,
        "MLP gradient check",
        passed,
        format!("max relative error {worst:.2e}, tol 1e-4"),
        elapsed,
    );
    assert!(passed);
}

#[test]
fn criterion_9_sequential_convergence() {
    let _g = lock();
    let start = Instant::now();
    let dgp = appendix();
    let target = closed_form_representer(Builtin::Nde, &dgp).unwrap();
    let eval = dgp.simulate(20000, 999).unwrap();
    let truth: Vec<f64> = eval.rows().map(|r| target.eval(r)).collect();
    let settings = RieszSettings {
        basis: BasisConfig::with_degree(3),
        ..Default::default()
    };
    let sizes = [1000, 4000, 16000];
    let mut msd = Vec::new();
    for &n in &sizes {
        let mut total = 0.0;
        for seed in 0..20u64 {
            let data = dgp.simulate(n, 9000 + seed).unwrap();
            let (_, a1) = fit_sequential_nde(&data, 1.0, &settings).unwrap();
            let (_, a0) = fit_sequential_nde(&data, 0.0, &settings).unwrap();
            let sq: Vec<f64> = eval
                .rows()
                .zip(&truth)
                .map(|(r, t)| (a1.eval(r) - a0.eval(r) - t).powi(2))
                .collect();
            total += mean(&sq);
        }
        msd.push(total / 20.0);
    }
    let elapsed = start.elapsed();
    let decreasing = msd.windows(2).all(|w| w[1] < w[0]);
    let passed = decreasing && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = sizes.iter().zip(&msd).map(|(n, m)| format!("n={n}: {m:.5}")).collect();
    report(
        9,
        "sequential-fit convergence",
        passed,
        format!("mean squared discrepancy {}", detail.join(", ")),
        elapsed,
    );
    assert!(passed);
}
