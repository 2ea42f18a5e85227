use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::sample::subsequence;

use riesz::basis::{Basis, BasisConfig};
use riesz::data::Dataset;
use riesz::eif::{assign_folds, one_step_estimate, EstimatorSettings};
use riesz::nuisance::{FamilyChoice, NuisanceSettings};
use riesz::riesz::{fit_sieve, riesz_loss, representation_residuals, RieszKind, Ridge};
use riesz::sim::{Dgp, DgpAppendix, DgpDiscrete};
use riesz::spec::{
    AssignValue, BoundMap, Builtin, Contrast, EstimandSpec, FunctionalMap, RegressTarget, Stage, Term, VariableRef,
};

const VARS: [&str; 3] = ["W", "A", "M"];

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), -5.0..5.0f64]
}

fn coef() -> impl Strategy<Value = f64> {
    (0.1..5.0f64, any::<bool>()).prop_map(|(c, neg)| if neg { -c } else { c })
}

fn terms(given: Vec<String>, param: Option<String>) -> impl Strategy<Value = Vec<Term>> {
    let most = given.len().min(2);
    let term = (coef(), subsequence(given, 0..=most), proptest::collection::vec(value(), 2), any::<bool>()).prop_map(
        move |(coef, vars, vals, use_param)| {
            let mut assignments = BTreeMap::new();
            for (v, x) in vars.into_iter().zip(vals) {
                let value = match (&param, use_param) {
                    (Some(p), true) => AssignValue::Param(p.clone()),
                    _ => AssignValue::Const(x),
                };
                assignments.insert(VariableRef::new(v), value);
            }
            Term { coef, assignments }
        },
    );
    proptest::collection::vec(term, 1..=3)
}

/// Random well-formed estimands over `W, A, M`.
fn spec_strategy() -> impl Strategy<Value = EstimandSpec> {
    let innermost = subsequence(VARS.to_vec(), 1..=3).prop_shuffle();
    (1usize..=3, innermost, any::<bool>(), "[a-z][a-z_]{0,6}").prop_flat_map(|(depth, inner, contrast, name)| {
        let inner: Vec<String> = inner.into_iter().map(String::from).collect();
        let param = (contrast && depth > 1).then(|| "a_prime".to_string());
        // Stage 1 conditions on nothing; deeper stages on subsets of the innermost set.
        let givens: Vec<BoxedStrategy<Vec<String>>> = (1..=depth)
            .map(|k| {
                if k == 1 {
                    Just(Vec::new()).boxed()
                } else if k == depth {
                    Just(inner.clone()).boxed()
                } else {
                    subsequence(inner.clone(), 1..=inner.len()).boxed()
                }
            })
            .collect();
        let param2 = param.clone();
        givens.prop_flat_map(move |givens| {
            let maps: Vec<_> = givens.iter().map(|g| terms(g.clone(), param2.clone())).collect();
            let givens = givens.clone();
            let param = param2.clone();
            let name = name.clone();
            maps.prop_map(move |maps| {
                let depth = givens.len();
                let mut stages: Vec<Stage> = givens
                    .iter()
                    .zip(maps)
                    .enumerate()
                    .map(|(i, (g, terms))| Stage {
                        target: if i + 1 == depth {
                            RegressTarget::Outcome
                        } else {
                            RegressTarget::PreviousMap
                        },
                        conditioning: g.iter().map(VariableRef::new).collect(),
                        subgroup: None,
                        map: FunctionalMap { terms },
                    })
                    .collect();
                let mut contrast = None;
                if let Some(p) = &param {
                    let last = stages.last_mut().unwrap();
                    let var = last.conditioning[0].clone();
                    last.map.terms[0].assignments.insert(var, AssignValue::Param(p.clone()));
                    contrast = Some(Contrast {
                        param: p.clone(),
                        values: [1.0, 0.0],
                    });
                }
                EstimandSpec {
                    name: name.clone(),
                    stages,
                    contrast,
                }
            })
        })
    })
}

fn appendix_data(n: usize, seed: u64) -> Dataset {
    Dgp::Appendix(DgpAppendix::default()).simulate(n, seed).unwrap()
}

fn discrete_data(n: usize, seed: u64) -> Dataset {
    Dgp::Discrete(DgpDiscrete::default()).simulate(n, seed).unwrap()
}

/// A bound map of some built-in stage on the mediation schema.
fn builtin_map(which: usize, data: &Dataset) -> (BoundMap, Vec<usize>) {
    let (b, k, arm) = [
        (Builtin::MeanTreated, 1, None),
        (Builtin::Ate, 2, None),
        (Builtin::AttControlMean, 2, None),
        (Builtin::Nde, 2, Some(1.0)),
        (Builtin::Nde, 3, Some(1.0)),
        (Builtin::Nde, 3, Some(0.0)),
    ][which % 6];
    let spec = match arm {
        Some(v) => b.spec().resolve(v),
        None => b.spec(),
    };
    let bound = spec.bind(&data.schema).unwrap();
    let stage = bound.stage(k);
    (stage.map.clone(), stage.given.clone())
}

fn sieve_function<'a>(basis: &'a Basis, c: &'a [f64]) -> impl Fn(&[f64]) -> f64 + 'a {
    move |r: &[f64]| basis.eval(r).iter().zip(c).map(|(p, c)| p * c).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spec_documents_round_trip(spec in spec_strategy()) {
        spec.validate().unwrap();
        let text = spec.to_document();
        let parsed = EstimandSpec::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(parsed.to_document(), text);
    }

    #[test]
    fn maps_are_linear(
        which in 0usize..6,
        seed in any::<u64>(),
        a in proptest::collection::vec(-3.0..3.0f64, 4),
        b in proptest::collection::vec(-3.0..3.0f64, 4),
        c1 in -10.0..10.0f64,
        c2 in -10.0..10.0f64,
    ) {
        let data = appendix_data(20, seed);
        let (map, _) = builtin_map(which, &data);
        let f1 = |r: &[f64]| a[0] + a[1] * r[0] + a[2] * (r[1] * r[2]).sin() + a[3] * r[2] * r[2];
        let f2 = |r: &[f64]| (b[0] * r[2]).exp().min(1e3) + b[1] * r[1] + b[2] * r[0] * r[2] + b[3];
        let combo = |r: &[f64]| c1 * f1(r) + c2 * f2(r);
        for row in data.rows() {
            let lhs = map.apply(&combo, row);
            let (m1, m2) = (map.apply(&f1, row), map.apply(&f2, row));
            let rhs = c1 * m1 + c2 * m2;
            let scale = 1.0 + (c1 * m1).abs() + (c2 * m2).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale, "{} vs {}", lhs, rhs);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sieve_fit_minimises_the_ridged_loss(
        which in 0usize..6,
        seed in any::<u64>(),
        degree in 1u32..=2,
        weighted in any::<bool>(),
    ) {
        let data = appendix_data(400, seed);
        let (map, given) = builtin_map(which, &data);
        let basis = Basis::build(&data.schema, &given, &BasisConfig::with_degree(degree));
        let weights: Option<Vec<f64>> =
            weighted.then(|| data.rows().map(|r| 0.5 + r[0] + 0.2 * r[2].abs()).collect());
        let fit = fit_sieve(&map, &data, &basis, Ridge::Auto, weights.as_deref()).unwrap();
        let RieszKind::Sieve(sieve) = &fit.kind else { panic!("sieve fit") };
        let lambda = sieve.lambda;
        let objective = |c: &[f64]| {
            let f = sieve_function(&basis, c);
            let penalty: f64 = basis
                .features
                .iter()
                .zip(c)
                .filter(|(feat, _)| !feat.is_intercept())
                .map(|(_, c)| c * c)
                .sum();
            riesz_loss(&f, &map, &data, weights.as_deref()).unwrap() + lambda * penalty
        };
        let c0 = sieve.coefficients.clone();
        let best = objective(&c0);
        let mut rng = riesz::rng::stream(seed, 9);
        use rand::Rng as _;
        for _ in 0..100 {
            let mut d: Vec<f64> = (0..c0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.iter_mut().for_each(|x| *x /= norm);
            let moved: Vec<f64> = c0.iter().zip(&d).map(|(c, d)| c + 1e-3 * d).collect();
            prop_assert!(objective(&moved) >= best - 1e-12 * (1.0 + best.abs()));
        }
    }

    #[test]
    fn representation_identity_holds_for_any_weights(
        which in 0usize..6,
        seed in any::<u64>(),
        degree in 1u32..=3,
        w in proptest::collection::vec(0.1..3.0f64, 3),
    ) {
        let data = appendix_data(300, seed);
        let (map, given) = builtin_map(which, &data);
        let basis = Basis::build(&data.schema, &given, &BasisConfig::with_degree(degree));
        let weights: Vec<f64> = data.rows().map(|r| w[0] + w[1] * r[0] + w[2] * r[1]).collect();
        let fit = fit_sieve(&map, &data, &basis, Ridge::Fixed(0.0), Some(&weights)).unwrap();
        let res = representation_residuals(&fit, &map, &data, &basis, Some(&weights));
        let worst = res.iter().map(|r| r.abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-10, "residual {}", worst);
    }

    #[test]
    fn fitted_loss_is_monotone_in_ridge(
        which in 0usize..6,
        seed in any::<u64>(),
        mut lambdas in proptest::collection::vec(0.0..1.0f64, 2..6),
    ) {
        let data = appendix_data(300, seed);
        let (map, given) = builtin_map(which, &data);
        let basis = Basis::build(&data.schema, &given, &BasisConfig::with_degree(2));
        lambdas.sort_by(f64::total_cmp);
        let losses: Vec<f64> = lambdas
            .iter()
            .map(|&l| fit_sieve(&map, &data, &basis, Ridge::Fixed(l), None).unwrap().fitted_loss)
            .collect();
        for pair in losses.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-10 * (1.0 + pair[0].abs()), "{:?}", losses);
        }
    }

    #[test]
    fn folds_are_balanced_and_seeded(n in 1usize..500, v in 1usize..8, seed in any::<u64>()) {
        let f = assign_folds(n, v, seed);
        prop_assert_eq!(&f, &assign_folds(n, v, seed));
        let sizes: Vec<usize> = (0..v).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

fn least_squares() -> EstimatorSettings {
    EstimatorSettings {
        nuisance: NuisanceSettings {
            family: FamilyChoice::LeastSquares,
            ..Default::default()
        },
        folds: 2,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimates_scale_with_the_outcome(
        which in 0usize..3,
        seed in any::<u64>(),
        c in prop_oneof![0.1..10.0f64, -10.0..-0.1f64],
    ) {
        let spec = [Builtin::MeanTreated, Builtin::Ate, Builtin::AttControlMean][which].spec();
        let data = discrete_data(600, seed);
        let scaled = data.map_column(2, |y| c * y);
        let settings = EstimatorSettings { seed, ..least_squares() };
        let base = one_step_estimate(&spec, &data, &settings).unwrap();
        let other = one_step_estimate(&spec, &scaled, &settings).unwrap();
        let tol = 1e-9 * (1.0 + (c * base.theta_hat).abs());
        prop_assert!((other.theta_hat - c * base.theta_hat).abs() <= tol);
        prop_assert!((other.plug_in - c * base.plug_in).abs() <= tol);
        prop_assert!((other.std_error - c.abs() * base.std_error).abs() <= 1e-9 * (1.0 + base.std_error));
    }

    #[test]
    fn estimates_ignore_thread_count(which in 0usize..4, seed in any::<u64>(), folds in 2usize..=5) {
        let b = Builtin::ALL[which];
        let data = if b == Builtin::Nde { appendix_data(600, seed) } else { discrete_data(600, seed) };
        let settings = EstimatorSettings { folds, seed, ..Default::default() };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| one_step_estimate(&b.spec(), &data, &settings).unwrap())
        };
        prop_assert_eq!(run(1).to_document(), run(3).to_document());
    }

    #[test]
    fn influence_values_centre_at_the_estimate(which in 0usize..3, seed in any::<u64>()) {
        let spec = [Builtin::MeanTreated, Builtin::Ate, Builtin::AttControlMean][which].spec();
        let data = discrete_data(800, seed);
        let rep = one_step_estimate(&spec, &data, &EstimatorSettings { seed, ..Default::default() }).unwrap();
        let n = rep.eif_values.len() as f64;
        let mean = rep.eif_values.iter().sum::<f64>() / n;
        prop_assert!((mean - (rep.theta_hat - rep.plug_in)).abs() <= 1e-10);
        let at = rep.eif_at(rep.theta_hat).unwrap();
        prop_assert!((at.iter().sum::<f64>() / n).abs() <= 1e-10);
    }
}
