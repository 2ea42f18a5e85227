//! Monte Carlo benchmark harness.
//!
//! Replicate `r` simulates its data and seeds its estimator from
//! `derive_seed(seed, r)`, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eif::{one_step_estimate, EstimatorSettings};
use crate::error::{Error, Result};
use crate::riesz::RieszMethod;
use crate::rng;
use crate::sim::{truth_oracle, Dgp};
use crate::spec::EstimandSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub dgp: Dgp,
    pub spec: EstimandSpec,
    pub settings: EstimatorSettings,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Target value; computed by the truth oracle when absent.
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub seed: u64,
    pub theta_hat: f64,
    pub plug_in: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dgp: String,
    pub estimand: String,
    pub method: String,
    pub n: usize,
    pub replicates: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    pub plug_in_bias: f64,
    pub plug_in_mc_se: f64,
    pub runtime_s: f64,
    #[serde(skip)]
    pub draws: Vec<Replicate>,
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    v.sum::<f64>() / n
}

/// `sd / √R`; zero for a single replicate.
fn mc_se(v: &[f64]) -> f64 {
    let r = v.len();
    if r < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / r as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r - 1) as f64;
    (var / r as f64).sqrt()
}

pub fn method_name(settings: &EstimatorSettings) -> &'static str {
    match settings.riesz.method {
        RieszMethod::Sieve => "sieve",
        RieszMethod::Mlp(_) => "mlp",
    }
}

pub fn run_case(case: &BenchmarkCase) -> Result<BenchmarkRow> {
    if case.replicates == 0 {
        return Err(Error::usage("replicates must be at least 1"));
    }
    let truth = match case.truth {
        Some(t) => t,
        None => truth_oracle(&case.spec, &case.dgp)?.theta,
    };
    let start = Instant::now();
    let draws = (0..case.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = rng::derive_seed(case.seed, r as u64);
            let data = case.dgp.simulate(case.n, seed)?;
            let settings = EstimatorSettings {
                seed,
                ..case.settings.clone()
            };
            let rep = one_step_estimate(&case.spec, &data, &settings)?;
            Ok(Replicate {
                seed,
                theta_hat: rep.theta_hat,
                plug_in: rep.plug_in,
                std_error: rep.std_error,
                ci_lo: rep.ci.lo,
                ci_hi: rep.ci.hi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let runtime_s = start.elapsed().as_secs_f64();

    let est: Vec<f64> = draws.iter().map(|d| d.theta_hat).collect();
    let plug: Vec<f64> = draws.iter().map(|d| d.plug_in).collect();
    let mean_estimate = mean(est.iter().copied());
    let covered = draws.iter().filter(|d| d.ci_lo <= truth && truth <= d.ci_hi).count();
    Ok(BenchmarkRow {
        dgp: case.dgp.name().to_string(),
        estimand: case.spec.name.clone(),
        method: method_name(&case.settings).to_string(),
        n: case.n,
        replicates: case.replicates,
        truth,
        mean_estimate,
        bias: mean_estimate - truth,
        mc_se: mc_se(&est),
        coverage: covered as f64 / case.replicates as f64,
        mean_ci_width: mean(draws.iter().map(|d| d.ci_hi - d.ci_lo)),
        plug_in_bias: mean(plug.iter().copied()) - truth,
        plug_in_mc_se: mc_se(&plug),
        runtime_s,
        draws,
    })
}

pub fn run_grid(cases: &[BenchmarkCase]) -> Result<Vec<BenchmarkRow>> {
    cases.iter().map(run_case).collect()
}

const HEADER: [&str; 14] = [
    "dgp",
    "estimand",
    "method",
    "n",
    "replicates",
    "truth",
    "mean_estimate",
    "bias",
    "mc_se",
    "coverage",
    "mean_ci_width",
    "plug_in_bias",
    "plug_in_mc_se",
    "runtime_s",
];

/// CSV table of the rows. The runtime column can be left out for
/// byte-level comparisons.
pub fn to_csv(rows: &[BenchmarkRow], include_runtime: bool) -> String {
    let cols = if include_runtime { HEADER.len() } else { HEADER.len() - 1 };
    let mut s = HEADER[..cols].join(",");
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.dgp,
            r.estimand,
            r.method,
            r.n,
            r.replicates,
            r.truth,
            r.mean_estimate,
            r.bias,
            r.mc_se,
            r.coverage,
            r.mean_ci_width,
            r.plug_in_bias,
            r.plug_in_mc_se
        )
        .unwrap();
        if include_runtime {
            write!(s, ",{:.3}", r.runtime_s).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DgpDiscrete;
    use crate::spec::Builtin;

    fn case(replicates: usize) -> BenchmarkCase {
        BenchmarkCase {
            dgp: Dgp::Discrete(DgpDiscrete::default()),
            spec: Builtin::Ate.spec(),
            settings: EstimatorSettings::default(),
            n: 400,
            replicates,
            seed: 5,
            truth: None,
        }
    }

    #[test]
    fn single_replicate_has_binary_coverage() {
        let row = run_case(&case(1)).unwrap();
        assert!(row.coverage == 0.0 || row.coverage == 1.0);
        assert_eq!(row.mc_se, 0.0);
        assert!((row.truth - 0.3).abs() < 1e-12);
    }

    #[test]
    fn table_is_deterministic() {
        let a = to_csv(&[run_case(&case(6)).unwrap()], false);
        let b = to_csv(&[run_case(&case(6)).unwrap()], false);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 2);
        assert!(a.starts_with("dgp,estimand,method,n,"));
        assert!(!a.contains("runtime_s"));
    }

    #[test]
    fn zero_replicates_rejected() {
        assert!(run_case(&case(0)).is_err());
    }
}
