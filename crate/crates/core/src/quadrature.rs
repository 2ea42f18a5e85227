//! Gauss–Hermite quadrature for expectations under a normal law.

use std::f64::consts::PI;

/// Nodes and weights for `∫ g(x) exp(-x²) dx ≈ Σ w_i g(x_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence, seeded with the
    /// usual asymptotic root estimates.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        GaussHermite { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[g(X)]` for `X ~ N(mean, sd²)`.
    pub fn normal_expectation(&self, mean: f64, sd: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(mean + scale * x))
            .sum();
        total / PI.sqrt()
    }

    /// Normalised atoms `(x, p)` of the normal law, `Σ p = 1`.
    pub fn normal_atoms(&self, mean: f64, sd: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let scale = std::f64::consts::SQRT_2 * sd;
        let norm = PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mean + scale * x, w / norm))
    }
}
