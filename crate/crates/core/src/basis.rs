//! Sieve dictionaries over a stage's conditioning columns.
//!
//! The default dictionary is: intercept, main effects of every non-treatment
//! column (level indicators for categorical columns, powers up to `degree`
//! for real columns), pairwise products of those main effects across
//! columns, and then every one of these crossed with the treatment. Over two
//! binary columns `(A, W)` this is the saturated basis `{1, W, A, A·W}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Role, Schema, Support};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    Raw(usize),
    Power(usize, u32),
    /// Indicator `x_j == level`.
    Level(usize, f64),
}

impl Factor {
    fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            Factor::Raw(j) => row[j],
            Factor::Power(j, p) => row[j].powi(p as i32),
            Factor::Level(j, l) => {
                if row[j] == l {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn column(&self) -> usize {
        match *self {
            Factor::Raw(j) | Factor::Power(j, _) | Factor::Level(j, _) => j,
        }
    }
}

/// Product of factors; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub factors: Vec<Factor>,
}

impl Feature {
    fn intercept() -> Self {
        Feature {
            name: "1".into(),
            factors: Vec::new(),
        }
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.eval(row)).product()
    }

    fn times(&self, other: &Feature) -> Feature {
        let name = match (self.is_intercept(), other.is_intercept()) {
            (true, _) => other.name.clone(),
            (_, true) => self.name.clone(),
            _ => format!("{}*{}", other.name, self.name),
        };
        let mut factors = other.factors.clone();
        factors.extend(self.factors.iter().cloned());
        Feature { name, factors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[default]
    Default,
    InterceptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub kind: BasisKind,
    /// Highest power of real-valued columns.
    pub degree: u32,
    pub interactions: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            kind: BasisKind::Default,
            degree: 1,
            interactions: true,
        }
    }
}

impl BasisConfig {
    pub fn with_degree(degree: u32) -> Self {
        BasisConfig {
            degree,
            ..Default::default()
        }
    }

    pub fn intercept_only() -> Self {
        BasisConfig {
            kind: BasisKind::InterceptOnly,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub features: Vec<Feature>,
}

impl Basis {
    pub fn intercept_only() -> Self {
        Basis {
            features: vec![Feature::intercept()],
        }
    }

    /// Dictionary over the `given` columns of `schema`.
    pub fn build(schema: &Schema, given: &[usize], config: &BasisConfig) -> Self {
        if config.kind == BasisKind::InterceptOnly || given.is_empty() {
            return Basis::intercept_only();
        }
        let treatment = given
            .iter()
            .copied()
            .find(|&j| schema.column(j).role == Role::Treatment);
        let mut others: Vec<usize> = given.iter().copied().filter(|&j| Some(j) != treatment).collect();
        others.sort_unstable();

        let name = |j: usize| schema.column(j).name.clone();
        let first_order = |j: usize| -> Vec<Feature> {
            match &schema.column(j).support {
                Support::Binary => vec![Feature {
                    name: name(j),
                    factors: vec![Factor::Raw(j)],
                }],
                Support::Categorical { levels } => levels
                    .iter()
                    .skip(1)
                    .map(|&l| Feature {
                        name: format!("{}=={l}", name(j)),
                        factors: vec![Factor::Level(j, l)],
                    })
                    .collect(),
                Support::Real => vec![Feature {
                    name: name(j),
                    factors: vec![Factor::Raw(j)],
                }],
            }
        };

        let mut base = vec![Feature::intercept()];
        for &j in &others {
            base.extend(first_order(j));
            if schema.column(j).support == Support::Real {
                for p in 2..=config.degree.max(1) {
                    base.push(Feature {
                        name: format!("{}^{p}", name(j)),
                        factors: vec![Factor::Power(j, p)],
                    });
                }
            }
        }
        if config.interactions {
            for (i, &a) in others.iter().enumerate() {
                for &b in &others[i + 1..] {
                    for fa in first_order(a) {
                        for fb in first_order(b) {
                            base.push(fb.times(&fa));
                        }
                    }
                }
            }
        }

        let features = match treatment {
            None => base,
            Some(t) => {
                let arms = first_order(t);
                let mut all = base.clone();
                for arm in &arms {
                    all.extend(base.iter().map(|f| f.times(arm)));
                }
                all
            }
        };
        Basis { features }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn eval_into(&self, row: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.features) {
            *o = f.eval(row);
        }
    }

    pub fn eval(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(row, &mut out);
        out
    }

    /// Columns the dictionary reads.
    pub fn columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self
            .features
            .iter()
            .flat_map(|f| f.factors.iter().map(Factor::column))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.features.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            write!(s, "{}", f.name).unwrap();
        }
        s
    }

    pub fn is_intercept_only(&self) -> bool {
        self.features.len() == 1 && self.features[0].is_intercept()
    }
}
