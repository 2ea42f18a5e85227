//! Estimands as nested regressions plus linear functional maps.
//!
//! An [`EstimandSpec`] is an ordered list of stages `k = 1..K` (stage 1
//! outermost). Stage `K` regresses the outcome on its conditioning set; each
//! stage `k < K` regresses the mapped prediction of stage `k + 1`. Every stage
//! carries a [`FunctionalMap`]: a finite linear combination of point
//! evaluations of the stage's regression with some variables set to
//! constants, e.g. `Q(1, w) - Q(0, w)` for the treatment-effect contrast.
//! Because a map is a fixed combination of point evaluations, it is linear in
//! the mapped function by construction.
//!
//! The on-disk form is a JSON document. Stages are written innermost first
//! (`k = K, ..., 1`), which is also the order in which they are fitted:
//!
//! ```json
//! {
//!   "name": "ate",
//!   "stages": [
//!     { "regress": "Y", "given": ["A", "W"],
//!       "map": [ { "coef": 1, "set": { "A": 1 } }, { "coef": -1, "set": { "A": 0 } } ] },
//!     { "regress": "prev", "given": [], "map": [ { "coef": 1, "set": {} } ] }
//!   ]
//! }
//! ```
//!
//! A `contrast` block (`{"param": "a_prime", "values": [1, 0]}`) turns the
//! document into a difference of two arms; assignments may then refer to the
//! parameter as `"$a_prime"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Role, Schema, Support};
use crate::error::{Error, Result};

/// Anything that can be evaluated on a full schema-ordered row.
pub trait RowFunction {
    fn eval(&self, row: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> RowFunction for F {
    fn eval(&self, row: &[f64]) -> f64 {
        self(row)
    }
}

/// Column reference by name; resolved against a schema at bind time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableRef(pub String);

impl VariableRef {
    pub fn new(name: impl Into<String>) -> Self {
        VariableRef(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VariableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssignValue {
    Const(f64),
    /// Placeholder resolved per contrast arm.
    Param(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub assignments: BTreeMap<VariableRef, AssignValue>,
}

impl Term {
    pub fn new(coef: f64, assignments: &[(&str, f64)]) -> Self {
        Term {
            coef,
            assignments: assignments
                .iter()
                .map(|(k, v)| (VariableRef::new(*k), AssignValue::Const(*v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap {
    pub terms: Vec<Term>,
}

impl FunctionalMap {
    pub fn identity() -> Self {
        FunctionalMap {
            terms: vec![Term::new(1.0, &[])],
        }
    }

    /// `f(x with var = value)`
    pub fn point(var: &str, value: f64) -> Self {
        FunctionalMap {
            terms: vec![Term::new(1.0, &[(var, value)])],
        }
    }

    /// `f(x with var = 1) - f(x with var = 0)`
    pub fn difference(var: &str) -> Self {
        FunctionalMap {
            terms: vec![Term::new(1.0, &[(var, 1.0)]), Term::new(-1.0, &[(var, 0.0)])],
        }
    }

    pub fn assigned_vars(&self) -> BTreeSet<&VariableRef> {
        self.terms.iter().flat_map(|t| t.assignments.keys()).collect()
    }

    /// Conditioning variables the mapped function still depends on.
    pub fn free_vars(&self, conditioning: &[VariableRef]) -> Vec<VariableRef> {
        let assigned = self.assigned_vars();
        conditioning
            .iter()
            .filter(|v| !assigned.contains(v))
            .cloned()
            .collect()
    }

    /// Binds variable names to schema positions, checking every assignment
    /// against the column's declared support.
    pub fn bind(&self, schema: &Schema) -> Result<BoundMap> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mut assignments = Vec::with_capacity(t.assignments.len());
            for (var, value) in &t.assignments {
                let idx = schema.index_of(var.name()).ok_or_else(|| {
                    Error::schema(format!("column `{var}` referenced by the estimand is not in the dataset schema"))
                })?;
                let value = match value {
                    AssignValue::Const(v) => *v,
                    AssignValue::Param(p) => {
                        return Err(Error::spec(format!(
                            "assignment `{var} = ${p}` is unresolved; select a contrast arm first"
                        )))
                    }
                };
                let support = &schema.column(idx).support;
                if !support.contains(value) {
                    return Err(Error::schema(format!(
                        "assignment `{var} = {value}` lies outside the declared support {support:?}"
                    )));
                }
                assignments.push((idx, value));
            }
            terms.push(BoundTerm {
                coef: t.coef,
                assignments,
            });
        }
        Ok(BoundMap { terms })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub coef: f64,
    pub assignments: Vec<(usize, f64)>,
}

/// A functional map resolved to column indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundMap {
    pub terms: Vec<BoundTerm>,
}

impl BoundMap {
    /// `sum_t coef_t * f(row with assignments_t applied)`
    pub fn apply<F: RowFunction + ?Sized>(&self, f: &F, row: &[f64]) -> f64 {
        let mut scratch = row.to_vec();
        self.apply_with(f, row, &mut scratch)
    }

    /// As [`apply`](Self::apply), reusing a caller-provided buffer of row length.
    pub fn apply_with<F: RowFunction + ?Sized>(&self, f: &F, row: &[f64], scratch: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for t in &self.terms {
            scratch.copy_from_slice(row);
            for &(j, v) in &t.assignments {
                scratch[j] = v;
            }
            total += t.coef * f.eval(scratch);
        }
        total
    }

    /// Applies the map to each coordinate of a vector-valued function at once.
    /// `out[j] = sum_t coef_t * g(row with assignments_t)[j]`.
    pub fn apply_vec(&self, g: impl Fn(&[f64], &mut [f64]), row: &[f64], scratch: &mut [f64], tmp: &mut [f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            scratch.copy_from_slice(row);
            for &(j, v) in &t.assignments {
                scratch[j] = v;
            }
            g(scratch, tmp);
            for (o, x) in out.iter_mut().zip(tmp.iter()) {
                *o += t.coef * x;
            }
        }
    }

    /// Sum of coefficients: the value of the map on the constant function 1.
    pub fn total_coef(&self) -> f64 {
        self.terms.iter().map(|t| t.coef).sum()
    }
}

/// Evaluates `map` on `f` at `row`, binding it against `schema` first.
pub fn apply_map<F: RowFunction + ?Sized>(map: &FunctionalMap, schema: &Schema, f: &F, row: &[f64]) -> Result<f64> {
    Ok(map.bind(schema)?.apply(f, row))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressTarget {
    Outcome,
    PreviousMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub target: RegressTarget,
    pub conditioning: Vec<VariableRef>,
    pub subgroup: Option<BTreeMap<VariableRef, f64>>,
    pub map: FunctionalMap,
}

impl Stage {
    fn new(target: RegressTarget, given: &[&str], map: FunctionalMap) -> Self {
        Stage {
            target,
            conditioning: given.iter().map(|g| VariableRef::new(*g)).collect(),
            subgroup: None,
            map,
        }
    }

    fn with_subgroup(mut self, var: &str, value: f64) -> Self {
        self.subgroup = Some([(VariableRef::new(var), value)].into_iter().collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub param: String,
    pub values: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimandSpec {
    pub name: String,
    /// `stages[0]` is stage 1 (outermost).
    pub stages: Vec<Stage>,
    pub contrast: Option<Contrast>,
}

/// The four estimands shipped with the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// `E[Y | A = 1]`
    MeanTreated,
    /// `E{E[Y | A=1, W] - E[Y | A=0, W]}`
    Ate,
    /// `E{E[Y | A=0, W] | A = 1}`
    AttControlMean,
    /// `E[E{E[Y | A=a', M, W] | A=0, W}]`, contrasted over `a' = 1` vs `a' = 0`.
    Nde,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::MeanTreated, Builtin::Ate, Builtin::AttControlMean, Builtin::Nde];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::MeanTreated => "mean_treated",
            Builtin::Ate => "ate",
            Builtin::AttControlMean => "att_control_mean",
            Builtin::Nde => "nde",
        }
    }

    pub fn spec(self) -> EstimandSpec {
        use RegressTarget::*;
        let (stages, contrast) = match self {
            Builtin::MeanTreated => (
                vec![Stage::new(Outcome, &["A"], FunctionalMap::point("A", 1.0)).with_subgroup("A", 1.0)],
                None,
            ),
            Builtin::Ate => (
                vec![
                    Stage::new(PreviousMap, &[], FunctionalMap::identity()),
                    Stage::new(Outcome, &["A", "W"], FunctionalMap::difference("A")),
                ],
                None,
            ),
            Builtin::AttControlMean => (
                vec![
                    Stage::new(PreviousMap, &["A"], FunctionalMap::point("A", 1.0)).with_subgroup("A", 1.0),
                    Stage::new(Outcome, &["A", "W"], FunctionalMap::point("A", 0.0)),
                ],
                None,
            ),
            Builtin::Nde => {
                let inner = FunctionalMap {
                    terms: vec![Term {
                        coef: 1.0,
                        assignments: [(VariableRef::new("A"), AssignValue::Param("a_prime".into()))]
                            .into_iter()
                            .collect(),
                    }],
                };
                (
                    vec![
                        Stage::new(PreviousMap, &[], FunctionalMap::identity()),
                        Stage::new(PreviousMap, &["A", "W"], FunctionalMap::point("A", 0.0)),
                        Stage::new(Outcome, &["A", "M", "W"], inner),
                    ],
                    Some(Contrast {
                        param: "a_prime".into(),
                        values: [1.0, 0.0],
                    }),
                )
            }
        };
        EstimandSpec {
            name: self.name().into(),
            stages,
            contrast,
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown builtin estimand `{s}` (expected one of mean_treated, ate, att_control_mean, nde)"
                ))
            })
    }
}

pub fn builtin_spec(name: &str) -> Result<EstimandSpec> {
    Ok(name.parse::<Builtin>()?.spec())
}

pub fn parse_spec(text: &str) -> Result<EstimandSpec> {
    EstimandSpec::parse(text)
}

impl EstimandSpec {
    /// Number of stages `K`.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// 1-based stage access.
    pub fn stage(&self, k: usize) -> &Stage {
        &self.stages[k - 1]
    }

    pub fn parse(text: &str) -> Result<EstimandSpec> {
        let doc: SpecDocument = serde_json::from_str(text).map_err(|e| Error::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let spec = EstimandSpec::try_from(doc)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical document text. `parse(to_document(s)) == s` and the text is a
    /// fixed point of print-after-parse.
    pub fn to_document(&self) -> String {
        let doc = SpecDocument::from(self);
        serde_json::to_string_pretty(&doc).expect("spec documents always serialize") + "\n"
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_document().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::spec("name must be non-empty"));
        }
        let k_max = self.depth();
        if k_max == 0 {
            return Err(Error::spec("an estimand needs at least one stage (K >= 1)"));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let k = i + 1;
            let expected = if k == k_max {
                RegressTarget::Outcome
            } else {
                RegressTarget::PreviousMap
            };
            if stage.target != expected {
                return Err(Error::spec(format!(
                    "stage {k}: the innermost stage must regress `Y` and every other stage `prev`"
                )));
            }
            let given: BTreeSet<&VariableRef> = stage.conditioning.iter().collect();
            if given.len() != stage.conditioning.len() {
                return Err(Error::spec(format!("stage {k}: duplicate variable in `given`")));
            }
            if stage.map.terms.is_empty() {
                return Err(Error::spec(format!("stage {k}: map must have at least one term")));
            }
            for t in &stage.map.terms {
                if !t.coef.is_finite() || t.coef == 0.0 {
                    return Err(Error::spec(format!("stage {k}: map coefficients must be finite and nonzero")));
                }
                for (var, value) in &t.assignments {
                    if !given.contains(var) {
                        return Err(Error::spec(format!(
                            "stage {k}: map assigns `{var}` which is not in the stage's conditioning set"
                        )));
                    }
                    match value {
                        AssignValue::Const(v) if !v.is_finite() => {
                            return Err(Error::spec(format!("stage {k}: assignment to `{var}` is not finite")))
                        }
                        AssignValue::Param(p) => match &self.contrast {
                            Some(c) if &c.param == p => {}
                            _ => {
                                return Err(Error::spec(format!(
                                    "stage {k}: parameter `${p}` is not declared by a contrast"
                                )))
                            }
                        },
                        _ => {}
                    }
                }
            }
            if let Some(sub) = &stage.subgroup {
                for (var, &value) in sub {
                    if !given.contains(var) {
                        return Err(Error::spec(format!(
                            "stage {k}: subgroup variable `{var}` must be in the conditioning set"
                        )));
                    }
                    let consistent = stage
                        .map
                        .terms
                        .iter()
                        .all(|t| t.assignments.get(var) == Some(&AssignValue::Const(value)));
                    if !consistent {
                        return Err(Error::spec(format!(
                            "stage {k}: subgroup `{var} = {value}` must be assigned by every map term"
                        )));
                    }
                }
            }
        }
        let outer = &self.stages[0];
        let sub_keys: BTreeSet<&VariableRef> = outer.subgroup.iter().flat_map(|s| s.keys()).collect();
        if let Some(v) = outer.conditioning.iter().find(|v| !sub_keys.contains(v)) {
            return Err(Error::spec(format!(
                "stage 1: the outermost stage may only condition on subgroup variables, found `{v}`"
            )));
        }
        let innermost: BTreeSet<&VariableRef> = self.stages[k_max - 1].conditioning.iter().collect();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(v) = stage.map.assigned_vars().into_iter().find(|v| !innermost.contains(v)) {
                return Err(Error::spec(format!(
                    "stage {}: assigned variable `{v}` is missing from the innermost conditioning set",
                    i + 1
                )));
            }
        }
        if let Some(c) = &self.contrast {
            if c.param.is_empty() {
                return Err(Error::spec("contrast parameter name must be non-empty"));
            }
            if !c.values.iter().all(|v| v.is_finite()) || c.values[0] == c.values[1] {
                return Err(Error::spec("contrast values must be two distinct finite numbers"));
            }
            let used = self.stages.iter().any(|s| {
                s.map
                    .terms
                    .iter()
                    .any(|t| t.assignments.values().any(|v| v == &AssignValue::Param(c.param.clone())))
            });
            if !used {
                return Err(Error::spec(format!("contrast parameter `{}` is never used", c.param)));
            }
        }
        Ok(())
    }

    /// The spec with parameter `param` replaced by `value` and the contrast removed.
    pub fn resolve(&self, value: f64) -> EstimandSpec {
        let mut out = self.clone();
        if let Some(c) = out.contrast.take() {
            for stage in &mut out.stages {
                for t in &mut stage.map.terms {
                    for v in t.assignments.values_mut() {
                        if *v == AssignValue::Param(c.param.clone()) {
                            *v = AssignValue::Const(value);
                        }
                    }
                }
            }
        }
        out
    }

    /// One resolved spec per contrast arm, or the estimand itself.
    pub fn arms(&self) -> Vec<EstimandSpec> {
        match &self.contrast {
            Some(c) => c.values.iter().map(|&v| self.resolve(v)).collect(),
            None => vec![self.clone()],
        }
    }

    /// Resolves every variable against `schema`.
    pub fn bind(&self, schema: &Schema) -> Result<BoundSpec> {
        if self.contrast.is_some() {
            return Err(Error::spec("cannot bind a contrast spec directly; bind each arm"));
        }
        let outcome = schema.outcome()?;
        let lookup = |v: &VariableRef| {
            schema.index_of(v.name()).ok_or_else(|| {
                Error::schema(format!("column `{v}` referenced by the estimand is not in the dataset schema"))
            })
        };
        let mut stages = Vec::with_capacity(self.depth());
        for (i, stage) in self.stages.iter().enumerate() {
            let given = stage.conditioning.iter().map(lookup).collect::<Result<Vec<_>>>()?;
            if given.contains(&outcome) {
                return Err(Error::schema(format!(
                    "stage {}: the outcome column cannot be a conditioning variable",
                    i + 1
                )));
            }
            let subgroup = match &stage.subgroup {
                Some(s) => s.iter().map(|(v, &x)| Ok((lookup(v)?, x))).collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            stages.push(BoundStage {
                target: stage.target,
                given,
                subgroup,
                map: stage.map.bind(schema)?,
            });
        }
        Ok(BoundSpec {
            name: self.name.clone(),
            stages,
            outcome,
            treatment: schema.treatment(),
            schema: schema.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundStage {
    pub target: RegressTarget,
    pub given: Vec<usize>,
    pub subgroup: Vec<(usize, f64)>,
    pub map: BoundMap,
}

/// An arm of an estimand resolved against a dataset schema.
#[derive(Debug, Clone)]
pub struct BoundSpec {
    pub name: String,
    pub stages: Vec<BoundStage>,
    pub outcome: usize,
    pub treatment: Option<usize>,
    pub schema: Schema,
}

impl BoundSpec {
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// 1-based.
    pub fn stage(&self, k: usize) -> &BoundStage {
        &self.stages[k - 1]
    }

    /// Discrete-valued conditioning columns used anywhere in the estimand whose
    /// role is treatment. Folds missing a level of these are degenerate.
    pub fn treatment_levels(&self) -> Option<(usize, Vec<f64>)> {
        let t = self.treatment?;
        if !self.stages.iter().any(|s| s.given.contains(&t)) {
            return None;
        }
        let col = self.schema.column(t);
        debug_assert_eq!(col.role, Role::Treatment);
        col.support.levels().map(|l| (t, l))
    }

    pub fn outcome_support(&self) -> &Support {
        &self.schema.column(self.outcome).support
    }
}

// ---------------------------------------------------------------------------
// Document form

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contrast: Option<Contrast>,
    stages: Vec<StageDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDocument {
    regress: String,
    given: Vec<String>,
    #[serde(rename = "where", default, skip_serializing_if = "Option::is_none")]
    subgroup: Option<BTreeMap<String, f64>>,
    map: Vec<TermDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermDocument {
    coef: f64,
    set: BTreeMap<String, ValueDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ValueDocument {
    Number(f64),
    Param(String),
}

impl TryFrom<SpecDocument> for EstimandSpec {
    type Error = Error;

    fn try_from(doc: SpecDocument) -> Result<Self> {
        let mut stages = Vec::with_capacity(doc.stages.len());
        // Written innermost first.
        for (pos, s) in doc.stages.into_iter().enumerate().rev() {
            let target = match s.regress.as_str() {
                "Y" => RegressTarget::Outcome,
                "prev" => RegressTarget::PreviousMap,
                other => {
                    return Err(Error::spec(format!(
                        "stages[{pos}]: `regress` must be \"Y\" or \"prev\", found {other:?}"
                    )))
                }
            };
            let mut terms = Vec::with_capacity(s.map.len());
            for t in s.map {
                let mut assignments = BTreeMap::new();
                for (k, v) in t.set {
                    let value = match v {
                        ValueDocument::Number(x) => AssignValue::Const(x),
                        ValueDocument::Param(p) => match p.strip_prefix('$') {
                            Some(name) => AssignValue::Param(name.to_owned()),
                            None => {
                                return Err(Error::spec(format!(
                                    "stages[{pos}]: assignment to `{k}` must be a number or a `$param` reference"
                                )))
                            }
                        },
                    };
                    assignments.insert(VariableRef(k), value);
                }
                terms.push(Term { coef: t.coef, assignments });
            }
            stages.push(Stage {
                target,
                conditioning: s.given.into_iter().map(VariableRef).collect(),
                subgroup: s.subgroup.map(|m| m.into_iter().map(|(k, v)| (VariableRef(k), v)).collect()),
                map: FunctionalMap { terms },
            });
        }
        Ok(EstimandSpec {
            name: doc.name,
            stages,
            contrast: doc.contrast,
        })
    }
}

impl From<&EstimandSpec> for SpecDocument {
    fn from(spec: &EstimandSpec) -> Self {
        let stages = spec
            .stages
            .iter()
            .rev()
            .map(|s| StageDocument {
                regress: match s.target {
                    RegressTarget::Outcome => "Y".into(),
                    RegressTarget::PreviousMap => "prev".into(),
                },
                given: s.conditioning.iter().map(|v| v.0.clone()).collect(),
                subgroup: s
                    .subgroup
                    .as_ref()
                    .map(|m| m.iter().map(|(k, &v)| (k.0.clone(), v)).collect()),
                map: s
                    .map
                    .terms
                    .iter()
                    .map(|t| TermDocument {
                        coef: t.coef,
                        set: t
                            .assignments
                            .iter()
                            .map(|(k, v)| {
                                let v = match v {
                                    AssignValue::Const(x) => ValueDocument::Number(*x),
                                    AssignValue::Param(p) => ValueDocument::Param(format!("${p}")),
                                };
                                (k.0.clone(), v)
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        SpecDocument {
            name: spec.name.clone(),
            contrast: spec.contrast.clone(),
            stages,
        }
    }
}
