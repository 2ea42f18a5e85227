//! Row-oriented observation tables with a typed schema.
//!
//! Every column carries a [`Role`] (covariate, treatment, mediator, outcome)
//! and a declared [`Support`]. Values are stored as `f64`; binary and
//! categorical values are validated against their support on construction.
//!
//! On disk a dataset is a plain CSV file plus a JSON sidecar holding the
//! schema (`<stem>.schema.json`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Covariate,
    Treatment,
    Mediator,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Support {
    Binary,
    Categorical { levels: Vec<f64> },
    Real,
}

impl Support {
    pub fn contains(&self, value: f64) -> bool {
        match self {
            Support::Binary => value == 0.0 || value == 1.0,
            Support::Categorical { levels } => levels.contains(&value),
            Support::Real => value.is_finite(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Support::Real)
    }

    /// Finite set of values, if any.
    pub fn levels(&self) -> Option<Vec<f64>> {
        match self {
            Support::Binary => Some(vec![0.0, 1.0]),
            Support::Categorical { levels } => Some(levels.clone()),
            Support::Real => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: Role,
    pub support: Support,
}

impl Column {
    pub fn new(name: impl Into<String>, role: Role, support: Support) -> Self {
        Column {
            name: name.into(),
            role,
            support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::schema(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(Schema { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, idx: usize) -> &Column {
        &self.columns[idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// The unique outcome column.
    pub fn outcome(&self) -> Result<usize> {
        let mut found = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == Role::Outcome)
            .map(|(i, _)| i);
        match (found.next(), found.next()) {
            (Some(i), None) => Ok(i),
            (None, _) => Err(Error::schema("dataset has no outcome column")),
            (Some(_), Some(_)) => Err(Error::schema("dataset has more than one outcome column")),
        }
    }

    pub fn treatment(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.role == Role::Treatment)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    values: Vec<f64>,
    n: usize,
    pub seed: Option<u64>,
}

impl Dataset {
    /// Builds a dataset from row-major values, checking every value against its
    /// column's support.
    pub fn from_rows(schema: Schema, values: Vec<f64>, seed: Option<u64>) -> Result<Self> {
        let p = schema.len();
        if p == 0 {
            return Err(Error::schema("schema has no columns"));
        }
        if !values.len().is_multiple_of(p) {
            return Err(Error::schema(format!(
                "{} values do not fill rows of width {p}",
                values.len()
            )));
        }
        let n = values.len() / p;
        if n == 0 {
            return Err(Error::schema("dataset must have at least one row"));
        }
        for (i, row) in values.chunks_exact(p).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let col = &schema.columns[j];
                if v.is_nan() {
                    return Err(Error::schema(format!("missing value in row {i}, column `{}`", col.name)));
                }
                if !col.support.contains(v) {
                    return Err(Error::schema(format!(
                        "value {v} in row {i} outside the support of column `{}`",
                        col.name
                    )));
                }
            }
        }
        Ok(Dataset {
            schema,
            values,
            n,
            seed,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cols())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .schema
            .index_of(name)
            .ok_or_else(|| Error::schema(format!("no column named `{name}`")))?;
        Ok(self.column(j).collect())
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.column(j).sum::<f64>() / self.n as f64
    }

    /// Copy of the selected rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let p = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            schema: self.schema.clone(),
            values,
            n: rows.len(),
            seed: self.seed,
        }
    }

    /// Returns a copy with `f` applied to every value of column `j`.
    /// The column's support is widened to `Real` if the result leaves it.
    pub fn map_column(&self, j: usize, f: impl Fn(f64) -> f64) -> Dataset {
        let p = self.n_cols();
        let mut out = self.clone();
        let mut leaves_support = false;
        for i in 0..self.n {
            let v = f(out.values[i * p + j]);
            leaves_support |= !out.schema.columns[j].support.contains(v);
            out.values[i * p + j] = v;
        }
        if leaves_support {
            out.schema.columns[j].support = Support::Real;
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.schema.names().collect();
        s.push_str(&names.join(","));
        s.push('\n');
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the canonical CSV rendering.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_csv_string().as_bytes());
        h.update(serde_json::to_string(&self.schema).unwrap().as_bytes());
        hex::encode(h.finalize())
    }

    /// Writes `path` (CSV) and its schema sidecar. Returns the sidecar path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, self.to_csv_string())?;
        let sidecar = schema_path(path);
        let doc = SchemaDocument {
            columns: self.schema.columns.clone(),
            n: self.n,
            seed: self.seed,
        };
        fs::write(&sidecar, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(sidecar)
    }

    /// Reads a CSV file and its sidecar schema.
    pub fn read(path: &Path) -> Result<Dataset> {
        let sidecar = schema_path(path);
        let doc: SchemaDocument = serde_json::from_str(&fs::read_to_string(&sidecar).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read schema sidecar {}: {e}", sidecar.display()),
            ))
        })?)?;
        let schema = Schema::new(doc.columns)?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        // CSV columns may be in any order; map them onto the schema.
        let mut order = Vec::with_capacity(schema.len());
        for col in &schema.columns {
            let pos = header
                .iter()
                .position(|h| h == &col.name)
                .ok_or_else(|| Error::schema(format!("column `{}` missing from {}", col.name, path.display())))?;
            order.push(pos);
        }
        let mut values = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            for &pos in &order {
                let field = rec.get(pos).unwrap_or("");
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::schema(format!("row {i}: cannot parse `{field}` in column `{}`", header[pos]))
                })?;
                values.push(v);
            }
        }
        Dataset::from_rows(schema, values, doc.seed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaDocument {
    columns: Vec<Column>,
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
}

/// `data/d.csv` -> `data/d.schema.json`
pub fn schema_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    csv_path.with_file_name(format!("{stem}.schema.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(vec![
            Column::new("W", Role::Covariate, Support::Binary),
            Column::new("A", Role::Treatment, Support::Binary),
            Column::new("Y", Role::Outcome, Support::Real),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_out_of_support_values() {
        let err = Dataset::from_rows(schema(), vec![0.0, 2.0, 1.5], None).unwrap_err();
        assert!(err.to_string().contains("column `A`"), "{err}");
    }

    #[test]
    fn rejects_empty_and_ragged() {
        assert!(Dataset::from_rows(schema(), vec![], None).is_err());
        assert!(Dataset::from_rows(schema(), vec![0.0, 1.0], None).is_err());
    }

    #[test]
    fn duplicate_columns_rejected() {
        let cols = vec![
            Column::new("W", Role::Covariate, Support::Binary),
            Column::new("W", Role::Outcome, Support::Real),
        ];
        assert!(Schema::new(cols).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = Dataset::from_rows(schema(), vec![0.0, 1.0, 0.25, 1.0, 0.0, -3.5e-7], Some(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let sidecar = d.write(&path).unwrap();
        assert!(sidecar.ends_with("d.schema.json"));
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "W,A,Y\n0,1,0.25\n1,0,-0.00000035\n"
        );
    }

    #[test]
    fn map_column_widens_support() {
        let d = Dataset::from_rows(schema(), vec![1.0, 1.0, 1.0], None).unwrap();
        let d2 = d.map_column(0, |v| v * 3.0);
        assert_eq!(d2.schema.columns[0].support, Support::Real);
        assert_eq!(d2.row(0)[0], 3.0);
        assert_eq!(d.map_column(0, |v| 1.0 - v).schema, d.schema);
    }
}
