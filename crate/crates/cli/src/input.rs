use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use regex::Regex;
use serde::Deserialize;
use sparseiv::data::{ColumnLabels, Dataset};

use crate::error::{stage, usage, CliError, CliResult};

pub const INTERCEPT: &str = "(intercept)";

/// Instrument columns, by name or by a regular expression over the header.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum InstrumentSpec {
    List(Vec<String>),
    Pattern { pattern: String },
}

fn yes() -> bool {
    true
}

/// Which CSV column plays which part in the model.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesManifest {
    pub outcome: String,
    pub endogenous: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    pub instruments: InstrumentSpec,
    /// Adds a constant to the exogenous regressors.
    #[serde(default = "yes")]
    pub intercept: bool,
}

/// Columns of a CSV file, in header order.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect()
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let pointer = json_pointer(e.path());
        usage(format!("{}: invalid value at {pointer}: {}", path.display(), e.inner()))
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

/// Reads a comma-separated file with a header row; every cell must be a number.
pub fn read_csv(path: &Path) -> CliResult<Table> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| usage(format!("{shown}: {e}")))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| usage(format!("{shown}: header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().any(String::is_empty) {
        return Err(usage(format!("{shown} line 1: header has an empty column name")));
    }
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h) {
            return Err(usage(format!("{shown} line 1: duplicate column '{h}'")));
        }
    }
    let mut columns = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            usage(format!("{shown} line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(usage(format!(
                    "{shown} line {line}, column '{}': missing value",
                    header[j]
                )));
            }
            let v: f64 = cell.parse().map_err(|_| {
                usage(format!("{shown} line {line}, column '{}': '{cell}' is not a number", header[j]))
            })?;
            if !v.is_finite() {
                return Err(usage(format!("{shown} line {line}, column '{}': '{cell}' is not finite", header[j])));
            }
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(usage(format!("{shown}: no data rows")));
    }
    Ok(Table { header, columns })
}

/// Role assignment resolved against a header.
#[derive(Debug, Clone)]
pub struct ResolvedRoles {
    pub outcome: usize,
    pub endogenous: Vec<usize>,
    /// Exogenous regressors followed by controls.
    pub exogenous: Vec<usize>,
    pub instruments: Vec<usize>,
    pub intercept: bool,
}

impl RolesManifest {
    pub fn resolve(&self, table: &Table) -> CliResult<ResolvedRoles> {
        let idx = table.index();
        let find = |name: &str, role: &str| -> CliResult<usize> {
            idx.get(name)
                .copied()
                .ok_or_else(|| usage(format!("{role} column '{name}' is not in the data header")))
        };
        let outcome = find(&self.outcome, "outcome")?;
        let endogenous = self
            .endogenous
            .iter()
            .map(|c| find(c, "endogenous"))
            .collect::<CliResult<Vec<_>>>()?;
        if endogenous.is_empty() {
            return Err(usage("roles: at least one endogenous column is required"));
        }
        let mut exogenous = Vec::new();
        for c in &self.exogenous {
            exogenous.push(find(c, "exogenous")?);
        }
        for c in &self.controls {
            exogenous.push(find(c, "controls")?);
        }
        let instruments = match &self.instruments {
            InstrumentSpec::List(names) => names
                .iter()
                .map(|c| find(c, "instrument"))
                .collect::<CliResult<Vec<_>>>()?,
            InstrumentSpec::Pattern { pattern } => {
                let re = Regex::new(pattern).map_err(|e| usage(format!("roles: instrument pattern: {e}")))?;
                (0..table.header.len()).filter(|&j| re.is_match(&table.header[j])).collect()
            }
        };
        if instruments.is_empty() {
            return Err(usage("roles: no instrument columns"));
        }
        let mut owner: HashMap<usize, &str> = HashMap::new();
        let groups: [(&str, &[usize]); 4] = [
            ("outcome", std::slice::from_ref(&outcome)),
            ("endogenous", &endogenous),
            ("exogenous/controls", &exogenous),
            ("instruments", &instruments),
        ];
        for (role, cols) in groups {
            for &c in cols {
                if let Some(prev) = owner.insert(c, role) {
                    return Err(usage(format!(
                        "roles: column '{}' is listed as both {prev} and {role}",
                        table.header[c]
                    )));
                }
            }
        }
        Ok(ResolvedRoles {
            outcome,
            endogenous,
            exogenous,
            instruments,
            intercept: self.intercept,
        })
    }
}

fn matrix(table: &Table, cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((table.rows(), cols.len()), |(i, j)| table.columns[cols[j]][i])
}

impl ResolvedRoles {
    pub fn dataset(&self, table: &Table) -> CliResult<Dataset<f64>> {
        let n = table.rows();
        let y = Array1::from(table.columns[self.outcome].clone());
        let d = matrix(table, &self.endogenous);
        let mut w = matrix(table, &self.exogenous);
        let mut w_names: Vec<String> = self.exogenous.iter().map(|&c| table.header[c].clone()).collect();
        if self.intercept {
            w = sparseiv::linalg::hstack(Array2::ones((n, 1)).view(), w.view());
            w_names.insert(0, INTERCEPT.into());
        }
        let f = matrix(table, &self.instruments);
        let mut d_names: Vec<String> = self.endogenous.iter().map(|&c| table.header[c].clone()).collect();
        d_names.extend(w_names);
        let labels = ColumnLabels {
            y: table.header[self.outcome].clone(),
            d: d_names,
            f: self.instruments.iter().map(|&c| table.header[c].clone()).collect(),
        };
        Dataset::new(y, d, w, f)
            .and_then(|ds| ds.with_labels(labels))
            .map_err(stage("data"))
    }

    /// Baseline instrument matrix for the specification test: the named
    /// columns followed by the exogenous regressors.
    pub fn baseline(&self, table: &Table, data: &Dataset<f64>, names: &[String]) -> CliResult<Array2<f64>> {
        let idx = table.index();
        let mut cols = Vec::new();
        for name in names {
            let c = *idx
                .get(name.as_str())
                .ok_or_else(|| usage(format!("baseline column '{name}' is not in the data header")))?;
            if c == self.outcome || self.endogenous.contains(&c) {
                return Err(usage(format!("baseline column '{name}' is the outcome or endogenous")));
            }
            cols.push(c);
        }
        Ok(sparseiv::linalg::hstack(matrix(table, &cols).view(), data.w()))
    }
}

/// Parses `lo:hi:step`.
pub fn parse_range(spec: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || usage(format!("grid '{spec}' must look like lo:hi:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<CliResult<Vec<_>>>()?;
    let (lo, hi, step) = (nums[0], nums[1], nums[2]);
    if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || !(step > 0.0) || lo > hi {
        return Err(usage(format!("grid '{spec}' needs finite lo <= hi and step > 0")));
    }
    Ok((lo, hi, step))
}

/// Parses a matrix written as `1,0;0,1`.
pub fn parse_matrix(spec: &str, cols: usize) -> CliResult<Array2<f64>> {
    let rows: Vec<Vec<f64>> = spec
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("--R: '{v}' is not a number"))))
                .collect()
        })
        .collect::<CliResult<_>>()?;
    if rows.iter().any(|r| r.len() != cols) {
        return Err(usage(format!("--R: every row needs {cols} entries, one per regressor")));
    }
    let k = rows.len();
    Ok(Array2::from_shape_fn((k, cols), |(i, j)| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_matrices() {
        assert_eq!(parse_range("-1:2:0.5").unwrap(), (-1.0, 2.0, 0.5));
        assert!(parse_range("1:0:0.1").is_err());
        assert!(parse_range("0:1").is_err());
        assert!(parse_range("0:1:0").is_err());
        let r = parse_matrix("1,0;0,2", 2).unwrap();
        assert_eq!(r[[1, 1]], 2.0);
        assert!(parse_matrix("1,0,0", 2).is_err());
    }

    #[test]
    fn pointers_escape_keys() {
        let text = r#"{"a/b": [1, "x"]}"#;
        let mut de = serde_json::Deserializer::from_str(text);
        let err = serde_path_to_error::deserialize::<_, HashMap<String, Vec<f64>>>(&mut de).unwrap_err();
        assert_eq!(json_pointer(err.path()), "/a~1b/1");
    }
}
