use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::Value;
use smc_core::model::{compile, parse, ModelGraph};

use crate::error::CliError;

/// Round-trip exact decimal form of a double.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Inf" } else { "-Inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

/// Data CSV to name → column. Empty cells become NaN, which compile rejects.
pub fn read_data(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let bad = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(bad)?;
    let names: Vec<String> = rdr.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(bad)?;
        for (c, cell) in rec.iter().enumerate() {
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse()
                    .map_err(|_| CliError::Config(format!("{}: row {}, column {}: `{cell}` is not a number", path.display(), r + 1, names[c])))?
            };
            cols[c].push(v);
        }
    }
    Ok(names.into_iter().zip(cols).collect())
}

fn read_json_object(path: &Path) -> Result<serde_json::Map<String, Value>, CliError> {
    match serde_json::from_str(&read(path)?) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

pub fn read_constants(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    read_json_object(path)?
        .into_iter()
        .map(|(k, v)| match v.as_f64() {
            Some(x) => Ok((k, x)),
            None => Err(CliError::Config(format!("{}: constant `{k}` must be a number", path.display()))),
        })
        .collect()
}

/// Inits as name → values; a bare number is a one-element vector.
pub fn read_inits(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let not_num = |k: &str| CliError::Config(format!("{}: init `{k}` must be a number or an array of numbers", path.display()));
    read_json_object(path)?
        .into_iter()
        .map(|(k, v)| {
            let vals = match &v {
                Value::Number(n) => vec![n.as_f64().ok_or_else(|| not_num(&k))?],
                Value::Array(a) => a.iter().map(|x| x.as_f64().ok_or_else(|| not_num(&k))).collect::<Result<_, _>>()?,
                _ => return Err(not_num(&k)),
            };
            Ok((k, vals))
        })
        .collect()
}

/// Square matrix written one row per line, entries separated by commas
/// or whitespace.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let text = read(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| CliError::Config(format!("{}: line {}: `{s}` is not a number", path.display(), i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{}: expected a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Parse and compile a model with optional data, constants and inits.
pub fn load_model(model: &Path, data: Option<&Path>, constants: Option<&Path>, inits: Option<&Path>) -> Result<ModelGraph, CliError> {
    let src = parse(&read(model)?).map_err(|e| CliError::Config(format!("{}: {e}", model.display())))?;
    let data = data.map(read_data).transpose()?.unwrap_or_default();
    let constants = constants.map(read_constants).transpose()?.unwrap_or_default();
    let inits = inits.map(read_inits).transpose()?.unwrap_or_default();
    compile(&src, &constants, &data, &inits).map_err(|e| CliError::Config(format!("{}: {e}", model.display())))
}

/// Build CSV text from a header and rows of pre-formatted cells.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Table { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, &self.text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0, -0.0, f64::MIN_POSITIVE] {
            let s = num(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
        assert_eq!(num(f64::NEG_INFINITY), "-Inf");
    }

    #[test]
    fn data_with_empty_cell_reads_as_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "y,z\n1.5,2\n,3\n").unwrap();
        let d = read_data(&p).unwrap();
        assert_eq!(d["z"], vec![2.0, 3.0]);
        assert_eq!(d["y"][0], 1.5);
        assert!(d["y"][1].is_nan());
        fs::write(&p, "y\nabc\n").unwrap();
        assert!(read_data(&p).is_err());
    }

    #[test]
    fn inits_accept_numbers_and_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.json");
        fs::write(&p, r#"{"a": 0.5, "x": [1, 2]}"#).unwrap();
        let i = read_inits(&p).unwrap();
        assert_eq!(i["a"], vec![0.5]);
        assert_eq!(i["x"], vec![1.0, 2.0]);
        fs::write(&p, r#"{"a": "no"}"#).unwrap();
        assert!(read_inits(&p).is_err());
        fs::write(&p, r#"[1]"#).unwrap();
        assert!(read_constants(&p).is_err());
    }

    #[test]
    fn matrix_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "0.1, 0\n# comment\n0 0.2\n").unwrap();
        assert_eq!(read_matrix(&p).unwrap(), DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]));
        fs::write(&p, "1 2 3\n4 5 6\n").unwrap();
        assert!(read_matrix(&p).is_err());
    }
}
