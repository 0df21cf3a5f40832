//! Run records on disk.
//!
//! A record file is JSON lines. The first line is a header object
//! `{"header": {...}}` and is the only place a timestamp appears, so two runs
//! with the same config and seed produce identical files after line one.
//! Every following line is one evaluation point (SAC), epoch (classifier) or
//! step (GRPO).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{EraError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub kind: String,
    pub seed: u64,
    pub steps: usize,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    pub version: String,
    pub config: Value,
}

impl RunHeader {
    pub fn new(kind: &str, seed: u64, steps: usize, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            seed,
            steps,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: to_value(config)?,
        })
    }
}

fn to_value(x: &impl Serialize) -> Result<Value> {
    serde_json::to_value(x).map_err(|e| EraError::Record(format!("serialize: {e}")))
}

/// A header plus its rows, each row a flat JSON object.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub rows: Vec<Map<String, Value>>,
}

impl RunRecord {
    pub fn from_rows<T: Serialize>(header: RunHeader, rows: &[T]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|r| match to_value(r)? {
                Value::Object(m) => Ok(m),
                other => Err(EraError::Record(format!("record row is not an object: {other}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let io = |e: std::io::Error| EraError::Record(format!("{}: {e}", path.as_ref().display()));
        let mut w = BufWriter::new(fs::File::create(path.as_ref()).map_err(io)?);
        let mut head = Map::new();
        head.insert("header".into(), to_value(&self.header)?);
        writeln!(w, "{}", Value::Object(head)).map_err(io)?;
        for row in &self.rows {
            writeln!(w, "{}", Value::Object(row.clone())).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let io = |e: std::io::Error| EraError::Record(format!("{}: {e}", p.display()));
        let mut lines = BufReader::new(fs::File::open(p).map_err(io)?).lines();
        let parse = |n: usize, s: &str| -> Result<Value> {
            serde_json::from_str(s).map_err(|e| EraError::Record(format!("{}:{n}: {e}", p.display())))
        };
        let first = lines
            .next()
            .ok_or_else(|| EraError::Record(format!("{}: empty record", p.display())))?
            .map_err(io)?;
        let header = match parse(1, &first)? {
            Value::Object(mut m) => m
                .remove("header")
                .ok_or_else(|| EraError::Record(format!("{}:1: missing header", p.display())))?,
            _ => return Err(EraError::Record(format!("{}:1: missing header", p.display()))),
        };
        let header: RunHeader = serde_json::from_value(header)
            .map_err(|e| EraError::Record(format!("{}:1: {e}", p.display())))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            match parse(i + 2, &line)? {
                Value::Object(m) => rows.push(m),
                _ => return Err(EraError::Record(format!("{}:{}: not an object", p.display(), i + 2))),
            }
        }
        Ok(Self { header, rows })
    }

    /// The column the rows are indexed by: `step` or `epoch`.
    pub fn grid_key(&self) -> Option<&'static str> {
        let first = self.rows.first()?;
        ["step", "epoch"].into_iter().find(|k| first.contains_key(*k))
    }

    pub fn grid(&self) -> Vec<f64> {
        match self.grid_key() {
            Some(k) => self.rows.iter().filter_map(|r| r.get(k).and_then(Value::as_f64)).collect(),
            None => Vec::new(),
        }
    }

    /// Numeric columns in first-row order, excluding the grid key.
    pub fn numeric_columns(&self) -> Vec<String> {
        let key = self.grid_key();
        self.rows
            .first()
            .map(|r| {
                r.iter()
                    .filter(|(k, v)| Some(k.as_str()) != key && v.is_number())
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.get(name).and_then(Value::as_f64)).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.rows.last().and_then(|r| r.get(name)).and_then(Value::as_f64)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One CSV line per metric: the final value's mean and std over records.
pub fn summary_csv(records: &[RunRecord]) -> Result<String> {
    let first = records.first().ok_or(EraError::EmptyInput("summary of no records"))?;
    let mut out = String::from("metric,mean,std,n\n");
    for col in first.numeric_columns() {
        let finals: Vec<f64> = records.iter().filter_map(|r| r.last(&col)).collect();
        let (m, s) = mean_std(&finals);
        out.push_str(&format!("{col},{m},{s},{}\n", finals.len()));
    }
    Ok(out)
}

/// Aligned CSV of `other − base` per shared numeric column. Every record
/// must share the base record's grid.
pub fn compare_csv(records: &[RunRecord]) -> Result<String> {
    if records.len() < 2 {
        return Err(EraError::InvalidConfig("compare needs at least two records".into()));
    }
    let base = &records[0];
    let key = base
        .grid_key()
        .ok_or(EraError::EmptyInput("compare: base record has no step column"))?;
    let grid = base.grid();
    for (i, r) in records.iter().enumerate().skip(1) {
        if r.grid_key() != Some(key) || r.grid() != grid {
            return Err(EraError::InvalidConfig(format!(
                "record {i} has a different {key} grid than record 0"
            )));
        }
    }
    let cols: Vec<String> = base
        .numeric_columns()
        .into_iter()
        .filter(|c| records.iter().all(|r| r.numeric_columns().contains(c)))
        .collect();
    let mut out = String::from(key);
    for i in 1..records.len() {
        for c in &cols {
            out.push_str(&format!(",{c}_delta{i}"));
        }
    }
    out.push('\n');
    let base_cols: Vec<Vec<Option<f64>>> = cols.iter().map(|c| base.column(c)).collect();
    let other_cols: Vec<Vec<Vec<Option<f64>>>> = records[1..]
        .iter()
        .map(|r| cols.iter().map(|c| r.column(c)).collect())
        .collect();
    for (row, g) in grid.iter().enumerate() {
        out.push_str(&g.to_string());
        for other in &other_cols {
            for (b, o) in base_cols.iter().zip(other) {
                match (b[row], o[row]) {
                    (Some(x), Some(y)) => out.push_str(&format!(",{}", y - x)),
                    _ => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        step: usize,
        eval_return: f64,
        entropy: Option<f64>,
    }

    fn record(seed: u64, steps: &[usize], ret: f64) -> RunRecord {
        let rows: Vec<Row> = steps
            .iter()
            .map(|&s| Row { step: s, eval_return: ret + s as f64, entropy: None })
            .collect();
        RunRecord::from_rows(RunHeader::new("sac", seed, 10, &"cfg").unwrap(), &rows).unwrap()
    }

    #[test]
    fn round_trip_and_header_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let mut r = record(0, &[1, 2], -3.0);
        r.write(&a).unwrap();
        r.header.created_unix += 100;
        r.write(&b).unwrap();
        let back = RunRecord::read(&a).unwrap();
        assert_eq!(back.rows, r.rows);
        let (ta, tb) = (fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
        assert_ne!(ta, tb);
        assert_eq!(ta.lines().skip(1).collect::<Vec<_>>(), tb.lines().skip(1).collect::<Vec<_>>());
    }

    #[test]
    fn identical_records_compare_to_zero() {
        let r = record(0, &[10, 20, 30], -5.0);
        let csv = compare_csv(&[r.clone(), r]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,eval_return_delta1"));
        for l in lines {
            assert!(l.ends_with(",0"), "{l}");
        }
    }

    #[test]
    fn compare_reports_deltas_and_rejects_mismatched_grids() {
        let csv = compare_csv(&[record(0, &[1, 2], 0.0), record(1, &[1, 2], 2.5)]).unwrap();
        assert!(csv.contains("\n1,2.5\n"));
        assert!(compare_csv(&[record(0, &[1, 2], 0.0), record(0, &[1, 3], 0.0)]).is_err());
        assert!(compare_csv(&[record(0, &[1, 2], 0.0)]).is_err());
    }

    #[test]
    fn summary_is_mean_and_std_of_finals() {
        let csv = summary_csv(&[record(0, &[1], 0.0), record(1, &[1], 2.0)]).unwrap();
        assert_eq!(csv, "metric,mean,std,n\neval_return,2,1,2\n");
    }

    #[test]
    fn malformed_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"step\": 1}\n").unwrap();
        assert!(RunRecord::read(&p).is_err());
        fs::write(&p, "").unwrap();
        assert!(RunRecord::read(&p).is_err());
    }
}
