//! Result tables (CSV + JSON) for incremental runs, evaluations and sweeps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reid_core::eval::EvalReport;
use reid_core::trainer::IncrementalRow;

use crate::error::Result;

pub const RESULTS_HEADER: [&str; 4] = ["dataset", "rank1", "rank20", "map"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub phase: usize,
    pub dataset: String,
    /// Re-evaluation of a task trained in an earlier phase.
    pub reeval: bool,
    pub rank1: f64,
    pub rank20: f64,
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
}

impl ResultRow {
    pub fn new(phase: usize, dataset: &str, reeval: bool, r: &EvalReport) -> Self {
        Self {
            phase,
            dataset: dataset.to_string(),
            reeval,
            rank1: r.rank1,
            rank20: r.rank20,
            map: r.map,
            cmc: r.cmc.clone(),
        }
    }
}

impl From<&IncrementalRow> for ResultRow {
    fn from(r: &IncrementalRow) -> Self {
        Self::new(r.phase, &r.task, r.reeval, &r.report)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultsFile {
    complete: bool,
    rows: Vec<ResultRow>,
}

/// Writes every row as soon as it arrives, so an aborted run leaves its
/// finished rows on disk.
pub struct ResultsWriter {
    csv: csv::Writer<File>,
    csv_path: PathBuf,
    json_path: PathBuf,
    rows: Vec<ResultRow>,
}

impl ResultsWriter {
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut csv = csv::Writer::from_path(&csv_path)?;
        csv.write_record(RESULTS_HEADER)?;
        csv.flush()?;
        let w = Self {
            csv,
            csv_path,
            json_path,
            rows: Vec::new(),
        };
        w.write_json(false)?;
        Ok(w)
    }

    fn write_json(&self, complete: bool) -> Result<()> {
        let file = ResultsFile {
            complete,
            rows: self.rows.clone(),
        };
        fs::write(&self.json_path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        self.csv.write_record([
            row.dataset.clone(),
            row.rank1.to_string(),
            row.rank20.to_string(),
            row.map.to_string(),
        ])?;
        self.csv.flush()?;
        self.rows.push(row);
        self.write_json(false)
    }

    pub fn finish(self) -> Result<Vec<PathBuf>> {
        self.write_json(true)?;
        Ok(vec![self.csv_path, self.json_path])
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }
}

/// `(dataset, rank1, rank20, map)` rows of a results CSV.
pub fn read_results_csv(path: &Path) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(crate::error::CliError::Usage(format!(
            "{} has header {header:?}, expected {RESULTS_HEADER:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub rank1: Option<f64>,
    pub best: bool,
    pub error: Option<String>,
    pub output_dir: PathBuf,
}

/// Sort by value and flag the highest Rank-1 (the first one on ties).
pub fn finalize_sweep(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.rank1.map(|v| (i, v)))
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((i, v)),
        });
    for (i, r) in rows.iter_mut().enumerate() {
        r.best = best.is_some_and(|(b, _)| b == i);
    }
}

pub fn write_sweep(dir: &Path, parameter: &str, rows: &[SweepRow]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("sweep_{parameter}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([parameter, "rank1", "best", "error"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.rank1.map(|v| v.to_string()).unwrap_or_default(),
            r.best.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let json_path = dir.join(format!("sweep_{parameter}.json"));
    let body = serde_json::json!({ "parameter": parameter, "rows": rows });
    fs::write(&json_path, serde_json::to_vec_pretty(&body)?)?;
    Ok(vec![csv_path, json_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, r1: f64) -> ResultRow {
        ResultRow {
            phase: 1,
            dataset: name.into(),
            reeval: false,
            rank1: r1,
            rank20: 1.0,
            map: 0.5,
            cmc: BTreeMap::new(),
        }
    }

    #[test]
    fn rows_are_on_disk_before_finish() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ResultsWriter::create(dir.path(), "results").unwrap();
        w.push(row("a", 0.25)).unwrap();
        let partial = read_results_csv(&dir.path().join("results.csv")).unwrap();
        assert_eq!(partial, [("a".to_string(), 0.25, 1.0, 0.5)]);
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("results.json")).unwrap()).unwrap();
        assert_eq!(json["complete"], false);
        w.push(row("b", 0.75)).unwrap();
        w.finish().unwrap();
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("results.json")).unwrap()).unwrap();
        assert_eq!(json["complete"], true);
        assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn sweep_rows_sorted_with_one_best() {
        let mk = |value: f64, rank1: Option<f64>| SweepRow {
            value,
            rank1,
            best: false,
            error: rank1.is_none().then(|| "failed".to_string()),
            output_dir: PathBuf::new(),
        };
        let mut rows = vec![
            mk(1.3, Some(0.5)),
            mk(0.7, Some(0.8)),
            mk(1.0, None),
            mk(0.9, Some(0.8)),
        ];
        finalize_sweep(&mut rows);
        let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(values, [0.7, 0.9, 1.0, 1.3]);
        let best: Vec<bool> = rows.iter().map(|r| r.best).collect();
        assert_eq!(best, [true, false, false, false]);
    }
}
