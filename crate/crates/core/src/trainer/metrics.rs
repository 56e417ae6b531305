use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation snapshot. Columns appear in the CSV in field order;
/// metrics that do not apply to a run are left blank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub id_test_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub bridge_rate_among_correct: Option<f64>,
    pub bridge_rate_overall: Option<f64>,
    pub ood_hop1_accuracy: Option<f64>,
    pub ood_hop2_accuracy: Option<f64>,
    pub new_hop1_accuracy: Option<f64>,
    pub new_hop2_accuracy: Option<f64>,
    pub new_both_accuracy: Option<f64>,
    pub new_hop1_bridge_rate: Option<f64>,
    pub new_hop2_bridge_rate: Option<f64>,
    pub new_both_bridge_rate: Option<f64>,
    pub retained_accuracy: Option<f64>,
    pub eval_sample_size: usize,
    pub probe_sample_size: usize,
    pub wall_clock_seconds: f64,
}

impl MetricsRow {
    /// Copy with the wall clock zeroed, for replay comparisons.
    pub fn without_clock(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    /// Every accuracy and rate, for range checks.
    pub fn fractions(&self) -> Vec<f64> {
        let opt = [
            self.id_test_accuracy,
            self.ood_accuracy,
            self.bridge_rate_among_correct,
            self.bridge_rate_overall,
            self.ood_hop1_accuracy,
            self.ood_hop2_accuracy,
            self.new_hop1_accuracy,
            self.new_hop2_accuracy,
            self.new_both_accuracy,
            self.new_hop1_bridge_rate,
            self.new_hop2_bridge_rate,
            self.new_both_bridge_rate,
            self.retained_accuracy,
        ];
        std::iter::once(self.train_accuracy).chain(opt.into_iter().flatten()).collect()
    }
}

/// Append-only metrics CSV.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    /// Creates the file, or appends to it if it already has a header.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let inner = csv::WriterBuilder::new()
            .has_headers(!existing)
            .from_writer(BufWriter::new(file));
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let io = |e: csv::Error| Error::io(&self.path, std::io::Error::other(e));
        self.inner.serialize(row).map_err(io)?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(&file, 0, format!("{other:?}")),
    })?;
    let mut rows = Vec::new();
    for rec in reader.deserialize::<MetricsRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(&file, line, e.to_string())
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Rewrites `path` keeping only rows with `step <= max_step`.
pub fn truncate_metrics(path: &Path, max_step: u64) -> Result<Vec<MetricsRow>> {
    let rows: Vec<MetricsRow> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.step <= max_step)
        .collect();
    fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    let mut w = MetricsWriter::open(path)?;
    for r in &rows {
        w.append(r)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let a = MetricsRow {
            step: 0,
            train_loss: 7.5,
            ood_accuracy: Some(0.25),
            ..Default::default()
        };
        let b = MetricsRow {
            step: 10,
            retained_accuracy: Some(1.0),
            ..Default::default()
        };
        MetricsWriter::open(&path).unwrap().append(&a).unwrap();
        MetricsWriter::open(&path).unwrap().append(&b).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![a.clone(), b]);
        assert_eq!(truncate_metrics(&path, 5).unwrap(), vec![a]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,train_loss,train_accuracy,id_test_accuracy,ood_accuracy,"));
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&path).unwrap();
        w.append(&MetricsRow::default()).unwrap();
        drop(w);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("5,oops\n");
        fs::write(&path, text).unwrap();
        match read_metrics(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
