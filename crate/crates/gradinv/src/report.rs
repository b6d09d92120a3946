//! CSV result files and the stage manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Error;

/// A CSV row type with a fixed column list.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(rename = "run-id")]
    pub run_id: String,
    pub slot: usize,
    /// Dataset index of the ground-truth sample the slot was scored against.
    #[serde(rename = "truth-index")]
    pub truth_index: usize,
    #[serde(rename = "psnr-db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

impl CsvRow for ResultRow {
    const HEADER: &'static [&'static str] = &["run-id", "slot", "truth-index", "psnr-db", "ssim"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    #[serde(rename = "run-id")]
    pub run_id: String,
    pub mode: String,
    #[serde(rename = "local-steps")]
    pub local_steps: usize,
    pub iterations: usize,
    #[serde(rename = "seconds-per-iteration")]
    pub seconds_per_iteration: f64,
}

impl CsvRow for TimingRow {
    const HEADER: &'static [&'static str] = &["run-id", "mode", "local-steps", "iterations", "seconds-per-iteration"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    #[serde(rename = "run-id")]
    pub run_id: String,
    pub iteration: usize,
    pub objective: f64,
    pub best: f64,
}

impl CsvRow for TraceRow {
    const HEADER: &'static [&'static str] = &["run-id", "iteration", "objective", "best"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    #[serde(rename = "record-a")]
    pub record_a: usize,
    #[serde(rename = "slot-a")]
    pub slot_a: usize,
    #[serde(rename = "record-b")]
    pub record_b: usize,
    #[serde(rename = "slot-b")]
    pub slot_b: usize,
    #[serde(rename = "label-a")]
    pub label_a: usize,
    #[serde(rename = "label-b")]
    pub label_b: usize,
    pub score: f64,
    pub fallback: bool,
    pub correct: bool,
}

impl CsvRow for MatchRow {
    const HEADER: &'static [&'static str] = &[
        "record-a", "slot-a", "record-b", "slot-b", "label-a", "label-b", "score", "fallback", "correct",
    ];
}

/// Writes `rows` under a header line; the header is written even when there
/// are no rows.
pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Append-only plain-text stage log.
#[derive(Clone, Debug)]
pub struct Manifest {
    path: std::path::PathBuf,
}

impl Manifest {
    /// Starts a fresh `MANIFEST` in `dir`.
    pub fn create(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        let path = dir.join("MANIFEST");
        fs::write(&path, "")?;
        Ok(Manifest { path })
    }

    pub fn log(&self, line: &str) -> Result<(), Error> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Runs `f` as a named stage and records its outcome.
    pub fn stage<T>(&self, name: &str, f: impl FnOnce() -> Result<T, Error>) -> Result<T, Error> {
        match f() {
            Ok(v) => {
                self.log(&format!("{name}: ok"))?;
                Ok(v)
            }
            Err(e) => {
                self.log(&format!("{name}: failed: {e}"))?;
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_round_trip_with_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_csv::<ResultRow>(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "run-id,slot,truth-index,psnr-db,ssim\n");
        let rows = vec![ResultRow {
            run_id: "single-e0-r1".into(),
            slot: 0,
            truth_index: 7,
            psnr_db: 21.5,
            ssim: 0.25,
        }];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv::<ResultRow>(&path).unwrap(), rows);
    }

    #[test]
    fn manifest_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::create(dir.path()).unwrap();
        m.stage("simulate", || Ok(())).unwrap();
        let err = m.stage::<()>("attack", || Err(Error::Data("boom".into())));
        assert!(err.is_err());
        let text = fs::read_to_string(dir.path().join("MANIFEST")).unwrap();
        assert_eq!(text, "simulate: ok\nattack: failed: data error: boom\n");
    }
}
