//! CSV and JSON emission. Files are written to a temporary sibling and
//! renamed into place.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SweepRecord;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "b",
    "scenario",
    "fidelity",
    "t_swap_ns",
    "trace_error",
    "min_eig",
    "qubit_e_pop_max",
    "wall_time_s",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid(format!("unknown output format `{other}`"))),
        }
    }
}

fn csv_row(r: &SweepRecord) -> [String; 8] {
    [
        r.b.to_string(),
        r.scenario.to_string(),
        r.fidelity.to_string(),
        (r.t_swap * 1e9).to_string(),
        r.trace_error.to_string(),
        r.min_eig.map_or_else(String::new, |v| v.to_string()),
        r.qubit_e_pop_max.to_string(),
        format!("{:.3}", r.wall_time),
    ]
}

/// Renders records in the requested format.
pub fn render(records: &[SweepRecord], format: OutputFormat) -> Result<Vec<u8>> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::invalid(format!("CSV encoding failed: {e}"));
            w.write_record(CSV_HEADER).map_err(io)?;
            for r in records {
                w.write_record(csv_row(r)).map_err(io)?;
            }
            w.into_inner().map_err(|e| Error::invalid(format!("CSV encoding failed: {e}")))
        }
        OutputFormat::Json => {
            let mut out = serde_json::to_vec_pretty(records).map_err(|e| Error::invalid(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Writes `records` to `path` atomically.
pub fn write_records(path: &Path, records: &[SweepRecord], format: OutputFormat) -> Result<()> {
    let bytes = render(records, format)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Scenario;
    use crate::analytic::PhaseFactors;

    fn record(b: f64) -> SweepRecord {
        SweepRecord {
            b,
            scenario: Scenario::II,
            fidelity: 0.995,
            fidelity_raw: 0.995,
            t_swap: 110.25e-9,
            trace_error: 1e-12,
            hermiticity_error: 0.0,
            min_eig: Some(-1e-15),
            qubit_e_pop_max: 0.004,
            wall_time: 1.23456,
            flagged: false,
            steps: 10,
            phases: PhaseFactors {
                phi: vec![1.0, 1.0],
                theta: vec![1.0, 1.0],
            },
        }
    }

    #[test]
    fn csv_layout() {
        let text = String::from_utf8(render(&[record(21.0)], OutputFormat::Csv).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "b,scenario,fidelity,t_swap_ns,trace_error,min_eig,qubit_e_pop_max,wall_time_s"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "21");
        assert_eq!(row[1], "ii");
        assert_eq!(row[7], "1.235");
        assert!(lines.next().is_none());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        std::fs::write(&path, "old").unwrap();
        write_records(&path, &[record(11.0), record(13.0)], OutputFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(v[0]["scenario"], "ii");
        let bad = dir.path().join("missing").join("out.csv");
        assert!(matches!(write_records(&bad, &[], OutputFormat::Csv), Err(Error::Io { .. })));
    }
}
