//! Versioned JSON reports and CSV sweep curves.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Envelope every command emits: resolved config, its hash, machine info,
/// and a command-specific payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub machine: MachineInfo,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl MachineInfo {
    pub fn current(threads: usize) -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads,
        }
    }
}

impl Report {
    pub fn new(
        command: &str,
        config_hash: String,
        config: BTreeMap<String, String>,
        payload: serde_json::Value,
    ) -> Self {
        Self {
            schema: "report/1".into(),
            command: command.into(),
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            config,
            machine: MachineInfo::current(1),
            payload,
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Write a sweep curve as CSV with a leading schema comment row.
pub fn write_csv(
    path: &Path,
    columns: &[&str],
    rows: &[Vec<f64>],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# schema: sweep/1")?;
    writeln!(w, "{}", columns.join(","))?;
    for row in rows {
        let text: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", text.join(","))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let config = crate::harness::TrainConfig::default();
        let report = Report::new(
            "verify",
            config.config_hash(),
            config.resolved(),
            serde_json::json!({"suites": 3}),
        );
        report.write(&path).unwrap();
        let back = Report::read(&path).unwrap();
        assert_eq!(back.schema, "report/1");
        assert_eq!(back.command, "verify");
        assert_eq!(back.config_hash, report.config_hash);
        assert_eq!(back.payload["suites"], 3);
    }

    #[test]
    fn csv_sweep_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_csv(
            &path,
            &["sigma", "accuracy"],
            &[vec![0.0, 0.9], vec![0.01, 0.85]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema: sweep/1\nsigma,accuracy\n0,0.9\n"));
    }
}
