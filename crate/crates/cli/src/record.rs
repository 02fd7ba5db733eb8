//! Run records: one JSON document per run holding everything needed to check
//! a replay.
//!
//! `record.json` is a pure function of (config file, seed, CLI overrides), so
//! re-running a command produces a byte-identical file. Wall-clock time, which
//! cannot be reproducible, lives in a sibling `timing.json` instead.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use widenet::error::{Error, Result};

/// One epoch as recorded in `record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEpoch {
    /// Epochs completed since the run began (restarts included).
    pub epoch: usize,
    /// Epochs since the last re-initialization; present for expansion runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub params: usize,
    /// Widths of the growable layers, in layer order.
    pub widths: Vec<usize>,
}

/// Evaluation of the network the run ends with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub params: usize,
    pub widths: Vec<usize>,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// "train", "expand" or "prune".
    pub mode: String,
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
    pub seed: u64,
    /// CLI flags that overrode config values, as `name=value` strings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<String>,
    pub epochs: Vec<RecordEpoch>,
    /// Expansion events fired; present for expansion runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansions: Option<usize>,
    #[serde(rename = "final")]
    pub final_state: FinalState,
    /// Output files of the run, keyed by role, as paths relative to the run
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

/// Serialize as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Wall-clock time goes into its own file so `record.json` stays replayable.
pub fn write_timing(dir: &Path, wall_seconds: f64) -> Result<()> {
    let text = format!("{{\n  \"wall_seconds\": {wall_seconds:.3}\n}}\n");
    std::fs::write(dir.join("timing.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunRecord {
        RunRecord {
            mode: "train".into(),
            config_hash: "ab".repeat(32),
            seed: 7,
            overrides: vec![],
            epochs: vec![RecordEpoch {
                epoch: 0,
                t: None,
                lr: 0.05,
                train_loss: 0.7,
                train_accuracy: 0.5,
                test_loss: None,
                test_accuracy: None,
                params: 42,
                widths: vec![1, 1],
            }],
            expansions: None,
            final_state: FinalState {
                params: 42,
                widths: vec![1, 1],
                train_loss: 0.6,
                train_accuracy: 0.6,
                test_loss: 0.65,
                test_accuracy: 0.55,
            },
            artifacts: BTreeMap::from([("checkpoint".into(), "checkpoint.bin".into())]),
        }
    }

    #[test]
    fn record_round_trips_and_serializes_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let record = sample();
        write_json(&path, &record).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(read_record(&path).unwrap(), record);
        write_json(&path, &record).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains("\"final\""), "final state keeps its serialized name");
        assert!(!text.contains("overrides"), "empty overrides are omitted");
    }

    #[test]
    fn timing_lives_outside_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_timing(dir.path(), 1.5).unwrap();
        let text = std::fs::read_to_string(dir.path().join("timing.json")).unwrap();
        assert!(text.contains("\"wall_seconds\": 1.500"));
    }
}
