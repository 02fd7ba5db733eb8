//! Aggregation of run records across seeds: mean and standard deviation of
//! the discovered topology (per-layer widths), parameter count, and test
//! accuracy.

use serde::{Deserialize, Serialize};

use widenet::error::{Error, Result};

use crate::record::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub stddev: f64,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn of(values: Vec<f64>) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, stddev, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub final_params: Aggregate,
    pub test_accuracy: Aggregate,
    /// One aggregate per growable layer, in layer order.
    pub widths: Vec<Aggregate>,
}

pub fn aggregate(records: &[RunRecord]) -> Result<TopologyReport> {
    if records.is_empty() {
        return Err(Error::Config("no records to aggregate".into()));
    }
    let layers = records[0].final_state.widths.len();
    for r in records {
        if r.final_state.widths.len() != layers {
            return Err(Error::Config(format!(
                "records disagree on layer count ({} vs {layers}); are they from one configuration?",
                r.final_state.widths.len()
            )));
        }
    }
    let widths = (0..layers)
        .map(|i| Aggregate::of(records.iter().map(|r| r.final_state.widths[i] as f64).collect()))
        .collect();
    Ok(TopologyReport {
        runs: records.len(),
        seeds: records.iter().map(|r| r.seed).collect(),
        final_params: Aggregate::of(
            records.iter().map(|r| r.final_state.params as f64).collect(),
        ),
        test_accuracy: Aggregate::of(
            records.iter().map(|r| r.final_state.test_accuracy).collect(),
        ),
        widths,
    })
}

pub fn render_table(report: &TopologyReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(|s| s.to_string()).collect();
    writeln!(out, "runs: {} (seeds {})", report.runs, seeds.join(", ")).unwrap();
    writeln!(
        out,
        "final params:  mean {:.1}  stddev {:.1}",
        report.final_params.mean, report.final_params.stddev
    )
    .unwrap();
    writeln!(
        out,
        "test accuracy: mean {:.4}  stddev {:.4}",
        report.test_accuracy.mean, report.test_accuracy.stddev
    )
    .unwrap();
    writeln!(out, "widths per growable layer:").unwrap();
    for (i, w) in report.widths.iter().enumerate() {
        writeln!(out, "  g{i}: mean {:.2}  stddev {:.2}", w.mean, w.stddev).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::FinalState;
    use std::collections::BTreeMap;

    fn record(seed: u64, widths: Vec<usize>, params: usize, acc: f64) -> RunRecord {
        RunRecord {
            mode: "expand".into(),
            config_hash: "00".repeat(32),
            seed,
            overrides: vec![],
            epochs: vec![],
            expansions: Some(0),
            final_state: FinalState {
                params,
                widths,
                train_loss: 0.1,
                train_accuracy: 1.0,
                test_loss: 0.2,
                test_accuracy: acc,
            },
            artifacts: BTreeMap::new(),
        }
    }

    #[test]
    fn aggregates_mean_and_sample_stddev() {
        let records = vec![
            record(1, vec![2, 4], 100, 0.9),
            record(2, vec![4, 6], 200, 0.8),
        ];
        let report = aggregate(&records).unwrap();
        assert_eq!(report.runs, 2);
        assert_eq!(report.final_params.mean, 150.0);
        // Sample stddev of {100, 200} is sqrt(5000).
        assert!((report.final_params.stddev - 5000f64.sqrt()).abs() < 1e-12);
        assert_eq!(report.widths[0].mean, 3.0);
        assert_eq!(report.widths[1].mean, 5.0);
        let table = render_table(&report);
        assert!(table.contains("seeds 1, 2"));
        assert!(table.contains("g1"));
    }

    #[test]
    fn mismatched_layer_counts_are_rejected() {
        let records = vec![record(1, vec![2, 4], 100, 0.9), record(2, vec![4], 200, 0.8)];
        assert!(aggregate(&records).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn single_run_has_zero_stddev() {
        let report = aggregate(&[record(3, vec![5], 50, 0.7)]).unwrap();
        assert_eq!(report.final_params.stddev, 0.0);
        assert_eq!(report.widths[0].stddev, 0.0);
    }
}
