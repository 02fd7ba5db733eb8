//! Reading run outputs back for plotting.
//!
//! Event logs are JSON-lines files of [`LogRecord`]s; prune curves are the
//! three-column CSV written by the prune command. Malformed rows are reported
//! with their line number. Panels are built on [`svg`](crate::svg).

use std::path::Path;

use widenet::error::{Error, Result};
use widenet::expand::LogRecord;

use crate::svg::{self, Series, VLine};

/// Parse a JSON-lines event log. Blank lines are ignored; anything else must
/// be a valid record.
pub fn read_events(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// One row of a prune-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub removed: f64,
    pub accuracy: f64,
    pub params: f64,
}

pub const CURVE_HEADER: &str = "features_removed,accuracy,params";

/// Parse a prune-curve CSV and check that the removal axis strictly
/// increases.
pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CURVE_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Config(format!(
                "{} line 1: header {header:?}, expected {CURVE_HEADER:?}",
                path.display()
            )))
        }
        None => return Err(Error::Config(format!("{}: empty file", path.display()))),
    }
    let mut rows: Vec<CurveRow> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "{} line {}: {} fields, expected 3",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, name: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("{} line {}: bad {name} {s:?}: {e}", path.display(), i + 1))
            })
        };
        let row = CurveRow {
            removed: parse(fields[0], "features_removed")?,
            accuracy: parse(fields[1], "accuracy")?,
            params: parse(fields[2], "params")?,
        };
        if let Some(prev) = rows.last() {
            if row.removed <= prev.removed {
                return Err(Error::Config(format!(
                    "{} line {}: features_removed {} does not increase (previous {})",
                    path.display(),
                    i + 1,
                    svg::fmt(row.removed),
                    svg::fmt(prev.removed)
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parameter count over wall epochs, with expansion and stability events
/// marked. An event-free (or empty) log renders as a single flat series.
pub fn params_panel(events: &[LogRecord], title: &str) -> String {
    let mut points = Vec::new();
    let mut vlines = Vec::new();
    for record in events {
        match record {
            LogRecord::Epoch { wall_epoch, params, .. } => {
                points.push((*wall_epoch as f64, *params as f64));
            }
            LogRecord::Expansion { wall_epoch, .. } => {
                vlines.push(VLine { x: *wall_epoch as f64, label: "expand" });
            }
            LogRecord::Stability { wall_epoch, .. } => {
                vlines.push(VLine { x: *wall_epoch as f64, label: "stable" });
            }
        }
    }
    let series = vec![Series { label: "params".into(), points }];
    svg::line_panel(title, "wall epoch", "parameters", &series, &vlines)
}

/// Final width of each growable layer, from the last epoch record.
pub fn widths_panel(events: &[LogRecord], title: &str) -> String {
    let widths = events
        .iter()
        .rev()
        .find_map(|record| match record {
            LogRecord::Epoch { widths, .. } => Some(widths.clone()),
            _ => None,
        })
        .unwrap_or_default();
    let bars: Vec<(String, f64)> = widths
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("g{i}"), *w as f64))
        .collect();
    svg::bar_panel(title, "growable layer", "width", &bars)
}

/// Accuracy against removed features, one series per curve.
pub fn prune_panel(curves: &[(String, Vec<CurveRow>)]) -> String {
    let series: Vec<Series> = curves
        .iter()
        .map(|(label, rows)| Series {
            label: label.clone(),
            points: rows.iter().map(|r| (r.removed, r.accuracy)).collect(),
        })
        .collect();
    svg::line_panel("pruning", "features removed", "test accuracy", &series, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn event_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "events.jsonl",
            "{\"event\":\"stability\",\"wall_epoch\":1,\"t\":1,\"step\":4}\nnot json\n",
        );
        let err = read_events(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        std::fs::write(&path, "").unwrap();
        assert!(read_events(&path).unwrap().is_empty());
    }

    #[test]
    fn curve_csv_checks_header_fields_and_monotonicity() {
        let dir = tempfile::tempdir().unwrap();
        let good = write(
            dir.path(),
            "good.csv",
            "features_removed,accuracy,params\n0,0.9,100\n1,0.89,90\n",
        );
        let rows = read_curve_csv(&good).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], CurveRow { removed: 1.0, accuracy: 0.89, params: 90.0 });

        let bad_header = write(dir.path(), "h.csv", "a,b,c\n0,0.9,100\n");
        assert!(read_curve_csv(&bad_header).unwrap_err().to_string().contains("line 1"));

        let bad_field = write(
            dir.path(),
            "f.csv",
            "features_removed,accuracy,params\n0,oops,100\n",
        );
        let err = read_curve_csv(&bad_field).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("accuracy"), "{err}");

        let not_monotone = write(
            dir.path(),
            "m.csv",
            "features_removed,accuracy,params\n0,0.9,100\n2,0.89,90\n1,0.8,80\n",
        );
        let err = read_curve_csv(&not_monotone).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("increase"), "{err}");
    }

    #[test]
    fn empty_event_log_renders_flat_panels() {
        let svg = params_panel(&[], "run");
        assert!(svg.contains("</svg>"));
        let svg = widths_panel(&[], "run");
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn log_with_expansions_marks_events_and_widths() {
        let log = vec![
            LogRecord::Epoch {
                wall_epoch: 0,
                t: 0,
                step: 4,
                lr: 0.05,
                train_loss: 1.0,
                train_accuracy: 0.5,
                test_loss: None,
                test_accuracy: None,
                params: 100,
                widths: vec![1, 1],
            },
            LogRecord::Expansion {
                wall_epoch: 1,
                t: 0,
                step: 6,
                layers: vec![],
                widths: vec![2, 1],
            },
            LogRecord::Epoch {
                wall_epoch: 1,
                t: 0,
                step: 10,
                lr: 0.05,
                train_loss: 0.9,
                train_accuracy: 0.6,
                test_loss: None,
                test_accuracy: None,
                params: 150,
                widths: vec![2, 1],
            },
        ];
        let params = params_panel(&log, "run");
        assert!(params.contains("expand"));
        assert!(params.contains("<polyline"));
        let widths = widths_panel(&log, "run");
        assert!(widths.contains(">g0</text>") && widths.contains(">2</text>"));
    }
}
