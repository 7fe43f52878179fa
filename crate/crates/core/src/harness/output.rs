//! Run records and their CSV forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::twin::Row;
use crate::error::{Error, Result};

/// Metadata plus the time series of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// `key = value` lines written as `#` comments.
    pub metadata: Vec<(String, String)>,
    pub param_names: Vec<String>,
    /// True parameters, present only in test mode.
    pub truth: Option<Vec<f64>>,
    pub rows: Vec<Row>,
    /// Message of the error that ended the run early.
    pub failure: Option<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["t", "state_error_l2", "state_error_rel", "observed_error"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.truth.is_some() {
            cols.push("param_error_rel".into());
        }
        cols.extend(self.param_names.iter().cloned());
        cols.extend(["delta_hat", "cond", "event"].iter().map(|s| s.to_string()));
        cols
    }

    pub fn last(&self) -> Option<&Row> {
        self.rows.last()
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// The CSV text; only the `# wall_time_s` line depends on the machine.
pub fn csv_string(record: &RunRecord) -> String {
    let mut s = String::new();
    for (k, v) in &record.metadata {
        let _ = writeln!(s, "# {k} = {v}");
    }
    if let Some(f) = &record.failure {
        let _ = writeln!(s, "# failure = {f}");
    }
    let _ = writeln!(s, "# wall_time_s = {:.3}", record.wall_time_s);
    let _ = writeln!(s, "{}", record.header().join(","));
    for r in &record.rows {
        let mut cells = vec![
            fmt_f64(r.t),
            fmt_f64(r.state_error_l2),
            fmt_f64(r.state_error_rel),
            fmt_f64(r.observed_error),
        ];
        if record.truth.is_some() {
            cells.push(opt(r.param_error_rel));
        }
        cells.extend(r.params.iter().map(|&p| fmt_f64(p)));
        cells.push(opt(r.delta_hat));
        cells.push(opt(r.cond));
        cells.push(r.event.replace(',', ";"));
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn emit_csv(record: &RunRecord, path: &Path) -> Result<()> {
    fs::write(path, csv_string(record)).map_err(|e| Error::io(path, e))
}

/// `log10(max(x, 1e-16))`.
pub fn log10_clamped(x: f64) -> f64 {
    if x > 1e-16 {
        x.log10()
    } else {
        -16.0
    }
}

/// Plot-ready columns: time against log10 state, observed and parameter
/// errors, the last per parameter when the truth is known.
pub fn plot_data_string(record: &RunRecord) -> String {
    let mut s = String::new();
    let mut head = vec!["t".to_string(), "log10_state_error_rel".into(), "log10_observed_error".into()];
    if let Some(_) = &record.truth {
        head.push("log10_param_error_rel".into());
        head.extend(record.param_names.iter().map(|n| format!("log10_rel_error_{n}")));
    }
    let _ = writeln!(s, "{}", head.join(","));
    for r in &record.rows {
        let mut cells = vec![
            fmt_f64(r.t),
            fmt_f64(log10_clamped(r.state_error_rel)),
            fmt_f64(log10_clamped(r.observed_error)),
        ];
        if let Some(truth) = &record.truth {
            cells.push(fmt_f64(log10_clamped(r.param_error_rel.unwrap_or(f64::NAN))));
            for (p, t) in r.params.iter().zip(truth) {
                cells.push(fmt_f64(log10_clamped((p - t).abs() / t.abs())));
            }
        }
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn emit_plot_data(record: &RunRecord, path: &Path) -> Result<()> {
    fs::write(path, plot_data_string(record)).map_err(|e| Error::io(path, e))
}

/// A parsed CSV: metadata, header and rows of optional numbers plus the
/// event column.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedCsv {
    pub metadata: Vec<(String, String)>,
    pub header: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub events: Vec<String>,
}

pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut metadata = Vec::new();
    let mut header = None;
    let mut values = Vec::new();
    let mut events = Vec::new();
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix("# ") {
            let (k, v) = meta
                .split_once(" = ")
                .ok_or_else(|| Error::config(format!("bad metadata line `{line}`")))?;
            metadata.push((k.to_string(), v.to_string()));
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        match &header {
            None => header = Some(cells.iter().map(|c| c.to_string()).collect::<Vec<_>>()),
            Some(h) => {
                if cells.len() != h.len() {
                    return Err(Error::config(format!("row has {} cells, header has {}", cells.len(), h.len())));
                }
                let (last, nums) = cells.split_last().expect("non-empty row");
                let row = nums
                    .iter()
                    .map(|c| {
                        if c.is_empty() {
                            Ok(None)
                        } else {
                            c.parse::<f64>()
                                .map(Some)
                                .map_err(|_| Error::config(format!("bad number `{c}`")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                values.push(row);
                events.push(last.to_string());
            }
        }
    }
    Ok(ParsedCsv {
        metadata,
        header: header.ok_or_else(|| Error::config("CSV has no header"))?,
        values,
        events,
    })
}
