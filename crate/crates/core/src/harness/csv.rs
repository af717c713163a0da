//! CSV report emission and merging.
//!
//! Schemas are fixed and documented here; numbers always use the dot
//! decimal separator (Rust's float formatting is locale-independent).

use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, SweepRow};
use crate::trainer::CLReport;

pub const MEASURE_HEADER: &str = "method,target,k,rank,lambda,seed,capacity,forgetting";
pub const CONTINUAL_HEADER: &str = "stage,task,accuracy";
pub const SWEEP_HEADER: &str = "k,capacity,forgetting";

/// Identification columns shared by every row of one measurement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub method: String,
    pub k: usize,
    pub rank: usize,
    pub lambda: f64,
    pub seed: u64,
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per adapter, then an aggregate `mean` row, then a `reference`
/// row carrying the same measurements computed on the frozen base weights.
pub fn measure_csv(label: &RunLabel, record: &MetricsRecord) -> String {
    let mut out = String::from(MEASURE_HEADER);
    out.push('\n');
    let id = |method: &str, target: &str| {
        format!(
            "{method},{target},{},{},{},{}",
            label.k,
            label.rank,
            num(label.lambda),
            label.seed
        )
    };
    for (target, m) in &record.per_adapter {
        out.push_str(&format!(
            "{},{},{}\n",
            id(&label.method, &target.to_string()),
            num(m.capacity),
            num(m.forgetting)
        ));
    }
    out.push_str(&format!(
        "{},{},{}\n",
        id(&label.method, "mean"),
        num(record.model_capacity),
        num(record.model_forgetting)
    ));
    out.push_str(&format!(
        "{},{},{}\n",
        id("reference", "mean"),
        num(record.reference_capacity),
        num(record.reference_forgetting)
    ));
    out
}

/// `acc[i][j]` flattened to 1-based (stage, task) rows.
pub fn continual_csv(report: &CLReport) -> String {
    let mut out = String::from(CONTINUAL_HEADER);
    out.push('\n');
    for (i, row) in report.acc.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, j + 1, num(a)));
        }
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, num(r.capacity), num(r.forgetting)));
    }
    out
}

/// Splits CSV text into header fields and data rows; every row must have
/// the header's arity. No quoting — these files never contain commas in
/// values.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invalid_argument("empty csv".to_string()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::invalid_argument(format!(
                "csv row {} has {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Merges named CSV reports into one aligned text table per input, for the
/// summary command.
pub fn summarize(reports: &[(String, String)]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid_argument("nothing to summarize".to_string()));
    }
    let mut out = String::new();
    for (name, content) in reports {
        let (header, rows) = parse_csv(content)?;
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        out.push_str(&format!("== {name} ==\n"));
        let fmt_row = |cells: &[String], widths: &[usize]| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        out.push_str(&fmt_row(&header, &widths));
        out.push('\n');
        for row in &rows {
            out.push_str(&fmt_row(row, &widths));
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::AdapterMetrics;
    use crate::model::AdapterTarget;
    use std::collections::BTreeMap;

    fn record() -> MetricsRecord {
        let mut per_adapter = BTreeMap::new();
        per_adapter.insert(
            AdapterTarget::MlpUp,
            AdapterMetrics { capacity: 1.5, forgetting: 0.25, inputs_used: 3 },
        );
        per_adapter.insert(
            AdapterTarget::MlpDown,
            AdapterMetrics { capacity: 0.5, forgetting: 0.75, inputs_used: 3 },
        );
        MetricsRecord {
            per_adapter,
            model_capacity: 1.0,
            model_forgetting: 0.5,
            reference_forgetting: 2.0,
            reference_capacity: 3.0,
            skipped: vec![],
        }
    }

    #[test]
    fn measure_rows_match_schema_exactly() {
        let label = RunLabel {
            method: "clora".to_string(),
            k: 8,
            rank: 4,
            lambda: 0.5,
            seed: 3,
        };
        let text = measure_csv(&label, &record());
        let expected = "\
method,target,k,rank,lambda,seed,capacity,forgetting
clora,mlp_up,8,4,0.500000,3,1.500000,0.250000
clora,mlp_down,8,4,0.500000,3,0.500000,0.750000
clora,mean,8,4,0.500000,3,1.000000,0.500000
reference,mean,8,4,0.500000,3,3.000000,2.000000
";
        assert_eq!(text, expected);
    }

    #[test]
    fn continual_rows_are_one_based() {
        let report = CLReport {
            acc: vec![vec![0.9], vec![0.5, 0.8]],
            average_final: 0.65,
        };
        let text = continual_csv(&report);
        let expected = "\
stage,task,accuracy
1,1,0.900000
2,1,0.500000
2,2,0.800000
";
        assert_eq!(text, expected);
    }

    #[test]
    fn sweep_rows_keep_order() {
        let rows = vec![
            SweepRow { k: 4, capacity: 2.0, forgetting: 0.4 },
            SweepRow { k: 8, capacity: 1.5, forgetting: 0.3 },
        ];
        let expected = "\
k,capacity,forgetting
4,2.000000,0.400000
8,1.500000,0.300000
";
        assert_eq!(sweep_csv(&rows), expected);
    }

    #[test]
    fn parse_rejects_ragged_rows() {
        assert!(parse_csv("a,b\n1,2\n3").is_err());
        assert!(parse_csv("").is_err());
        let (h, rows) = parse_csv("a,b\n1,2\n\n3,4\n").unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows.len(), 2, "blank lines are skipped");
    }

    #[test]
    fn summary_aligns_columns() {
        let text = summarize(&[(
            "sweep.csv".to_string(),
            "k,capacity,forgetting\n4,2.000000,0.400000\n".to_string(),
        )])
        .unwrap();
        assert!(text.contains("== sweep.csv =="));
        let lines: Vec<&str> = text.lines().collect();
        // Header and data rows end up the same width.
        assert_eq!(lines[1].len(), lines[2].len());
        assert!(lines[1].ends_with("forgetting"));
        assert!(lines[2].ends_with("0.400000"));
    }

    #[test]
    fn ordering_of_mean_row_follows_adapters() {
        let label = RunLabel {
            method: "lora".to_string(),
            k: 0,
            rank: 2,
            lambda: 0.0,
            seed: 1,
        };
        let (header, rows) = parse_csv(&measure_csv(&label, &record())).unwrap();
        assert_eq!(header.join(","), MEASURE_HEADER);
        assert_eq!(rows.last().unwrap()[0], "reference");
        assert_eq!(rows[rows.len() - 2][1], "mean");
    }
}
