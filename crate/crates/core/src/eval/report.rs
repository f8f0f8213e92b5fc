use std::fmt::Write as _;

use super::metrics::MetricKind;
use crate::error::{Error, Result};

/// Column order of the downstream results table.
pub const TABLE1_TASKS: [&str; 8] = ["STS-B", "QNLI", "QQP", "CoLA", "SST-2", "MNLI", "MRPC", "RTE"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub arm: String,
    pub task: String,
    pub metric: MetricKind,
    pub score: f64,
}

impl RunResult {
    pub fn new(arm: impl Into<String>, task: impl Into<String>, metric: MetricKind, score: f64) -> Self {
        Self {
            arm: arm.into(),
            task: task.into(),
            metric,
            score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub metric: MetricKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    /// One entry per column, `None` where the arm has no result.
    pub cells: Vec<Option<Cell>>,
    /// Mean of the present cells.
    pub average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// MNLI halves report into the single MNLI column.
fn column_of(task: &str) -> &str {
    match task {
        "MNLI-m" | "MNLI-mm" => "MNLI",
        t => t,
    }
}

/// Builds the arms × tasks table. When any Table 1 task is present all
/// eight of its columns appear in its order; other tasks follow in first-seen
/// order. The MNLI cell is the mean of the matched and mismatched results.
pub fn build_report(runs: &[RunResult]) -> Result<ReportTable> {
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for r in runs {
        if seen.contains(&(r.arm.as_str(), r.task.as_str())) {
            return Err(Error::invalid(format!("duplicate result for arm {} task {}", r.arm, r.task)));
        }
        if r.task == "MNLI" && runs.iter().any(|o| o.arm == r.arm && o.task.starts_with("MNLI-")) {
            return Err(Error::invalid(format!("arm {} mixes MNLI with its halves", r.arm)));
        }
        seen.push((&r.arm, &r.task));
    }

    let mut columns: Vec<String> = Vec::new();
    if runs.iter().any(|r| TABLE1_TASKS.contains(&column_of(&r.task))) {
        columns.extend(TABLE1_TASKS.iter().map(|s| s.to_string()));
    }
    for r in runs {
        let c = column_of(&r.task);
        if !columns.iter().any(|x| x == c) {
            columns.push(c.to_string());
        }
    }
    let mut arms: Vec<&str> = Vec::new();
    for r in runs {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }

    let rows = arms
        .into_iter()
        .map(|arm| {
            let cells: Vec<Option<Cell>> = columns
                .iter()
                .map(|col| {
                    let hits: Vec<&RunResult> =
                        runs.iter().filter(|r| r.arm == arm && column_of(&r.task) == col).collect();
                    if hits.is_empty() {
                        return None;
                    }
                    Some(Cell {
                        value: hits.iter().map(|r| r.score).sum::<f64>() / hits.len() as f64,
                        metric: hits[0].metric,
                    })
                })
                .collect();
            let present: Vec<f64> = cells.iter().flatten().map(|c| c.value).collect();
            let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            ReportRow {
                arm: arm.to_string(),
                cells,
                average,
            }
        })
        .collect();
    Ok(ReportTable { columns, rows })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl ReportTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["arm".to_string()];
        h.extend(self.columns.iter().cloned());
        h.push("Avg".into());
        h
    }

    /// Scores, then one `metric` row naming each column's metric.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut fields = vec![row.arm.clone()];
            fields.extend(row.cells.iter().map(|c| fmt_value(c.map(|c| c.value))));
            fields.push(fmt_value(row.average));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        let mut metrics = vec!["metric".to_string()];
        for (i, _) in self.columns.iter().enumerate() {
            let m = self.rows.iter().find_map(|r| r.cells[i]).map_or("-", |c| c.metric.as_str());
            metrics.push(m.to_string());
        }
        metrics.push("mean".into());
        out.push_str(&metrics.join(","));
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                let mut f = vec![row.arm.clone()];
                f.extend(row.cells.iter().map(|c| fmt_value(c.map(|c| c.value))));
                f.push(fmt_value(row.average));
                f
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let mut s = String::new();
            for (i, f) in line.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{f:<w$}", w = widths[0]);
                } else {
                    let _ = write!(s, "  {f:>w$}", w = widths[i]);
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_and_mnli_rule() {
        let runs = vec![
            RunResult::new("a", "x", MetricKind::Accuracy, 0.5),
            RunResult::new("a", "y", MetricKind::Accuracy, 0.7),
        ];
        let t = build_report(&runs).unwrap();
        assert!((t.rows[0].average.unwrap() - 0.6).abs() < 1e-15);

        let runs = vec![
            RunResult::new("a", "MNLI-m", MetricKind::Accuracy, 0.70),
            RunResult::new("a", "MNLI-mm", MetricKind::Accuracy, 0.68),
        ];
        let t = build_report(&runs).unwrap();
        assert_eq!(t.header().len(), 10);
        let mnli = t.columns.iter().position(|c| c == "MNLI").unwrap();
        assert!((t.rows[0].cells[mnli].unwrap().value - 0.69).abs() < 1e-12);
    }

    #[test]
    fn duplicates_rejected() {
        let runs = vec![
            RunResult::new("a", "RTE", MetricKind::Accuracy, 0.5),
            RunResult::new("a", "RTE", MetricKind::Accuracy, 0.6),
        ];
        assert!(build_report(&runs).is_err());
    }
}
