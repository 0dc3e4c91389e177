//! Summary-table arithmetic: relative reductions of selective MSE against
//! no-drop and random-selection baselines, averaged across datasets.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("summary table has no rows")]
    Empty,
    #[error("baseline value {0} must be positive")]
    NonPositiveBaseline(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dataset-level MSE for one forecaster family (e.g. zero-shot): no drop,
/// random drop and shapelet-guided drop at the same coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub no_drop: f64,
    pub random: f64,
    pub shapelet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub primary: MethodScores,
    /// Second forecaster (e.g. fine-tuned), when available.
    pub secondary: Option<MethodScores>,
}

/// `100 * (baseline - value) / baseline`.
pub fn reduction_pct(baseline: f64, value: f64) -> Result<f64, ReportError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(ReportError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (baseline - value) / baseline)
}

impl MethodScores {
    /// Shapelet-selection reduction relative to no drop.
    pub fn reduction_vs_no_drop(&self) -> Result<f64, ReportError> {
        reduction_pct(self.no_drop, self.shapelet)
    }

    /// Shapelet-selection reduction relative to random selection.
    pub fn margin_over_random(&self) -> Result<f64, ReportError> {
        reduction_pct(self.random, self.shapelet)
    }
}

/// Per-dataset reductions and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub per_dataset: Vec<(String, f64)>,
    pub mean: f64,
}

fn summarize<F>(rows: &[ComparisonRow], f: F) -> Result<Option<ReductionSummary>, ReportError>
where
    F: Fn(&ComparisonRow) -> Option<Result<f64, ReportError>>,
{
    let mut per_dataset = Vec::new();
    for row in rows {
        match f(row) {
            Some(v) => per_dataset.push((row.dataset.clone(), v?)),
            None => return Ok(None),
        }
    }
    if per_dataset.is_empty() {
        return Err(ReportError::Empty);
    }
    let mean = per_dataset.iter().map(|(_, v)| v).sum::<f64>() / per_dataset.len() as f64;
    Ok(Some(ReductionSummary { per_dataset, mean }))
}

/// Mean reduction of shapelet selection vs. no drop for the primary forecaster.
pub fn average_reduction(rows: &[ComparisonRow]) -> Result<ReductionSummary, ReportError> {
    summarize(rows, |r| Some(r.primary.reduction_vs_no_drop()))
        .map(|s| s.expect("primary scores always present"))
}

/// Same for the secondary forecaster; `None` if any row lacks it.
pub fn average_reduction_secondary(
    rows: &[ComparisonRow],
) -> Result<Option<ReductionSummary>, ReportError> {
    summarize(rows, |r| r.secondary.map(|s| s.reduction_vs_no_drop()))
}

/// Largest margin of shapelet over random selection, `(dataset, pct)`.
pub fn best_margin_over_random(
    rows: &[ComparisonRow],
    secondary: bool,
) -> Result<Option<(String, f64)>, ReportError> {
    let mut best: Option<(String, f64)> = None;
    for row in rows {
        let scores = if secondary {
            row.secondary
        } else {
            Some(row.primary)
        };
        let Some(scores) = scores else { continue };
        let m = scores.margin_over_random()?;
        if best.as_ref().is_none_or(|(_, b)| m > *b) {
            best = Some((row.dataset.clone(), m));
        }
    }
    Ok(best)
}

/// Reads a comparison table. Columns are found by header name: `dataset`,
/// `no_drop`, `random`, `shapelet` (each optionally suffixed `_mse`) for the
/// primary forecaster and the same names suffixed `_2` for a secondary one.
/// Run summaries written by the pipeline have this layout, and so does a
/// hand-written table of published numbers.
pub fn read_comparison_csv(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?);
    let header = reader.headers()?.clone();
    let find = |name: &str, suffix: &str| {
        header
            .iter()
            .position(|h| h == format!("{name}{suffix}") || h == format!("{name}_mse{suffix}"))
    };
    let missing = |name: &str| ReportError::Parse {
        row: 0,
        message: format!("header has no '{name}' column"),
    };
    let dataset = header
        .iter()
        .position(|h| h == "dataset")
        .ok_or_else(|| missing("dataset"))?;
    let columns = |suffix: &str| -> Option<[usize; 3]> {
        Some([
            find("no_drop", suffix)?,
            find("random", suffix)?,
            find("shapelet", suffix)?,
        ])
    };
    let primary_cols = columns("").ok_or_else(|| missing("no_drop/random/shapelet"))?;
    let secondary_cols = columns("_2");

    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, ReportError> {
            cell(i).parse().map_err(|_| ReportError::Parse {
                row,
                message: format!("column '{}': cannot parse '{}'", &header[i], cell(i)),
            })
        };
        let scores = |[a, b, c]: [usize; 3]| -> Result<MethodScores, ReportError> {
            Ok(MethodScores {
                no_drop: num(a)?,
                random: num(b)?,
                shapelet: num(c)?,
            })
        };
        let secondary = match secondary_cols {
            Some(cols) if !cols.iter().all(|&i| cell(i).is_empty()) => Some(scores(cols)?),
            _ => None,
        };
        rows.push(ComparisonRow {
            dataset: cell(dataset).to_string(),
            primary: scores(primary_cols)?,
            secondary,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(rows)
}

/// Writes per-dataset reductions and margins plus a closing `mean` row.
pub fn write_reduction_table(
    rows: &[ComparisonRow],
    path: impl AsRef<Path>,
) -> Result<(), ReportError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let has_secondary = rows.iter().all(|r| r.secondary.is_some());
    let mut header = "dataset,reduction_pct,margin_over_random_pct".to_string();
    if has_secondary {
        header.push_str(",reduction_pct_2,margin_over_random_pct_2");
    }
    writeln!(out, "{header}")?;
    let mut sums = [0.0; 4];
    for r in rows {
        let mut cells = vec![
            r.primary.reduction_vs_no_drop()?,
            r.primary.margin_over_random()?,
        ];
        if let (true, Some(s)) = (has_secondary, r.secondary) {
            cells.push(s.reduction_vs_no_drop()?);
            cells.push(s.margin_over_random()?);
        }
        for (acc, v) in sums.iter_mut().zip(&cells) {
            *acc += v;
        }
        let text: Vec<String> = cells.iter().map(f64::to_string).collect();
        writeln!(out, "{},{}", r.dataset, text.join(","))?;
    }
    let width = if has_secondary { 4 } else { 2 };
    let means: Vec<String> = sums[..width]
        .iter()
        .map(|s| (s / rows.len().max(1) as f64).to_string())
        .collect();
    writeln!(out, "mean,{}", means.join(","))?;
    out.flush()?;
    Ok(())
}
