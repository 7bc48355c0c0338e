//! Markdown and CSV tables from metric rows.

use std::fmt::Write as _;
use std::path::Path;

use crate::runner::{FoldId, MetricRow};
use crate::RunError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "md" | "markdown" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

/// `"0.766 ± 0.012 (p = 0.062)"`; p-values below 0.01 print as
/// `(p < 0.010)`. Best-group cells are wrapped in `**`.
pub fn format_cell(mean: f64, std: f64, p: f64, best: bool) -> String {
    let p_text = if p.is_nan() {
        "p = n/a".to_owned()
    } else if p < 0.01 {
        "p < 0.010".to_owned()
    } else {
        format!("p = {p:.3}")
    };
    let cell = format!("{mean:.3} ± {std:.3} ({p_text})");
    if best {
        format!("**{cell}**")
    } else {
        cell
    }
}

type TableKey = (String, String, String, String);

fn table_key(r: &MetricRow) -> TableKey {
    (r.setting.clone(), r.task.clone(), r.subset.clone(), r.metric.clone())
}

struct Table<'a> {
    key: TableKey,
    models: Vec<&'a str>,
    columns: Vec<FoldId>,
    rows: Vec<&'a MetricRow>,
}

fn tables(rows: &[MetricRow]) -> Vec<Table<'_>> {
    let mut out: Vec<Table> = Vec::new();
    for r in rows {
        let key = table_key(r);
        let idx = match out.iter().position(|t| t.key == key) {
            Some(i) => i,
            None => {
                out.push(Table {
                    key,
                    models: Vec::new(),
                    columns: Vec::new(),
                    rows: Vec::new(),
                });
                out.len() - 1
            }
        };
        let t = &mut out[idx];
        if !t.models.contains(&r.model.as_str()) {
            t.models.push(&r.model);
        }
        if !t.columns.contains(&r.fold) {
            t.columns.push(r.fold);
        }
        t.rows.push(r);
    }
    for t in &mut out {
        t.columns.sort();
    }
    out
}

fn column_title(f: FoldId) -> String {
    match f {
        FoldId::Fold(i) => format!("Fold {}", i + 1),
        FoldId::Cv => "CV".into(),
    }
}

/// One table per (setting, task, subset, metric) with a column per fold and
/// a CV column.
pub fn emit_report(rows: &[MetricRow], format: ReportFormat) -> Result<String, RunError> {
    if rows.is_empty() {
        return Err(RunError::Other("no metric rows to report".into()));
    }
    let tables = tables(rows);
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str("# Results\n\n");
            out.push_str(
                "Cells are mean ± sample standard deviation (not a covariance) with the Wilcoxon signed-rank \
                 p-value against the best model of the column. Fold columns summarize the paired bootstrap replicates and test them pairwise; \
                 the CV column summarizes and tests the per-fold point values. Bold cells are not significantly \
                 different from the best (p > 0.1).\n",
            );
            for t in &tables {
                let (setting, task, subset, metric) = &t.key;
                let _ = write!(out, "\n## {setting} / {task} / {subset} / {metric}\n\n| Model |");
                for c in &t.columns {
                    let _ = write!(out, " {} |", column_title(*c));
                }
                out.push_str("\n|---|");
                out.push_str(&"---|".repeat(t.columns.len()));
                out.push('\n');
                for m in &t.models {
                    let _ = write!(out, "| {m} |");
                    for c in &t.columns {
                        let cell = t
                            .rows
                            .iter()
                            .find(|r| r.model == *m && r.fold == *c)
                            .map_or_else(|| "n/a".to_owned(), |r| format_cell(r.boot_mean, r.boot_std, r.p_vs_best, r.is_best));
                        let _ = write!(out, " {cell} |");
                    }
                    out.push('\n');
                }
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["setting", "task", "subset", "metric", "model", "column", "cell"])?;
            for t in &tables {
                let (setting, task, subset, metric) = &t.key;
                for r in &t.rows {
                    w.write_record([
                        setting.as_str(),
                        task,
                        subset,
                        metric,
                        &r.model,
                        &column_title(r.fold),
                        &format_cell(r.boot_mean, r.boot_std, r.p_vs_best, r.is_best),
                    ])?;
                }
            }
            out = String::from_utf8(w.into_inner().map_err(|e| RunError::Other(e.to_string()))?)
                .map_err(|e| RunError::Other(e.to_string()))?;
        }
    }
    Ok(out)
}

/// Reads `metrics.csv` written by [`crate::write_outputs`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, RunError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| RunError::Other(format!("{}: row {}: bad {what}", path.display(), i + 2));
        if rec.len() != 11 {
            return Err(bad("column count"));
        }
        let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
        rows.push(MetricRow {
            setting: rec[0].to_owned(),
            task: rec[1].to_owned(),
            subset: rec[2].to_owned(),
            model: rec[3].to_owned(),
            fold: FoldId::parse(&rec[4]).ok_or_else(|| bad("fold"))?,
            metric: rec[5].to_owned(),
            point: num(6, "point")?,
            boot_mean: num(7, "boot_mean")?,
            boot_std: num(8, "boot_std")?,
            p_vs_best: num(9, "p_vs_best")?,
            is_best: rec[10].parse().map_err(|_| bad("is_best"))?,
        });
    }
    Ok(rows)
}
