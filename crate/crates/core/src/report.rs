//! CSV and aligned-text rendering of reports, plus run manifests.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{AttackRow, RobustnessReport, SmoothingRow};

pub const ROBUSTNESS_HEADER: &str = "model,attack_norm,epsilon,steps,accuracy";

/// Header row plus string cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        std::iter::once(&self.headers).chain(&self.rows).map(|r| format!("{}\n", r.join(","))).collect()
    }

    /// Columns padded to their widest cell; the first is left aligned, the rest right aligned.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| std::iter::once(&self.headers).chain(&self.rows).map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let line = |r: &Vec<String>| {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            format!("{}\n", cells.join("  ").trim_end())
        };
        let rule = format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        let mut out = line(&self.headers);
        out.push_str(&rule);
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    /// Write `<stem>.csv` and `<stem>.txt` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), &self.to_csv())?;
        write_file(&dir.join(format!("{stem}.txt")), &self.to_text())
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn fmt_accuracy(a: f64) -> String {
    format!("{a:.2}")
}

/// One clean row (`attack_norm = none`) and one row per attack, per report.
pub fn robustness_csv(reports: &[RobustnessReport]) -> String {
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for r in reports {
        out.push_str(&format!("{},none,0,0,{}\n", r.model, fmt_accuracy(r.clean_accuracy)));
        for row in &r.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.model, row.attack_norm, row.epsilon, row.steps, fmt_accuracy(row.accuracy)));
        }
    }
    out
}

/// Inverse of [`robustness_csv`]; seed and dataset are not stored and come back empty.
pub fn parse_robustness_csv(text: &str) -> Result<Vec<RobustnessReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ROBUSTNESS_HEADER) {
        return Err(Error::Invalid(format!("robustness CSV must start with `{ROBUSTNESS_HEADER}`")));
    }
    let mut reports: Vec<RobustnessReport> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Invalid(format!("robustness CSV line {}: {what}", n + 2));
        let cells: Vec<&str> = line.split(',').collect();
        let [model, norm, eps, steps, acc] = cells[..] else {
            return Err(bad("expected 5 fields"));
        };
        let accuracy: f64 = acc.parse().map_err(|_| bad("bad accuracy"))?;
        if norm == "none" {
            reports.push(RobustnessReport { model: model.to_string(), seed: 0, dataset: String::new(), clean_accuracy: accuracy, rows: Vec::new() });
            continue;
        }
        let report = reports.iter_mut().rev().find(|r| r.model == model).ok_or_else(|| bad("attack row before its clean row"))?;
        report.rows.push(AttackRow {
            attack_norm: norm.to_string(),
            epsilon: eps.parse().map_err(|_| bad("bad epsilon"))?,
            steps: steps.parse().map_err(|_| bad("bad steps"))?,
            accuracy,
        });
    }
    Ok(reports)
}

fn norm_rank(label: &str) -> usize {
    ["linf", "l2", "l1", "cw-linf"].iter().position(|l| *l == label).unwrap_or(4)
}

/// Column key of an attack row: seen (`linf`) columns first, then unseen ones,
/// each group by norm and epsilon.
fn column_order(row: &AttackRow) -> (usize, String, u64, usize) {
    (norm_rank(&row.attack_norm), row.attack_norm.clone(), row.epsilon.to_bits(), row.steps)
}

fn column_name(row: &AttackRow) -> String {
    format!("{}@{}", row.attack_norm, trim_float(row.epsilon))
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Table with columns `model, A_nat`, then the seen and unseen attacks.
///
/// Column order depends only on the set of attacks, not on report or row order.
pub fn robustness_table(reports: &[RobustnessReport]) -> Table {
    let mut cols: Vec<&AttackRow> = reports.iter().flat_map(|r| &r.rows).collect();
    cols.sort_by(|a, b| column_order(a).cmp(&column_order(b)));
    cols.dedup_by(|a, b| column_order(a) == column_order(b));
    let mut headers = vec!["model".to_string(), "A_nat".to_string()];
    headers.extend(cols.iter().map(|c| column_name(c)));
    let mut t = Table { headers, rows: Vec::new() };
    for r in reports {
        let mut row = vec![r.model.clone(), fmt_accuracy(r.clean_accuracy)];
        for c in &cols {
            let cell = r.rows.iter().find(|x| column_order(x) == column_order(c)).map_or("-".to_string(), |x| fmt_accuracy(x.accuracy));
            row.push(cell);
        }
        t.push(row);
    }
    t
}

/// Write the table as `<stem>.txt`/`<stem>.csv` and the raw rows as `<stem>_rows.csv`.
pub fn emit_table(reports: &[RobustnessReport], dir: &Path, stem: &str) -> Result<()> {
    robustness_table(reports).write(dir, stem)?;
    write_file(&dir.join(format!("{stem}_rows.csv")), &robustness_csv(reports))
}

pub fn smoothing_table(rows: &[SmoothingRow]) -> Table {
    let mut t = Table::new(&["n_samples", "clean_accuracy", "robust_accuracy"]);
    for r in rows {
        t.push(vec![r.n_samples.to_string(), fmt_accuracy(r.clean_accuracy), r.robust_accuracy.map_or("-".into(), fmt_accuracy)]);
    }
    t
}

/// `key=value` lines identifying a run.
pub fn manifest(cfg: &ExperimentConfig) -> String {
    format!(
        "command={}\nconfig_hash={}\nseed={}\nprecision={}\nversion={}\n",
        cfg.command,
        cfg.hash(),
        cfg.seed,
        <crate::Real as crate::tensor::Element>::DTYPE,
        env!("CARGO_PKG_VERSION")
    )
}
