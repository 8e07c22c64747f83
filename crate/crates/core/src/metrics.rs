//! NEC, accuracy and per-prediction concept contributions.
//!
//! A class logit decomposes exactly as `logit_c = Σⱼ q_j · W_jc`, so each
//! concept's contribution is its (standardized) value times its weight.
//! Reports list the concepts with nonzero weight for the explained class,
//! sorted by contribution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FcbmError, Result};
use crate::numeric::{argmax, Matrix};

/// Average number of nonzero weights per class. Exact zero test, no epsilon.
pub fn nec(w: &Matrix) -> f64 {
    if w.cols() == 0 {
        return 0.0;
    }
    let nonzero = w.data().iter().filter(|&&x| x != 0.0).count();
    nonzero as f64 / w.cols() as f64
}

/// NEC from per-column support sizes.
pub fn nec_from_supports(sizes: &[usize]) -> f64 {
    if sizes.is_empty() {
        return 0.0;
    }
    sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
}

/// Argmax per row, ties to the lowest class index.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

/// Fraction of rows whose argmax equals the label; 0 for an empty batch.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept: String,
    pub index: usize,
    /// Standardized value, the quantity the head consumes.
    pub value: f64,
    pub raw_value: Option<f64>,
    pub weight: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub class: usize,
    /// Sum of all contributions, before truncation.
    pub logit: f64,
    pub contributions: Vec<Contribution>,
}

/// Contributions of every nonzero-weight concept to `class`, top `k` kept.
pub fn explain(
    values: &[f64],
    raw_values: Option<&[f64]>,
    w: &Matrix,
    names: &[String],
    class: usize,
    k: usize,
) -> Result<Explanation> {
    if k == 0 {
        return Err(FcbmError::Invariant("top-k must be at least 1".into()));
    }
    if class >= w.cols() {
        return Err(FcbmError::Data(format!(
            "class {class} out of range for {} classes",
            w.cols()
        )));
    }
    if values.len() != w.rows() || names.len() != w.rows() {
        return Err(dim_err!(
            "{} values and {} names for {} concepts",
            values.len(),
            names.len(),
            w.rows()
        ));
    }
    if let Some(raw) = raw_values {
        if raw.len() != values.len() {
            return Err(dim_err!("{} raw values for {} concepts", raw.len(), values.len()));
        }
    }
    let mut logit = 0.0;
    let mut contributions = Vec::new();
    for (j, &value) in values.iter().enumerate() {
        let weight = w.get(j, class);
        let contribution = value * weight;
        logit += contribution;
        if weight != 0.0 {
            contributions.push(Contribution {
                concept: names[j].clone(),
                index: j,
                value,
                raw_value: raw_values.map(|r| r[j]),
                weight,
                contribution,
            });
        }
    }
    // stable: equal contributions keep index order
    contributions.sort_by(|a, b| b.contribution.total_cmp(&a.contribution));
    contributions.truncate(k);
    Ok(Explanation {
        class,
        logit,
        contributions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample: usize,
    pub predicted_class: usize,
    pub true_class: Option<usize>,
    pub logit: f64,
    pub top_k: usize,
    pub contributions: Vec<Contribution>,
}

/// Explains the predicted class of one sample.
pub fn explain_sample(
    sample: usize,
    values: &[f64],
    raw_values: Option<&[f64]>,
    w: &Matrix,
    names: &[String],
    true_class: Option<usize>,
    k: usize,
) -> Result<ExplanationReport> {
    if values.len() != w.rows() {
        return Err(dim_err!("{} values for {} concepts", values.len(), w.rows()));
    }
    let logits: Vec<f64> = (0..w.cols())
        .map(|c| values.iter().enumerate().map(|(j, v)| v * w.get(j, c)).sum())
        .collect();
    if logits.is_empty() {
        return Err(FcbmError::Data("weights have no classes".into()));
    }
    let predicted = argmax(&logits);
    let e = explain(values, raw_values, w, names, predicted, k)?;
    Ok(ExplanationReport {
        sample,
        predicted_class: predicted,
        true_class,
        logit: e.logit,
        top_k: k,
        contributions: e.contributions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    TextBars,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text-bars" => Ok(ReportFormat::TextBars),
            other => Err(format!("unknown report format {other:?} (json, csv, text-bars)")),
        }
    }
}

const CSV_HEADER: [&str; 10] = [
    "sample",
    "predicted_class",
    "true_class",
    "rank",
    "concept",
    "index",
    "value",
    "raw_value",
    "weight",
    "contribution",
];

pub fn render_report(reports: &[ExplanationReport], format: ReportFormat, width: usize) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::TextBars => Ok(render_bars(reports, width)),
    }
}

fn render_csv(reports: &[ExplanationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| FcbmError::Data(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        for (rank, c) in r.contributions.iter().enumerate() {
            w.write_record([
                r.sample.to_string(),
                r.predicted_class.to_string(),
                r.true_class.map(|t| t.to_string()).unwrap_or_default(),
                (rank + 1).to_string(),
                c.concept.clone(),
                c.index.to_string(),
                c.value.to_string(),
                c.raw_value.map(|v| v.to_string()).unwrap_or_default(),
                c.weight.to_string(),
                c.contribution.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| FcbmError::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const EIGHTHS: [char; 8] = [' ', '▏', '▎', '▍', '▌', '▋', '▊', '▉'];

/// Bar of `frac·width` cells using eighth-block glyphs.
fn bar(frac: f64, width: usize) -> String {
    let eighths = (frac.clamp(0.0, 1.0) * width as f64 * 8.0).round() as usize;
    let mut s = "█".repeat(eighths / 8);
    if !eighths.is_multiple_of(8) {
        s.push(EIGHTHS[eighths % 8]);
    }
    s
}

fn render_bars(reports: &[ExplanationReport], width: usize) -> String {
    let mut out = String::new();
    for r in reports {
        let truth = r.true_class.map_or("-".to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "sample {}  predicted {}  true {}  logit {:.4}",
            r.sample, r.predicted_class, truth, r.logit
        );
        let name_w = r
            .contributions
            .iter()
            .map(|c| c.concept.chars().count())
            .max()
            .unwrap_or(0);
        let max = r
            .contributions
            .iter()
            .map(|c| c.contribution.abs())
            .fold(0.0, f64::max);
        for c in &r.contributions {
            let frac = if max > 0.0 { c.contribution.abs() / max } else { 0.0 };
            let b = bar(frac, width);
            let pad = width + 1 - b.chars().count();
            let _ = writeln!(
                out,
                "  {:<name_w$}  {}{}{:+.4}",
                c.concept,
                b,
                " ".repeat(pad),
                c.contribution
            );
        }
        out.push('\n');
    }
    out
}

pub fn export_report(
    reports: &[ExplanationReport],
    path: impl AsRef<Path>,
    format: ReportFormat,
    width: usize,
) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(reports, format, width)?;
    fs::write(path, text).map_err(|e| FcbmError::io(path, e))
}
