//! Token-level precision, recall and F1 per concept (BIO prefixes collapsed)
//! with unweighted macro averages that include `O`, plus table rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Concept, LabelTag, LabeledSequence};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sequence `{id}`: {message}")]
    Misaligned { id: String, message: String },
    #[error("no reports to aggregate")]
    Empty,
}

/// Name of the outside label in reports.
pub const OUTSIDE: &str = "O";

/// Report label names in canonical order.
pub fn label_order() -> impl Iterator<Item = &'static str> {
    Concept::ALL.into_iter().map(Concept::as_str).chain(std::iter::once(OUTSIDE))
}

fn collapsed(tag: LabelTag) -> &'static str {
    tag.concept().map_or(OUTSIDE, Concept::as_str)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub corpus: String,
    /// Fold index, `"mean"` for aggregates, or absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: IndexMap<String, LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    #[serde(default)]
    pub meta: ReportMeta,
}

/// `2pr / (p + r)`, 0 when both are 0.
pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MacroMetrics {
    /// Unweighted means of the listed per-label rows.
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a LabelMetrics> + Clone) -> Self {
        MacroMetrics {
            p: mean(rows.clone().into_iter().map(|m| m.p)),
            r: mean(rows.clone().into_iter().map(|m| m.r)),
            f1: mean(rows.into_iter().map(|m| m.f1)),
        }
    }
}

/// Per-label token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MetricsReport {
    /// Builds a report from per-label counts. Labels with no gold and no
    /// predicted tokens are left out.
    pub fn from_counts(counts: &HashMap<&str, Counts>, meta: ReportMeta) -> Self {
        let mut labels = IndexMap::new();
        for name in label_order() {
            let Some(c) = counts.get(name) else { continue };
            let gold = c.tp + c.fn_;
            let predicted = c.tp + c.fp;
            if gold == 0 && predicted == 0 {
                continue;
            }
            let p = ratio(c.tp, predicted);
            let r = ratio(c.tp, gold);
            labels.insert(
                name.to_string(),
                LabelMetrics {
                    p,
                    r,
                    f1: harmonic(p, r),
                    support: gold,
                },
            );
        }
        let macro_avg = MacroMetrics::of(labels.values());
        MetricsReport { labels, macro_avg, meta }
    }

    /// Aggregate of several reports (typically folds). Each label's metrics
    /// are averaged over the reports that list it and supports are summed;
    /// the macro values are the means of the reports' macro values.
    pub fn mean(reports: &[MetricsReport], meta: ReportMeta) -> Result<Self, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut labels = IndexMap::new();
        for name in label_order() {
            let rows: Vec<&LabelMetrics> = reports.iter().filter_map(|r| r.labels.get(name)).collect();
            if rows.is_empty() {
                continue;
            }
            labels.insert(
                name.to_string(),
                LabelMetrics {
                    p: mean(rows.iter().map(|m| m.p)),
                    r: mean(rows.iter().map(|m| m.r)),
                    f1: mean(rows.iter().map(|m| m.f1)),
                    support: rows.iter().map(|m| m.support).sum(),
                },
            );
        }
        let macro_avg = MacroMetrics {
            p: mean(reports.iter().map(|r| r.macro_avg.p)),
            r: mean(reports.iter().map(|r| r.macro_avg.r)),
            f1: mean(reports.iter().map(|r| r.macro_avg.f1)),
        };
        Ok(MetricsReport { labels, macro_avg, meta })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Counts collapsed-label agreement token by token. Sequences are matched by
/// id, so the result does not depend on corpus order.
pub fn count(gold: &[LabeledSequence], predicted: &[LabeledSequence]) -> Result<HashMap<&'static str, Counts>, EvalError> {
    let by_id: HashMap<&str, &LabeledSequence> = predicted.iter().map(|s| (s.id.as_str(), s)).collect();
    if by_id.len() != predicted.len() {
        let mut seen = std::collections::HashSet::new();
        let dup = predicted.iter().find(|s| !seen.insert(&s.id)).expect("a duplicate exists");
        return Err(EvalError::Misaligned {
            id: dup.id.clone(),
            message: "appears more than once in the predictions".into(),
        });
    }
    let misaligned = |id: &str, message: &str| EvalError::Misaligned {
        id: id.to_string(),
        message: message.to_string(),
    };
    let mut counts: HashMap<&'static str, Counts> = HashMap::new();
    for g in gold {
        let p = by_id.get(g.id.as_str()).ok_or_else(|| misaligned(&g.id, "missing from the predictions"))?;
        let gl = g.labels.as_ref().ok_or_else(|| misaligned(&g.id, "gold sequence is unlabeled"))?;
        let pl = p.labels.as_ref().ok_or_else(|| misaligned(&g.id, "predicted sequence is unlabeled"))?;
        if gl.len() != pl.len() || g.tokens.len() != p.tokens.len() {
            return Err(misaligned(
                &g.id,
                &format!("{} gold tokens but {} predicted", gl.len(), pl.len()),
            ));
        }
        for (&a, &b) in gl.iter().zip(pl) {
            let (a, b) = (collapsed(a), collapsed(b));
            if a == b {
                counts.entry(a).or_default().tp += 1;
            } else {
                counts.entry(a).or_default().fn_ += 1;
                counts.entry(b).or_default().fp += 1;
            }
        }
    }
    if gold.len() != predicted.len() {
        let gold_ids: std::collections::HashSet<&str> = gold.iter().map(|s| s.id.as_str()).collect();
        let extra = predicted.iter().find(|s| !gold_ids.contains(s.id.as_str())).expect("an extra id exists");
        return Err(misaligned(&extra.id, "missing from the gold corpus"));
    }
    Ok(counts)
}

/// Token-level report for aligned gold and predicted corpora.
pub fn evaluate(gold: &[LabeledSequence], predicted: &[LabeledSequence]) -> Result<MetricsReport, EvalError> {
    evaluate_with(gold, predicted, ReportMeta::default())
}

pub fn evaluate_with(
    gold: &[LabeledSequence],
    predicted: &[LabeledSequence],
    meta: ReportMeta,
) -> Result<MetricsReport, EvalError> {
    Ok(MetricsReport::from_counts(&count(gold, predicted)?, meta))
}

/// Two-decimal display rounding, halves away from zero. A tiny slack keeps
/// values such as 0.815 (stored as 0.81499...) rounding up as written.
pub fn round2(v: f64) -> f64 {
    let scaled = v * 100.0;
    (scaled + 0.5 + 1e-9).floor() / 100.0
}

pub fn fmt2(v: f64) -> String {
    format!("{:.2}", round2(v))
}

/// Renders reports side by side: one block of P/R/F1 columns per model, one
/// row per label, then the macro row. Also returns the unrounded values as
/// JSON, keyed by model name.
pub fn render_table(reports: &[MetricsReport], models: &[&str]) -> (String, serde_json::Value) {
    let rows: Vec<&str> = label_order()
        .filter(|l| reports.iter().any(|r| r.labels.contains_key(*l)))
        .collect();
    let label_w = rows.iter().map(|l| l.len()).chain([5]).max().unwrap_or(5);
    let block_w = 3 * 5 + 2;

    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for m in models {
        let _ = write!(out, " | {m:^block_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:label_w$}", "Label");
    for _ in models {
        let _ = write!(out, " | {:>5} {:>5} {:>5}", "P", "R", "F1");
    }
    out.push('\n');
    let rule = "-".repeat(label_w + models.len() * (block_w + 3));
    out.push_str(&rule);
    out.push('\n');
    for label in &rows {
        let _ = write!(out, "{label:label_w$}");
        for r in reports {
            match r.labels.get(*label) {
                Some(m) => {
                    let _ = write!(out, " | {:>5} {:>5} {:>5}", fmt2(m.p), fmt2(m.r), fmt2(m.f1));
                }
                None => {
                    let _ = write!(out, " | {:>5} {:>5} {:>5}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out.push_str(&rule);
    out.push('\n');
    let _ = write!(out, "{:label_w$}", "MACRO");
    for r in reports {
        let m = r.macro_avg;
        let _ = write!(out, " | {:>5} {:>5} {:>5}", fmt2(m.p), fmt2(m.r), fmt2(m.f1));
    }
    out.push('\n');

    let json = serde_json::Value::Object(
        models
            .iter()
            .zip(reports)
            .map(|(m, r)| (m.to_string(), serde_json::to_value(r).expect("reports serialize")))
            .collect(),
    );
    (out, json)
}

/// Renders a grid of P/R/F1 cells: one row per `rows` entry and one block
/// of columns per `columns` entry (the layout of the dictionary-fraction
/// sweep tables).
pub fn render_grid(title: &str, rows: &[String], columns: &[String], cells: &[Vec<MacroMetrics>]) -> String {
    let row_w = rows.iter().map(String::len).chain([title.len(), 4]).max().unwrap_or(4);
    let block_w = 3 * 5 + 2;
    let mut out = String::new();
    let _ = write!(out, "{title:row_w$}");
    for c in columns {
        let _ = write!(out, " | {c:^block_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:row_w$}", "");
    for _ in columns {
        let _ = write!(out, " | {:>5} {:>5} {:>5}", "P", "R", "F1");
    }
    out.push('\n');
    out.push_str(&"-".repeat(row_w + columns.len() * (block_w + 3)));
    out.push('\n');
    for (name, row) in rows.iter().zip(cells) {
        let _ = write!(out, "{name:row_w$}");
        for m in row {
            let _ = write!(out, " | {:>5} {:>5} {:>5}", fmt2(m.p), fmt2(m.r), fmt2(m.f1));
        }
        out.push('\n');
    }
    out
}
