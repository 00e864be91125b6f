use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::classification::{auprc, classification_metrics, roc_auc, CurvePoint, ScoredSample};
use super::plot::{write_curve_csv, write_text, Chart};
use super::wilcoxon::{wilcoxon_signed_rank, MIN_PAIRS};

/// Decision threshold applied to probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Case-level scores of one model for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictions {
    pub model: String,
    pub target: String,
    pub samples: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetrics {
    pub model: String,
    pub target: String,
    pub auc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub accuracy: f64,
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub metrics: Vec<ModelMetrics>,
    /// Pairwise two-sided Wilcoxon p-values on aligned scores; `None` when the
    /// test has too few pairs.
    pub p_values: Vec<Vec<Option<f64>>>,
}

fn aligned_scores(p: &ModelPredictions) -> BTreeMap<&str, (f64, bool)> {
    p.samples.iter().map(|s| (s.id.as_str(), (s.score, s.label))).collect()
}

/// Metrics per model plus the pairwise significance matrix. All prediction
/// sets must cover the same case ids with the same labels.
pub fn build_report(predictions: &[ModelPredictions], threshold: f64) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("report needs at least one prediction set".into()));
    }
    let maps: Vec<_> = predictions.iter().map(aligned_scores).collect();
    for (p, m) in predictions.iter().zip(&maps) {
        if m.len() != p.samples.len() {
            return Err(Error::Contract(format!(
                "duplicate case ids in predictions of {}",
                p.model
            )));
        }
        let mut missing: Vec<&str> = maps[0].keys().filter(|k| !m.contains_key(*k)).copied().collect();
        missing.extend(m.keys().filter(|k| !maps[0].contains_key(*k)));
        if !missing.is_empty() {
            return Err(Error::Contract(format!(
                "predictions of {} and {} differ in case ids: {}",
                p.model,
                predictions[0].model,
                missing.join(", ")
            )));
        }
        if m.iter().zip(&maps[0]).any(|((_, (_, la)), (_, (_, lb)))| la != lb) {
            return Err(Error::Contract(format!(
                "labels of {} disagree with {}",
                p.model, predictions[0].model
            )));
        }
    }
    let mut metrics = Vec::new();
    for p in predictions {
        let cm = classification_metrics(&p.samples, threshold)?;
        let roc = roc_auc(&p.samples).ok();
        let pr = auprc(&p.samples).ok();
        metrics.push(ModelMetrics {
            model: p.model.clone(),
            target: p.target.clone(),
            auc: roc.as_ref().map(|r| r.0),
            auprc: pr.as_ref().map(|r| r.0),
            f1: cm.f1,
            tpr: cm.tpr,
            tnr: cm.tnr,
            accuracy: cm.accuracy,
            roc: roc.map(|r| r.1).unwrap_or_default(),
            pr: pr.map(|r| r.1).unwrap_or_default(),
        });
    }
    let scores: Vec<Vec<f64>> = maps.iter().map(|m| m.values().map(|v| v.0).collect()).collect();
    let n = predictions.len();
    let mut p_values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if scores[i].len() >= MIN_PAIRS {
                p_values[i][j] = Some(wilcoxon_signed_rank(&scores[i], &scores[j])?.p_value);
            }
        }
    }
    Ok(MetricsReport { metrics, p_values })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl MetricsReport {
    /// One line per model of `key=value` fields.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, m) in self.metrics.iter().enumerate() {
            let _ = write!(
                s,
                "model={} target={} auc={} auprc={} f1={:.4} tpr={} tnr={} acc={:.4}",
                m.model,
                m.target,
                fmt_opt(m.auc),
                fmt_opt(m.auprc),
                m.f1,
                fmt_opt(m.tpr),
                fmt_opt(m.tnr),
                m.accuracy
            );
            for (j, other) in self.metrics.iter().enumerate() {
                if i != j {
                    let _ = write!(s, " p_vs_{}={}", other.model, fmt_opt(self.p_values[i][j]));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn get(&self, model: &str) -> Option<&ModelMetrics> {
        self.metrics.iter().find(|m| m.model == model)
    }

    /// Text report, per-model curve CSVs and combined ROC/PR plots under `dir`,
    /// file names prefixed with `prefix`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        write_text(&dir.join(format!("{prefix}report.txt")), &self.to_text())?;
        for m in &self.metrics {
            let stem = file_stem(&m.model);
            write_curve_csv(&dir.join(format!("{prefix}roc_{stem}.csv")), &m.roc)?;
            write_curve_csv(&dir.join(format!("{prefix}pr_{stem}.csv")), &m.pr)?;
        }
        let target = self.metrics.first().map(|m| m.target.as_str()).unwrap_or("");
        let roc = Chart {
            title: &format!("ROC ({target})"),
            x_label: "false positive rate",
            y_label: "true positive rate",
            x_max: 1.0,
            y_max: 1.0,
            series: self.metrics.iter().map(|m| (m.model.clone(), &m.roc[..])).collect(),
        }
        .to_svg();
        write_text(&dir.join(format!("{prefix}roc.svg")), &roc)?;
        let pr = Chart {
            title: &format!("precision-recall ({target})"),
            x_label: "recall",
            y_label: "precision",
            x_max: 1.0,
            y_max: 1.0,
            series: self.metrics.iter().map(|m| (m.model.clone(), &m.pr[..])).collect(),
        }
        .to_svg();
        write_text(&dir.join(format!("{prefix}pr.svg")), &pr)
    }
}
