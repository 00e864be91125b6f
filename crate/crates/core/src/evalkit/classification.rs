use std::cmp::Ordering;

use crate::error::{Error, Result};

/// One scored prediction with its binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, score: f64, label: bool) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

/// Build samples with positional ids from parallel score/label slices.
pub fn samples_from(scores: &[f64], labels: &[bool]) -> Vec<ScoredSample> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredSample::new(i.to_string(), s, l))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold metrics; `None` marks a metric undefined for the given labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion-matrix metrics with "positive" meaning `score ≥ threshold`.
pub fn classification_metrics(samples: &[ScoredSample], threshold: f64) -> Result<ClassificationMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("classification metrics of an empty set".into()));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for s in samples {
        match (s.score >= threshold, s.label) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let p = precision.unwrap_or(0.0);
    let r = tpr.unwrap_or(0.0);
    Ok(ClassificationMetrics {
        confusion: c,
        tpr,
        tnr: ratio(c.tn, c.tn + c.fp),
        precision,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        f1: if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 },
    })
}

/// ROC or PR curve vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub threshold: f64,
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label).count();
    (pos, samples.len() - pos)
}

/// Scores sorted descending, grouped into runs of equal score; yields the
/// cumulative (tp, fp) after each run.
fn cumulative_by_threshold(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Mann-Whitney pair statistic via average ranks (ties count one half).
pub fn mann_whitney_auc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC undefined".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| {
        samples[a]
            .score
            .partial_cmp(&samples[b].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && samples[idx[j + 1]].score == samples[idx[i]].score {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| samples[k].label).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC AUC and the curve through all distinct thresholds.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(f64, Vec<CurvePoint>)> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC undefined".into()));
    }
    let mut curve = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    for (t, tp, fp) in cumulative_by_threshold(samples) {
        curve.push(CurvePoint {
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    let auc = mann_whitney_auc(samples)?;
    Ok((auc, curve))
}

/// Trapezoidal area under a curve given in increasing-x order.
pub fn trapezoid(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].y + w[1].y) / 2.0)
        .sum()
}

/// Area under the precision-recall curve with step interpolation; the curve
/// has recall on x and precision on y.
pub fn auprc(samples: &[ScoredSample]) -> Result<(f64, Vec<CurvePoint>)> {
    let (pos, _) = class_counts(samples);
    if pos == 0 {
        return Err(Error::Undefined("AUPRC undefined without positives".into()));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut curve = Vec::new();
    for (t, tp, fp) in cumulative_by_threshold(samples) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        curve.push(CurvePoint {
            x: recall,
            y: precision,
            threshold: t,
        });
    }
    Ok((area, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let s = samples_from(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        let m = classification_metrics(&s, 0.5).unwrap();
        assert_eq!((m.tpr, m.tnr, m.accuracy, m.f1), (Some(1.0), Some(1.0), 1.0, 1.0));
    }

    #[test]
    fn all_positive_predictions() {
        let s = samples_from(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        let m = classification_metrics(&s, 0.5).unwrap();
        assert_eq!(m.tnr, Some(0.0));
        assert_eq!(m.precision, Some(0.5));
    }

    #[test]
    fn mixed_confusion() {
        let s = samples_from(&[0.6, 0.4, 0.7, 0.2], &[true, true, false, false]);
        let m = classification_metrics(&s, 0.5).unwrap();
        assert_eq!(
            m.confusion,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(m.tpr, Some(0.5));
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = samples_from(&[0.544], &[true]);
        let m = classification_metrics(&s, 0.5).unwrap();
        assert_eq!(m.confusion.tp, 1);
        assert_eq!(m.tnr, None);
    }

    #[test]
    fn empty_input_errors() {
        assert!(classification_metrics(&[], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        let perfect = samples_from(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(roc_auc(&perfect).unwrap().0, 1.0);
        let ties = samples_from(&[0.3; 6], &[true, false, true, false, true, false]);
        assert_eq!(roc_auc(&ties).unwrap().0, 0.5);
        let mixed = samples_from(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
        let (auc, curve) = roc_auc(&mixed).unwrap();
        assert_eq!(auc, 0.75);
        assert!((trapezoid(&curve) - 0.75).abs() < 1e-12);
        let single = samples_from(&[0.1, 0.2], &[true, true]);
        assert!(roc_auc(&single).unwrap_err().to_string().contains("AUC undefined"));
    }

    #[test]
    fn auprc_examples() {
        let perfect = samples_from(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(auprc(&perfect).unwrap().0, 1.0);
        let constant = samples_from(&[0.5; 8], &[true, false, false, true, false, false, false, false]);
        assert_eq!(auprc(&constant).unwrap().0, 0.25);
        let s = samples_from(&[0.9, 0.7, 0.6], &[true, false, true]);
        assert!((auprc(&s).unwrap().0 - 5.0 / 6.0).abs() < 1e-12);
        assert!(auprc(&samples_from(&[0.1], &[false])).is_err());
    }
}
