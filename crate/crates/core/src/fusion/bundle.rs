use crate::dataset::ViewKey;
use crate::error::{Error, Result};
use crate::taskmodels::Detection;

use super::layout::{retained_detections, FusionConfig, Layout};

/// Feature-level fusion input in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Concatenated density view features (4 · feature_width).
    pub density: Option<Vec<f64>>,
    /// One feature per view.
    pub findings: [Vec<f64>; 4],
    /// `4 · n` features, view-major, confidence-ranked within each view.
    pub localizer: Vec<Vec<f64>>,
    /// Whether each localizer slot holds a detection (else a background feature).
    pub present: Vec<bool>,
}

impl FeatureBundle {
    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(d) = &self.density {
            out.extend_from_slice(d);
        }
        for f in self.findings.iter().chain(&self.localizer) {
            out.extend_from_slice(f);
        }
        out
    }

    /// Same structure as `self`, values taken from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> FeatureBundle {
        let mut pos = 0;
        let mut take = |len: usize| {
            let v = flat[pos..pos + len].to_vec();
            pos += len;
            v
        };
        FeatureBundle {
            density: self.density.as_ref().map(|d| take(d.len())),
            findings: std::array::from_fn(|i| take(self.findings[i].len())),
            localizer: self.localizer.iter().map(|l| take(l.len())).collect(),
            present: self.present.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.density.as_ref().map_or(0, Vec::len)
            + self.findings.iter().map(Vec::len).sum::<usize>()
            + self.localizer.iter().map(Vec::len).sum::<usize>()
    }
}

fn check_len(branch: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Contract(format!(
            "{branch} feature has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Slot features with the same filtering as the score vector; slots without a
/// detection receive the view's background feature.
pub fn build_feature_bundle(
    feat_density: Option<&[f64]>,
    feat_findings: &[Vec<f64>; 4],
    detections: &[Vec<Detection>; 4],
    background: &[Vec<f64>; 4],
    config: FusionConfig,
    feature_width: usize,
) -> Result<FeatureBundle> {
    Layout::new(config)?;
    let density = if config.include_density {
        let d = feat_density.ok_or_else(|| Error::Contract("density feature missing".into()))?;
        check_len("density", d.len(), 4 * feature_width)?;
        Some(d.to_vec())
    } else {
        None
    };
    for (v, f) in ViewKey::ALL.iter().zip(feat_findings) {
        check_len(&format!("findings {v}"), f.len(), feature_width)?;
    }
    let mut localizer = Vec::with_capacity(4 * config.n);
    let mut present = Vec::with_capacity(4 * config.n);
    for ((v, dets), bg) in ViewKey::ALL.iter().zip(detections).zip(background) {
        check_len(&format!("background {v}"), bg.len(), feature_width)?;
        let kept = retained_detections(dets, config.target, config.n);
        for &i in &kept {
            check_len(&format!("localizer {v}"), dets[i].feature.len(), feature_width)?;
            localizer.push(dets[i].feature.clone());
            present.push(true);
        }
        for _ in kept.len()..config.n {
            localizer.push(bg.clone());
            present.push(false);
        }
    }
    Ok(FeatureBundle {
        density,
        findings: feat_findings.clone(),
        localizer,
        present,
    })
}

/// Per-dimension min-max map onto [-1, 1] with clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Data("normalizer needs at least one sample".into()))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for r in rows {
            check_len("normalizer input", r.len(), min.len())?;
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }
}

pub fn fit_normalizer(bundles: &[FeatureBundle]) -> Result<Normalizer> {
    let rows: Vec<Vec<f64>> = bundles.iter().map(FeatureBundle::flatten).collect();
    Normalizer::fit(&rows)
}

pub fn apply_normalizer(normalizer: &Normalizer, bundle: &FeatureBundle) -> Result<FeatureBundle> {
    let flat = bundle.flatten();
    check_len("bundle", flat.len(), normalizer.dim())?;
    Ok(bundle.with_values(&normalizer.apply(&flat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BBox, LesionClass};
    use crate::fusion::FusionTarget;

    #[test]
    fn normalizer_edges() {
        let n = Normalizer::fit(&[vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(n.apply(&[2.0, 5.0]), vec![-1.0, 0.0]);
        assert_eq!(n.apply(&[4.0, 7.0]), vec![1.0, 0.0]);
        assert_eq!(n.apply(&[3.0, 5.0])[0], 0.0);
        assert_eq!(n.apply(&[10.0, 5.0])[0], 1.0);
        assert!(Normalizer::fit(&[]).is_err());
    }

    #[test]
    fn empty_views_use_background() {
        let cfg = FusionConfig::new(2, FusionTarget::Lesion, false).unwrap();
        let bg: [Vec<f64>; 4] = std::array::from_fn(|i| vec![i as f64; 3]);
        let ff: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.5; 3]);
        let b = build_feature_bundle(None, &ff, &Default::default(), &bg, cfg, 3).unwrap();
        assert_eq!(b.localizer.len(), 8);
        for (k, f) in b.localizer.iter().enumerate() {
            assert_eq!(f, &bg[k / 2]);
        }
        assert!(b.present.iter().all(|p| !p));
    }

    #[test]
    fn length_mismatch_names_branch() {
        let cfg = FusionConfig::new(1, FusionTarget::Lesion, true).unwrap();
        let bg: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; 3]);
        let ff = bg.clone();
        let err = build_feature_bundle(Some(&[0.0; 5]), &ff, &Default::default(), &bg, cfg, 3).unwrap_err();
        assert!(err.to_string().contains("density"));
        let mut dets: [Vec<Detection>; 4] = Default::default();
        dets[1].push(Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class: LesionClass::BenignMass,
            confidence: 0.5,
            feature: vec![0.0; 2],
        });
        let err = build_feature_bundle(Some(&[0.0; 12]), &ff, &dets, &bg, cfg, 3).unwrap_err();
        assert!(err.to_string().contains("localizer L-MLO"));
    }
}
