use crate::dataset::{derive_case_labels, Split, ViewKey};
use crate::error::Result;
use crate::evalkit::{GroundTruth, ScoredBox};
use crate::fusion::PatientRecord;
use crate::taskmodels::{predict_density, predict_findings, Detection, FUSION_SCORE_THRESHOLD};

use super::cache::{CaseRecord, FusionCache};
use super::data::{exam_tensors, is_dense, localizer_sample, view_tensor};
use super::Workspace;

/// Detections per view kept for FROC analysis.
pub const FROC_DETECTIONS: usize = 50;

/// Top `k` detections overall plus the top `k` malignant ones, in confidence order.
fn fusion_detections(all: &[Detection], k: usize) -> Vec<Detection> {
    let mut malignant = 0;
    all.iter()
        .enumerate()
        .filter(|(i, d)| {
            let keep = *i < k || (d.class.is_malignant() && malignant < k);
            if d.class.is_malignant() {
                malignant += 1;
            }
            keep
        })
        .map(|(_, d)| d.clone())
        .collect()
}

impl Workspace {
    /// Run every task model over every case and write the fusion cache.
    pub fn extract(&self) -> Result<FusionCache> {
        let models = self.load_task_models()?;
        let cohort = self.cohort()?;
        let c = &self.config;
        let density_profile = c.density_backbone()?.input_profile;
        let findings_profile = c.findings_backbone()?.input_profile;
        let localizer_profile = models.localizer.config.backbone.input_profile;
        let mut cases = Vec::new();
        for split in Split::ALL {
            for exam in cohort.exams_in(split)? {
                let labels = derive_case_labels(exam);
                let dviews = exam_tensors(exam, &density_profile)?;
                let (p_density, feat_density) = predict_density(&models.density_patient, &dviews)?;
                let mut p_density_views = [0.0; 4];
                let mut p_findings = [0.0; 4];
                let mut p_findings_scratch = [0.0; 4];
                let mut feat_findings: [Vec<f64>; 4] = Default::default();
                let mut detections: [Vec<Detection>; 4] = Default::default();
                let mut background: [Vec<f64>; 4] = Default::default();
                let mut ground_truth: [Vec<GroundTruth>; 4] = Default::default();
                let mut froc: [Vec<ScoredBox>; 4] = Default::default();
                for (k, view) in ViewKey::ALL.into_iter().enumerate() {
                    p_density_views[k] = models.density_view.predict(&dviews[k])?;
                    let x = view_tensor(exam, view, &findings_profile)?;
                    (p_findings[k], feat_findings[k]) = predict_findings(&models.findings, &x)?;
                    p_findings_scratch[k] = predict_findings(&models.findings_scratch, &x)?.0;
                    let sample = localizer_sample(exam, view, &localizer_profile)?;
                    let (all, bg) = models
                        .localizer
                        .analyze(&sample.image, FUSION_SCORE_THRESHOLD, FROC_DETECTIONS)?;
                    froc[k] = all
                        .iter()
                        .map(|d| ScoredBox {
                            bbox: d.bbox,
                            class: d.class,
                            confidence: d.confidence,
                        })
                        .collect();
                    detections[k] = fusion_detections(&all, c.cache_detections);
                    background[k] = bg;
                    ground_truth[k] = sample
                        .boxes
                        .iter()
                        .map(|&(bbox, class)| GroundTruth { bbox, class })
                        .collect();
                }
                cases.push(CaseRecord {
                    record: PatientRecord {
                        case_id: exam.case_id.clone(),
                        split,
                        has_lesion: labels.has_lesion,
                        is_malignant: labels.is_malignant,
                        is_dense: is_dense(exam),
                        p_density,
                        feat_density,
                        p_density_views,
                        p_findings,
                        feat_findings,
                        detections,
                        background,
                    },
                    p_findings_scratch,
                    ground_truth,
                    froc,
                });
            }
            log::info!("extract: {split} done");
        }
        let cache = FusionCache {
            descriptor: format!(
                "detections_per_view={} froc_detections={FROC_DETECTIONS} score_threshold={FUSION_SCORE_THRESHOLD} \
                 feature_width={} score=confidence",
                c.cache_detections, c.feature_width
            ),
            cases,
        };
        cache.write(&self.cache_path())?;
        Ok(cache)
    }
}
