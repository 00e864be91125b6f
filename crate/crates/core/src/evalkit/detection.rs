use std::cmp::Ordering;

use crate::dataset::{BBox, LesionClass};
use crate::error::{Error, Result};

use super::classification::CurvePoint;

/// Default IoU at which a detection counts as a hit.
pub const MATCH_IOU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class: LesionClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: LesionClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order: true positive?
    pub detection_tp: Vec<bool>,
    /// Per ground truth, in input order: detected?
    pub gt_detected: Vec<bool>,
    /// (detection index, ground-truth index)
    pub pairs: Vec<(usize, usize)>,
}

/// IoU at or above the threshold, or detection center inside the ground truth.
pub fn is_hit(det: &BBox, gt: &BBox, iou_threshold: f64) -> bool {
    let (cx, cy) = det.center();
    det.iou(gt) >= iou_threshold || gt.contains_point(cx, cy)
}

/// Greedy one-to-one matching in descending confidence order; each detection
/// takes the unmatched qualifying ground truth with the highest IoU.
pub fn match_detections(
    detections: &[ScoredBox],
    ground_truths: &[GroundTruth],
    iou_threshold: f64,
    class_sensitive: bool,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut detection_tp = vec![false; detections.len()];
    let mut gt_detected = vec![false; ground_truths.len()];
    let mut pairs = Vec::new();
    for d in order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if gt_detected[g] || (class_sensitive && gt.class != det.class) {
                continue;
            }
            if !is_hit(&det.bbox, &gt.bbox, iou_threshold) {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_detected[g] = true;
            detection_tp[d] = true;
            pairs.push((d, g));
        }
    }
    MatchResult {
        detection_tp,
        gt_detected,
        pairs,
    }
}

/// Detections and annotations of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrocImage {
    pub detections: Vec<ScoredBox>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// x = false positives per image, y = lesion sensitivity, ordered by
    /// decreasing threshold.
    pub points: Vec<CurvePoint>,
    pub n_images: usize,
    pub n_lesions: usize,
}

impl FrocCurve {
    /// Sensitivity at `fpi`, linearly interpolated between curve vertices and
    /// held constant beyond the last one.
    pub fn tpr_at_fpi(&self, fpi: f64) -> f64 {
        let pts = &self.points;
        let mut best = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if p.x <= fpi {
                best = f64::max(best, p.y);
                if let Some(next) = pts.get(i + 1) {
                    if next.x > fpi && next.x > p.x {
                        let t = (fpi - p.x) / (next.x - p.x);
                        best = f64::max(best, p.y + t * (next.y - p.y));
                    }
                }
            }
        }
        best
    }
}

/// Sweep all distinct detection scores. With `class_filter`, only detections
/// and lesions of that class take part (class-sensitive evaluation).
pub fn froc(images: &[FrocImage], class_filter: Option<LesionClass>) -> Result<FrocCurve> {
    let keep = |c: LesionClass| class_filter.is_none_or(|f| f == c);
    let filtered: Vec<(Vec<ScoredBox>, Vec<GroundTruth>)> = images
        .iter()
        .map(|im| {
            (
                im.detections.iter().filter(|d| keep(d.class)).copied().collect(),
                im.ground_truths.iter().filter(|g| keep(g.class)).copied().collect(),
            )
        })
        .collect();
    let n_lesions: usize = filtered.iter().map(|(_, g)| g.len()).sum();
    if n_lesions == 0 {
        return Err(Error::Undefined("FROC undefined without lesions".into()));
    }
    if images.is_empty() {
        return Err(Error::Undefined("FROC undefined without images".into()));
    }
    let mut thresholds: Vec<f64> = filtered
        .iter()
        .flat_map(|(d, _)| d.iter().map(|x| x.confidence))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    thresholds.dedup();
    let n_images = images.len();
    let mut points = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    for t in thresholds {
        let (mut hits, mut fps) = (0usize, 0usize);
        for (dets, gts) in &filtered {
            let active: Vec<ScoredBox> = dets.iter().filter(|d| d.confidence >= t).copied().collect();
            let m = match_detections(&active, gts, MATCH_IOU, class_filter.is_some());
            hits += m.gt_detected.iter().filter(|v| **v).count();
            fps += m.detection_tp.iter().filter(|v| !**v).count();
        }
        points.push(CurvePoint {
            x: fps as f64 / n_images as f64,
            y: hits as f64 / n_lesions as f64,
            threshold: t,
        });
    }
    Ok(FrocCurve {
        points,
        n_images,
        n_lesions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bbox: BBox, confidence: f64) -> ScoredBox {
        ScoredBox {
            bbox,
            class: LesionClass::MalignantMass,
            confidence,
        }
    }

    fn gt(bbox: BBox) -> GroundTruth {
        GroundTruth {
            bbox,
            class: LesionClass::MalignantMass,
        }
    }

    #[test]
    fn identical_boxes_match() {
        let m = match_detections(
            &[det(b(0.0, 0.0, 5.0, 5.0), 0.9)],
            &[gt(b(0.0, 0.0, 5.0, 5.0))],
            MATCH_IOU,
            false,
        );
        assert_eq!(m.detection_tp, vec![true]);
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn third_overlap_matches() {
        let d = b(0.0, 0.0, 10.0, 10.0);
        let g = b(5.0, 0.0, 15.0, 10.0);
        assert!((d.iou(&g) - 50.0 / 150.0).abs() < 1e-12);
        let m = match_detections(&[det(d, 0.5)], &[gt(g)], MATCH_IOU, false);
        assert!(m.detection_tp[0]);
    }

    #[test]
    fn center_rule_overrides_low_iou() {
        let d = b(4.0, 4.0, 6.0, 6.0);
        let g = b(0.0, 0.0, 100.0, 100.0);
        assert!(d.iou(&g) < 0.2);
        assert!(match_detections(&[det(d, 0.5)], &[gt(g)], MATCH_IOU, false).detection_tp[0]);
    }

    #[test]
    fn froc_counts_false_positive_per_image() {
        let images = vec![
            FrocImage {
                detections: vec![det(b(50.0, 50.0, 60.0, 60.0), 0.9)],
                ground_truths: vec![gt(b(0.0, 0.0, 10.0, 10.0))],
            },
            FrocImage::default(),
        ];
        let c = froc(&images, None).unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((last.x, last.y, last.threshold), (0.5, 0.0, 0.9));
    }

    #[test]
    fn perfect_detector_has_full_sensitivity_at_zero_fpi() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let images = vec![FrocImage {
            detections: vec![det(g, 0.8)],
            ground_truths: vec![gt(g)],
        }];
        let c = froc(&images, None).unwrap();
        assert_eq!(c.tpr_at_fpi(0.0), 1.0);
        assert!(froc(&[FrocImage::default()], None).is_err());
    }

    #[test]
    fn tpr_interpolates_linearly() {
        let c = FrocCurve {
            points: vec![
                CurvePoint {
                    x: 0.0,
                    y: 0.0,
                    threshold: f64::INFINITY,
                },
                CurvePoint {
                    x: 1.0,
                    y: 0.5,
                    threshold: 0.8,
                },
                CurvePoint {
                    x: 3.0,
                    y: 0.9,
                    threshold: 0.3,
                },
            ],
            n_images: 1,
            n_lesions: 1,
        };
        assert!((c.tpr_at_fpi(2.0) - 0.7).abs() < 1e-12);
        assert_eq!(c.tpr_at_fpi(10.0), 0.9);
    }
}
