use mammofuse::dataset::{BBox, LesionClass};
use mammofuse::evalkit::{
    classification_metrics, froc, match_detections, roc_auc, FrocImage, GroundTruth, ScoredBox, ScoredSample, MATCH_IOU,
};
use mammofuse::fusion::{
    build_feature_bundle, build_score_vector, ensemble_max, FusionConfig, FusionTarget, Normalizer,
};
use mammofuse::taskmodels::{class_nms, Candidate, Detection, NMS_IOU};
use proptest::prelude::*;

const FW: usize = 8;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_class() -> impl Strategy<Value = LesionClass> {
    (0usize..4).prop_map(|i| LesionClass::ALL[i])
}

/// Up to six detections sorted by confidence.
fn arb_view() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_class(), 0.0..=1.0f64, -3.0..3.0f64), 0..7).prop_map(|v| {
        let mut d: Vec<Detection> = v
            .into_iter()
            .map(|(class, confidence, f)| Detection {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                class,
                confidence,
                feature: vec![f; FW],
            })
            .collect();
        d.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        d
    })
}

fn arb_detections() -> impl Strategy<Value = [Vec<Detection>; 4]> {
    [arb_view(), arb_view(), arb_view(), arb_view()]
}

fn arb_config() -> impl Strategy<Value = FusionConfig> {
    (1usize..=5, any::<bool>(), any::<bool>()).prop_map(|(n, m, d)| {
        let target = if m {
            FusionTarget::Malignancy
        } else {
            FusionTarget::Lesion
        };
        FusionConfig::new(n, target, d).unwrap()
    })
}

fn background() -> [Vec<f64>; 4] {
    std::array::from_fn(|v| vec![-10.0 - v as f64; FW])
}

fn findings() -> [Vec<f64>; 4] {
    std::array::from_fn(|v| vec![v as f64; FW])
}

proptest! {
    #[test]
    fn emptying_a_view_touches_only_its_slots(dets in arb_detections(), cfg in arb_config(), view in 0usize..4) {
        let pf = [0.1, 0.2, 0.3, 0.4];
        let w = build_score_vector(Some(0.5), &pf, &dets, cfg).unwrap();
        let b = build_feature_bundle(Some(&[0.0; 4 * FW]), &findings(), &dets, &background(), cfg, FW).unwrap();
        let mut emptied = dets.clone();
        emptied[view].clear();
        let w2 = build_score_vector(Some(0.5), &pf, &emptied, cfg).unwrap();
        let b2 = build_feature_bundle(Some(&[0.0; 4 * FW]), &findings(), &emptied, &background(), cfg, FW).unwrap();
        let start = usize::from(cfg.include_density) + 4 + view * cfg.n;
        for i in 0..w.values.len() {
            if (start..start + cfg.n).contains(&i) {
                prop_assert_eq!(w2.values[i], 0.0);
            } else {
                prop_assert_eq!(w2.values[i], w.values[i]);
            }
        }
        for s in 0..4 * cfg.n {
            if s / cfg.n == view {
                prop_assert!(!b2.present[s]);
                prop_assert_eq!(&b2.localizer[s], &background()[view]);
            } else {
                prop_assert_eq!(&b2.localizer[s], &b.localizer[s]);
            }
        }
    }

    #[test]
    fn score_vector_and_bundle_keep_the_same_detections(dets in arb_detections(), cfg in arb_config()) {
        let w = build_score_vector(Some(0.5), &[0.5; 4], &dets, cfg).unwrap();
        let b = build_feature_bundle(Some(&[0.0; 4 * FW]), &findings(), &dets, &background(), cfg, FW).unwrap();
        let off = usize::from(cfg.include_density) + 4;
        prop_assert_eq!(w.values.len(), off + 4 * cfg.n);
        prop_assert!(w.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for s in 0..4 * cfg.n {
            let v = s / cfg.n;
            let kept: Vec<&Detection> = dets[v]
                .iter()
                .filter(|d| cfg.target == FusionTarget::Lesion || d.class.is_malignant())
                .collect();
            match kept.get(s % cfg.n) {
                Some(d) => {
                    prop_assert!(b.present[s]);
                    prop_assert_eq!(w.values[off + s], d.confidence);
                    prop_assert_eq!(&b.localizer[s], &d.feature);
                }
                None => {
                    prop_assert!(!b.present[s]);
                    prop_assert_eq!(w.values[off + s], 0.0);
                }
            }
        }
    }

    #[test]
    fn normalizer_is_idempotent_on_in_range_data(
        rows in prop::collection::vec(prop::collection::vec(-1.0..=1.0f64, 6), 1..10),
    ) {
        let dim = 6;
        let mut train = vec![vec![-1.0; dim], vec![1.0; dim]];
        train.extend(rows.iter().cloned());
        let norm = Normalizer::fit(&train).unwrap();
        for r in &train {
            let mapped = norm.apply(r);
            for (a, b) in r.iter().zip(&mapped) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_max_ignores_view_order_and_is_monotone(
        pf in prop::array::uniform4(0.0..=1.0f64),
        dets in arb_detections(),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        bump_view in 0usize..4,
        bump in 0.0..0.5f64,
    ) {
        for target in FusionTarget::ALL {
            let base = ensemble_max(&pf, &dets, target);
            let pf_p: [f64; 4] = std::array::from_fn(|i| pf[perm[i]]);
            let dets_p: [Vec<Detection>; 4] = std::array::from_fn(|i| dets[perm[i]].clone());
            prop_assert_eq!(ensemble_max(&pf_p, &dets_p, target), base);

            let mut pf_up = pf;
            pf_up[bump_view] = (pf_up[bump_view] + bump).min(1.0);
            let mut dets_up = dets.clone();
            for d in &mut dets_up[bump_view] {
                d.confidence = (d.confidence + bump).min(1.0);
            }
            prop_assert!(ensemble_max(&pf_up, &dets_up, target) >= base);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(
        scores in prop::collection::vec(0.0..1.0f64, 2..80),
        labels in prop::collection::vec(any::<bool>(), 80),
    ) {
        let n = scores.len();
        let mut labels = labels[..n].to_vec();
        labels[0] = true;
        labels[1] = false;
        let mk = |f: &dyn Fn(f64) -> f64| -> Vec<ScoredSample> {
            scores.iter().zip(&labels).enumerate().map(|(i, (&s, &l))| ScoredSample::new(i.to_string(), f(s), l)).collect()
        };
        let (a, curve) = roc_auc(&mk(&|s| s)).unwrap();
        let (b, _) = roc_auc(&mk(&|s| (3.0 * s).exp() - 7.0)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    }

    #[test]
    fn accuracy_matches_the_confusion_matrix(
        scores in prop::collection::vec(0.0..1.0f64, 1..60),
        labels in prop::collection::vec(any::<bool>(), 60),
        threshold in 0.0..1.0f64,
    ) {
        let samples: Vec<ScoredSample> = scores
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (&s, &l))| ScoredSample::new(i.to_string(), s, l))
            .collect();
        let m = classification_metrics(&samples, threshold).unwrap();
        let c = m.confusion;
        prop_assert_eq!(c.total(), samples.len());
        prop_assert_eq!(m.accuracy, (c.tp + c.tn) as f64 / c.total() as f64);
    }

    #[test]
    fn matching_is_one_to_one(
        dets in prop::collection::vec((arb_box(), arb_class(), 0.0..1.0f64), 0..12),
        gts in prop::collection::vec((arb_box(), arb_class()), 0..6),
        sensitive in any::<bool>(),
    ) {
        let d: Vec<ScoredBox> = dets.iter().map(|&(bbox, class, confidence)| ScoredBox { bbox, class, confidence }).collect();
        let g: Vec<GroundTruth> = gts.iter().map(|&(bbox, class)| GroundTruth { bbox, class }).collect();
        let m = match_detections(&d, &g, MATCH_IOU, sensitive);
        let mut seen_d = vec![false; d.len()];
        let mut seen_g = vec![false; g.len()];
        for &(i, j) in &m.pairs {
            prop_assert!(!seen_d[i] && !seen_g[j]);
            seen_d[i] = true;
            seen_g[j] = true;
            if sensitive {
                prop_assert_eq!(d[i].class, g[j].class);
            }
        }
        prop_assert_eq!(seen_d, m.detection_tp);
        prop_assert_eq!(seen_g, m.gt_detected);
    }

    #[test]
    fn froc_is_monotone_in_threshold(
        images in prop::collection::vec(
            (
                prop::collection::vec((arb_box(), arb_class(), 0.0..1.0f64), 0..8),
                prop::collection::vec((arb_box(), arb_class()), 1..4),
            ),
            1..6,
        ),
    ) {
        let imgs: Vec<FrocImage> = images
            .iter()
            .map(|(d, g)| FrocImage {
                detections: d.iter().map(|&(bbox, class, confidence)| ScoredBox { bbox, class, confidence }).collect(),
                ground_truths: g.iter().map(|&(bbox, class)| GroundTruth { bbox, class }).collect(),
            })
            .collect();
        let curve = froc(&imgs, None).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].x <= w[1].x && w[0].y <= w[1].y);
        }
        prop_assert!(curve.points.iter().all(|p| p.x >= 0.0 && (0.0..=1.0).contains(&p.y)));
    }

    #[test]
    fn class_nms_is_idempotent(
        cands in prop::collection::vec((arb_box(), arb_class(), 0.0..1.0f64), 0..25),
        iou in prop_oneof![Just(NMS_IOU), 0.05..0.95f64],
    ) {
        let c: Vec<Candidate> = cands.iter().map(|&(bbox, class, confidence)| Candidate { bbox, class, confidence }).collect();
        let once = class_nms(c, iou);
        let twice = class_nms(once.clone(), iou);
        prop_assert_eq!(&once, &twice);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(a.class != b.class || a.bbox.iou(&b.bbox) <= iou);
            }
        }
    }
}
