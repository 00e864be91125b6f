use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BBox, LesionClass};
use crate::error::{Error, Result};
use crate::nn::{all_finite, softmax, Conv2d, Layer, Mode, Sequential, Tensor};
use crate::preprocess::augment;

use super::config::{BackboneConfig, TrainConfig};
use super::train::{LogRow, TrainLog};

pub const NUM_CLASSES: usize = 4;
/// Background plus the four lesion classes.
const CLS_OUTPUTS: usize = NUM_CLASSES + 1;
const BOX_OUTPUTS: usize = 4;
const PER_ANCHOR: usize = CLS_OUTPUTS + BOX_OUTPUTS;
/// Score threshold for standalone reporting.
pub const REPORT_SCORE_THRESHOLD: f64 = 0.5;
/// Score threshold for detections handed to fusion.
pub const FUSION_SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
/// Candidates per class kept before suppression.
const PRE_NMS_LIMIT: usize = 300;
/// Initial background logit, giving a background prior near 0.93.
const BACKGROUND_BIAS: f64 = 4.0;

/// Anchor (height, width) in pixels of the full-resolution localization frame.
pub const FULL_SCALE_ANCHORS: [(f64, f64); 3] = [(128.0, 80.0), (224.0, 128.0), (352.0, 208.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerConfig {
    pub backbone: BackboneConfig,
    /// Anchor (height, width) in input pixels.
    pub anchors: Vec<(f64, f64)>,
    pub head_width: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Hard negatives kept per positive anchor.
    pub negative_ratio: usize,
}

impl LocalizerConfig {
    /// Detector over `backbone` with the last block at stride 1 and anchors
    /// scaled with the input profile.
    pub fn new(backbone: BackboneConfig) -> Self {
        let s = backbone.input_profile.scale_factor;
        Self {
            backbone: BackboneConfig {
                final_stride: 1,
                ..backbone
            },
            anchors: FULL_SCALE_ANCHORS.iter().map(|(h, w)| (h * s, w * s)).collect(),
            head_width: 32,
            score_threshold: FUSION_SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
            positive_iou: 0.5,
            negative_iou: 0.3,
            negative_ratio: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.anchors.is_empty() || self.anchors.iter().any(|(h, w)| !(*h > 0.0 && *w > 0.0)) {
            return Err(Error::Config("anchors must have positive sizes".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score and NMS thresholds must lie in [0, 1]".into()));
        }
        if !(self.negative_iou <= self.positive_iou) || self.head_width == 0 || self.negative_ratio == 0 {
            return Err(Error::Config("invalid anchor matching settings".into()));
        }
        Ok(())
    }

    pub fn echo(&self, prefix: &str) -> String {
        let anchors: Vec<String> = self.anchors.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        format!(
            "{}{prefix}.anchors = {}\n{prefix}.head_width = {}\n{prefix}.score_threshold = {}\n{prefix}.nms_iou = {}\n\
             {prefix}.positive_iou = {}\n{prefix}.negative_iou = {}\n{prefix}.negative_ratio = {}\n",
            self.backbone.echo(&format!("{prefix}.backbone")),
            anchors.join(","),
            self.head_width,
            self.score_threshold,
            self.nms_iou,
            self.positive_iou,
            self.negative_iou,
            self.negative_ratio
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: LesionClass,
    pub confidence: f64,
    /// Backbone features averaged over the box (length `feature_width`).
    pub feature: Vec<f64>,
}

/// Annotated localization-frame image.
#[derive(Debug, Clone)]
pub struct LocalizerSample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<(BBox, LesionClass)>,
}

/// Order by confidence descending, then larger area, then (x_min, y_min).
pub fn detection_order(a: &BBox, ca: f64, b: &BBox, cb: f64) -> Ordering {
    cb.partial_cmp(&ca)
        .unwrap_or(Ordering::Equal)
        .then(b.area().partial_cmp(&a.area()).unwrap_or(Ordering::Equal))
        .then(a.x_min.partial_cmp(&b.x_min).unwrap_or(Ordering::Equal))
        .then(a.y_min.partial_cmp(&b.y_min).unwrap_or(Ordering::Equal))
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| detection_order(&a.bbox, a.confidence, &b.bbox, b.confidence));
}

/// Candidate box before feature pooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub class: LesionClass,
    pub confidence: f64,
}

/// Greedy suppression within each class: a candidate is dropped when it
/// overlaps a higher-ranked kept candidate of the same class above `iou`.
/// Output is in detection order.
pub fn class_nms(mut cands: Vec<Candidate>, iou: f64) -> Vec<Candidate> {
    cands.sort_by(|a, b| detection_order(&a.bbox, a.confidence, &b.bbox, b.confidence));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.class != c.class || k.bbox.iou(&c.bbox) <= iou) {
            kept.push(c);
        }
    }
    kept
}

/// Anchor box centered on feature cell (x, y).
fn anchor_box(x: usize, y: usize, stride: usize, (h, w): (f64, f64)) -> BBox {
    let cx = (x as f64 + 0.5) * stride as f64;
    let cy = (y as f64 + 0.5) * stride as f64;
    BBox {
        x_min: cx - w / 2.0,
        y_min: cy - h / 2.0,
        x_max: cx + w / 2.0,
        y_max: cy + h / 2.0,
    }
}

fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

fn decode(anchor: &BBox, t: &[f64]) -> (f64, f64, f64, f64) {
    let (ax, ay) = anchor.center();
    let cx = ax + t[0] * anchor.width();
    let cy = ay + t[1] * anchor.height();
    let w = anchor.width() * t[2].clamp(-4.0, 4.0).exp();
    let h = anchor.height() * t[3].clamp(-4.0, 4.0).exp();
    (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Smooth L1 with unit transition; returns (loss, derivative).
fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Anchor assignment: `None` = ignored, `Some(0)` = background, `Some(k)` =
/// class k-1 matched to ground truth `gt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorTarget {
    pub label: Option<usize>,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localizer {
    pub config: LocalizerConfig,
    backbone: Sequential,
    head: Sequential,
    pub params: Vec<f64>,
}

impl Localizer {
    pub fn new(config: LocalizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Sequential::new(config.backbone.layers());
        let fw = config.backbone.feature_width;
        let a = config.anchors.len();
        let head = Sequential::new(vec![
            Layer::Conv2d(Conv2d::square(fw, config.head_width, 1, 1)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::square(config.head_width, a * PER_ANCHOR, 1, 1)),
        ]);
        let nb = backbone.param_count();
        let mut params = vec![0.0; nb + head.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone.init(&mut params[..nb], &mut rng);
        head.init(&mut params[nb..], &mut rng);
        // output biases sit at the very end of the parameter vector
        let n = params.len();
        let biases = &mut params[n - a * PER_ANCHOR..];
        for k in 0..a {
            biases[k * PER_ANCHOR] = BACKGROUND_BIAS;
        }
        let last = n - a * PER_ANCHOR;
        for w in &mut params[last - a * PER_ANCHOR * config.head_width..last] {
            *w *= 0.1;
        }
        Ok(Self {
            config,
            backbone,
            head,
            params,
        })
    }

    pub fn from_params(config: LocalizerConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Integrity(format!(
                "localizer expects {} weights, found {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride()
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.backbone.output_shape(self.config.backbone.input_shape())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.config.backbone.input_shape();
        if x.shape() != expected {
            return Err(Error::Contract(format!(
                "input shape {:?}, expected {expected:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Target of every anchor, indexed `(y·W + x)·A + a`.
    pub fn assign(&self, gts: &[(BBox, LesionClass)]) -> Vec<AnchorTarget> {
        let (_, fh, fw) = self.feature_shape();
        let a_n = self.config.anchors.len();
        let stride = self.stride();
        let mut targets = Vec::with_capacity(fh * fw * a_n);
        let mut best_for_gt = vec![(f64::NEG_INFINITY, usize::MAX); gts.len()];
        for y in 0..fh {
            for x in 0..fw {
                for (a, &size) in self.config.anchors.iter().enumerate() {
                    let idx = (y * fw + x) * a_n + a;
                    let anchor = anchor_box(x, y, stride, size);
                    let mut best = (0.0, 0usize);
                    for (g, (b, _)) in gts.iter().enumerate() {
                        let iou = anchor.iou(b);
                        if iou > best.0 {
                            best = (iou, g);
                        }
                        if iou > best_for_gt[g].0 {
                            best_for_gt[g] = (iou, idx);
                        }
                    }
                    let label = if best.0 >= self.config.positive_iou {
                        Some(gts[best.1].1.index() + 1)
                    } else if best.0 < self.config.negative_iou {
                        Some(0)
                    } else {
                        None
                    };
                    targets.push(AnchorTarget { label, gt: best.1 });
                }
            }
        }
        for (g, &(iou, idx)) in best_for_gt.iter().enumerate() {
            if iou > 0.0 {
                targets[idx] = AnchorTarget {
                    label: Some(gts[g].1.index() + 1),
                    gt: g,
                };
            }
        }
        targets
    }

    fn anchor_at(&self, idx: usize) -> BBox {
        let (_, _, fw) = self.feature_shape();
        let a_n = self.config.anchors.len();
        let cell = idx / a_n;
        anchor_box(cell % fw, cell / fw, self.stride(), self.config.anchors[idx % a_n])
    }

    /// Detection loss of one image and its gradient with respect to the head output.
    pub fn loss(&self, out: &Tensor, gts: &[(BBox, LesionClass)]) -> (f64, Tensor) {
        let (c, fh, fw) = out.shape();
        let a_n = self.config.anchors.len();
        let plane = fh * fw;
        let targets = self.assign(gts);
        let mut grad = Tensor::zeros(c, fh, fw);
        let logits_of = |cell: usize, a: usize| -> [f64; CLS_OUTPUTS] {
            std::array::from_fn(|k| out.data[(a * PER_ANCHOR + k) * plane + cell])
        };
        let positives: Vec<usize> = (0..targets.len())
            .filter(|&i| targets[i].label.is_some_and(|l| l > 0))
            .collect();
        let norm = positives.len().max(1) as f64;
        let mut negatives: Vec<(f64, usize)> = (0..targets.len())
            .filter(|&i| targets[i].label == Some(0))
            .map(|i| {
                let p = softmax(&logits_of(i / a_n, i % a_n));
                (-p[0].max(1e-300).ln(), i)
            })
            .collect();
        negatives.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let n_neg = (self.config.negative_ratio * positives.len()).max(self.config.negative_ratio * 4);
        negatives.truncate(n_neg);
        let mut loss = 0.0;
        let add_cls = |i: usize, label: usize, grad: &mut Tensor| -> f64 {
            let (cell, a) = (i / a_n, i % a_n);
            let p = softmax(&logits_of(cell, a));
            for (k, pk) in p.iter().enumerate() {
                let g = pk - if k == label { 1.0 } else { 0.0 };
                grad.data[(a * PER_ANCHOR + k) * plane + cell] += g / norm;
            }
            -p[label].max(1e-300).ln() / norm
        };
        for &(_, i) in &negatives {
            loss += add_cls(i, 0, &mut grad);
        }
        for &i in &positives {
            let t = targets[i];
            loss += add_cls(i, t.label.expect("positive"), &mut grad);
            let (cell, a) = (i / a_n, i % a_n);
            let target = encode(&self.anchor_at(i), &gts[t.gt].0);
            for (k, tk) in target.iter().enumerate() {
                let ch = a * PER_ANCHOR + CLS_OUTPUTS + k;
                let (l, d) = smooth_l1(out.data[ch * plane + cell] - tk);
                loss += l / norm;
                grad.data[ch * plane + cell] += d / norm;
            }
        }
        (loss, grad)
    }

    /// Loss of one image; accumulates parameter gradients.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        image: Tensor,
        gts: &[(BBox, LesionClass)],
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        let nb = self.backbone.param_count();
        let (pb, ph) = params.split_at(nb);
        let (gb, gh) = grads.split_at_mut(nb);
        let mut mode = Mode::Train(rng);
        let (f, tape_b) = self.backbone.forward(pb, image, &mut mode);
        let (out, tape_h) = self.head.forward(ph, f, &mut mode);
        let (loss, gout) = self.loss(&out, gts);
        let gf = self.head.backward(ph, tape_h, gout, gh);
        self.backbone.backward(pb, tape_b, gf, gb);
        loss
    }

    /// Backbone map and head output.
    fn run(&self, params: &[f64], image: &Tensor) -> (Tensor, Tensor) {
        let nb = self.backbone.param_count();
        let f = self.backbone.infer(&params[..nb], image.clone());
        let out = self.head.infer(&params[nb..], f.clone());
        (f, out)
    }

    /// Channel means of the feature map over the cells covered by `b`.
    pub fn roi_feature(&self, fmap: &Tensor, b: &BBox) -> Vec<f64> {
        let (c, fh, fw) = fmap.shape();
        let s = self.stride() as f64;
        let span = |lo: f64, hi: f64, n: usize| {
            let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
            let z = ((hi / s).ceil().max(0.0) as usize).clamp(a + 1, n);
            (a, z)
        };
        let (x0, x1) = span(b.x_min, b.x_max, fw);
        let (y0, y1) = span(b.y_min, b.y_max, fh);
        let count = ((x1 - x0) * (y1 - y0)) as f64;
        (0..c)
            .map(|ch| {
                let p = fmap.plane(ch);
                let mut sum = 0.0;
                for y in y0..y1 {
                    sum += p[y * fw + x0..y * fw + x1].iter().sum::<f64>();
                }
                sum / count
            })
            .collect()
    }

    fn candidates(&self, out: &Tensor, threshold: f64) -> Vec<Candidate> {
        let (_, fh, fw) = out.shape();
        let (_, ih, iw) = self.config.backbone.input_shape();
        let plane = fh * fw;
        let a_n = self.config.anchors.len();
        let mut per_class: Vec<Vec<Candidate>> = vec![Vec::new(); NUM_CLASSES];
        for cell in 0..plane {
            for a in 0..a_n {
                let at = |k: usize| out.data[(a * PER_ANCHOR + k) * plane + cell];
                let logits: [f64; CLS_OUTPUTS] = std::array::from_fn(at);
                let p = softmax(&logits);
                if p[1..].iter().all(|&v| v < threshold) {
                    continue;
                }
                let t: [f64; BOX_OUTPUTS] = std::array::from_fn(|k| at(CLS_OUTPUTS + k));
                let (x0, y0, x1, y1) = decode(&self.anchor_at(cell * a_n + a), &t);
                let (x0, x1) = (x0.clamp(0.0, iw as f64), x1.clamp(0.0, iw as f64));
                let (y0, y1) = (y0.clamp(0.0, ih as f64), y1.clamp(0.0, ih as f64));
                let Ok(bbox) = BBox::new(x0, y0, x1, y1) else {
                    continue;
                };
                for k in 0..NUM_CLASSES {
                    if p[k + 1] >= threshold {
                        per_class[k].push(Candidate {
                            bbox,
                            class: LesionClass::from_index(k).expect("class index below 4"),
                            confidence: p[k + 1],
                        });
                    }
                }
            }
        }
        let mut all = Vec::new();
        for mut c in per_class {
            c.sort_by(|a, b| detection_order(&a.bbox, a.confidence, &b.bbox, b.confidence));
            c.truncate(PRE_NMS_LIMIT);
            all.extend(c);
        }
        all
    }

    /// Detections above `threshold` (at most `max_detections`) and the
    /// whole-image background feature.
    pub fn analyze(&self, image: &Tensor, threshold: f64, max_detections: usize) -> Result<(Vec<Detection>, Vec<f64>)> {
        self.check_input(image)?;
        let (fmap, out) = self.run(&self.params, image);
        let mut kept = class_nms(self.candidates(&out, threshold), self.config.nms_iou);
        kept.truncate(max_detections);
        let dets = kept
            .into_iter()
            .map(|c| Detection {
                feature: self.roi_feature(&fmap, &c.bbox),
                bbox: c.bbox,
                class: c.class,
                confidence: c.confidence,
            })
            .collect();
        let (c, fh, fw) = fmap.shape();
        let background = (0..c)
            .map(|ch| fmap.plane(ch).iter().sum::<f64>() / (fh * fw) as f64)
            .collect();
        Ok((dets, background))
    }

    /// Global average of the backbone feature map.
    pub fn background_feature(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.analyze(image, 1.1, 0)?.1)
    }
}

/// Detections at the configured score threshold, sorted by confidence.
pub fn detect_lesions(model: &Localizer, image: &Tensor, max_detections: usize) -> Result<Vec<Detection>> {
    Ok(model.analyze(image, model.config.score_threshold, max_detections)?.0)
}

/// Mean detection loss over `data` in evaluation mode.
pub fn localizer_loss(model: &Localizer, data: &[LocalizerSample]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|s| model.loss(&model.run(&model.params, &s.image).1, &s.boxes).0)
        .sum();
    total / data.len().max(1) as f64
}

/// Iteration-based detector training on images holding at least one lesion.
/// One log row per pass over the training images.
pub fn train_localizer(
    config: LocalizerConfig,
    train: &[LocalizerSample],
    val: &[LocalizerSample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Localizer> {
    cfg.validate()?;
    let train: Vec<&LocalizerSample> = train.iter().filter(|s| !s.boxes.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::Data(
            "localizer: no annotated lesions in the training split".into(),
        ));
    }
    let val: Vec<LocalizerSample> = val.iter().filter(|s| !s.boxes.is_empty()).cloned().collect();
    let mut model = Localizer::new(config, cfg.seed)?;
    for s in &train {
        model.check_input(&s.image)?;
    }
    let iterations = cfg
        .iterations
        .unwrap_or(cfg.epochs * train.len().div_ceil(cfg.batch_size));
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build(cfg.learning_rate, model.params.len());
    let mut grads = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut params = std::mem::take(&mut model.params);
    let mut running = 0.0;
    let mut seen = 0usize;
    for it in 0..iterations {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                order.reverse();
            }
            let s = train[order.pop().expect("refilled")];
            let boxes: Vec<BBox> = s.boxes.iter().map(|b| b.0).collect();
            let aug = augment(&s.image, &boxes, &cfg.augmentation, &mut rng);
            let gts: Vec<(BBox, LesionClass)> = aug
                .boxes
                .iter()
                .zip(&s.boxes)
                .filter_map(|(b, (_, c))| b.map(|b| (b, *c)))
                .collect();
            batch_loss += model.loss_and_grad(&params, aug.image, &gts, &mut rng, &mut grads);
        }
        if !batch_loss.is_finite() || !all_finite(&grads) {
            return Err(Error::Training(format!(
                "localizer: non-finite loss at iteration {}",
                it + 1
            )));
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        opt.step(&mut params, &grads);
        if !all_finite(&params) {
            return Err(Error::Training(format!(
                "localizer: non-finite parameters at iteration {}",
                it + 1
            )));
        }
        running += batch_loss;
        seen += cfg.batch_size;
        if (it + 1) % per_epoch == 0 || it + 1 == iterations {
            let epoch = (it + 1).div_ceil(per_epoch);
            log.rows.push(LogRow {
                stage: "localizer".into(),
                epoch,
                split: "train",
                loss: running / seen as f64,
                auc: None,
                learning_rate: opt.learning_rate(),
            });
            running = 0.0;
            seen = 0;
            if !val.is_empty() {
                model.params = params.clone();
                log.rows.push(LogRow {
                    stage: "localizer".into(),
                    epoch,
                    split: "validation",
                    loss: localizer_loss(&model, &val),
                    auc: None,
                    learning_rate: opt.learning_rate(),
                });
            }
        }
    }
    model.params = params;
    Ok(model)
}
