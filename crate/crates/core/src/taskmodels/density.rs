use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, Dense, Layer, Mode, Sequential, Tensor};
use crate::preprocess::{augment, AugmentationPolicy};

use super::classifier::{HeadKind, ImageClassifier};
use super::config::{BackboneConfig, TrainConfig};
use super::train::{fit, Labeled, TrainLog, Trainable};

/// Dropout of the single-view model head.
pub const VIEW_DROPOUT: f64 = 0.001;
/// Dropout of the view branches once combined into the patient model.
pub const PATIENT_DROPOUT: f64 = 0.5;

/// Single-view density classifier (fatty vs dense).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityViewModel {
    pub net: ImageClassifier,
}

impl DensityViewModel {
    pub fn new(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        let backbone = backbone.with_dropout(VIEW_DROPOUT);
        Ok(Self {
            net: ImageClassifier::new(backbone, HeadKind::Linear, seed)?,
        })
    }

    /// Probability of the dense class.
    pub fn predict(&self, view: &Tensor) -> Result<f64> {
        Ok(self.net.predict(view)?.0[1])
    }
}

fn check_labels<T>(train: &[Labeled<T>], val: &[Labeled<T>], what: &str) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("{what}: empty training or validation split")));
    }
    if train.iter().chain(val).any(|s| s.label > 1) {
        return Err(Error::Data(format!("{what}: labels must be 0 or 1")));
    }
    Ok(())
}

pub fn train_density_view(
    backbone: BackboneConfig,
    train: &[Labeled<Tensor>],
    val: &[Labeled<Tensor>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<DensityViewModel> {
    check_labels(train, val, "density view")?;
    let mut model = DensityViewModel::new(backbone, cfg.seed)?;
    for s in train.iter().chain(val) {
        model.net.check_input(&s.input)?;
    }
    model.net.params = fit(
        &model.net,
        model.net.params.clone(),
        train,
        val,
        cfg,
        "density_view",
        log,
    )?;
    Ok(model)
}

/// Arithmetic mean of the single-view dense probabilities over the four views.
pub fn mean_view_score(model: &DensityViewModel, views: &[Tensor; 4]) -> Result<f64> {
    let mut sum = 0.0;
    for v in views {
        sum += model.predict(v)?;
    }
    Ok(sum / 4.0)
}

/// Four view branches (in canonical view order) whose pooled features are
/// concatenated and mapped to two logits. Parameters: branches 0..4, then head.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPatientModel {
    pub backbone: BackboneConfig,
    branch: Sequential,
    head: Sequential,
    pub params: Vec<f64>,
}

impl DensityPatientModel {
    fn build(backbone: &BackboneConfig) -> (Sequential, Sequential) {
        let mut layers = backbone.layers();
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dropout {
            rate: backbone.dropout_rate,
        });
        let head = Sequential::new(vec![Layer::Dense(Dense {
            inputs: 4 * backbone.feature_width,
            outputs: 2,
        })]);
        (Sequential::new(layers), head)
    }

    /// Branches initialized with the view model's backbone weights.
    pub fn from_view_model(view: &DensityViewModel, seed: u64) -> Result<Self> {
        let backbone = view.net.backbone.clone().with_dropout(PATIENT_DROPOUT);
        backbone.validate()?;
        let (branch, head) = Self::build(&backbone);
        let nb = branch.param_count();
        if nb != view.net.trunk_param_count() {
            return Err(Error::Contract("view weights do not fit the patient branches".into()));
        }
        let mut params = Vec::with_capacity(4 * nb + head.param_count());
        for _ in 0..4 {
            params.extend_from_slice(view.net.trunk_params());
        }
        params.resize(4 * nb + head.param_count(), 0.0);
        head.init(&mut params[4 * nb..], &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            backbone,
            branch,
            head,
            params,
        })
    }

    /// Randomly initialized branches (no view pre-training).
    pub fn random(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        let view = DensityViewModel::new(backbone, seed)?;
        Self::from_view_model(&view, seed.wrapping_add(1))
    }

    pub fn from_params(backbone: BackboneConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::random(backbone, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Integrity(format!(
                "density patient model expects {} weights, found {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    fn branch_params<'p>(&self, params: &'p [f64], i: usize) -> &'p [f64] {
        let nb = self.branch.param_count();
        &params[i * nb..(i + 1) * nb]
    }

    fn features_with(&self, params: &[f64], views: &[Tensor; 4]) -> Vec<f64> {
        let mut feat = Vec::with_capacity(4 * self.backbone.feature_width);
        for (i, v) in views.iter().enumerate() {
            feat.extend(self.branch.infer(self.branch_params(params, i), v.clone()).data);
        }
        feat
    }

    fn probabilities_from(&self, params: &[f64], feat: Vec<f64>) -> [f64; 2] {
        let nb = self.branch.param_count();
        let logits = self.head.infer(&params[4 * nb..], Tensor::vector(feat));
        let p = softmax(&logits.data);
        [p[0], p[1]]
    }

    pub fn check_inputs(&self, views: &[Tensor; 4]) -> Result<()> {
        let expected = self.backbone.input_shape();
        match views.iter().position(|v| v.shape() != expected) {
            Some(i) => Err(Error::Contract(format!(
                "view {i} has shape {:?}, expected {expected:?}",
                views[i].shape()
            ))),
            None => Ok(()),
        }
    }

    /// Class probabilities and the concatenated pooled view features.
    pub fn predict(&self, views: &[Tensor; 4]) -> Result<([f64; 2], Vec<f64>)> {
        self.check_inputs(views)?;
        let feat = self.features_with(&self.params, views);
        Ok((self.probabilities_from(&self.params, feat.clone()), feat))
    }
}

impl Trainable for DensityPatientModel {
    type Input = [Tensor; 4];

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn train_sample(
        &self,
        params: &[f64],
        views: &[Tensor; 4],
        label: usize,
        policy: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        let nb = self.branch.param_count();
        let fw = self.backbone.feature_width;
        let mut feat = Vec::with_capacity(4 * fw);
        let mut tapes = Vec::with_capacity(4);
        for (i, v) in views.iter().enumerate() {
            let x = augment(v, &[], policy, rng).image;
            let (f, tape) = self
                .branch
                .forward(self.branch_params(params, i), x, &mut Mode::Train(rng));
            feat.extend(f.data);
            tapes.push(tape);
        }
        let (ph, gh_all) = (&params[4 * nb..], 4 * nb);
        let (logits, tape_h) = self.head.forward(ph, Tensor::vector(feat), &mut Mode::Train(rng));
        let (loss, gl) = softmax_cross_entropy(&logits.data, label, 1.0);
        let (gb, gh) = grads.split_at_mut(gh_all);
        let gf = self.head.backward(ph, tape_h, Tensor::vector(gl), gh);
        for (i, tape) in tapes.into_iter().enumerate().rev() {
            let g = Tensor::from_vec(fw, 1, 1, gf.data[i * fw..(i + 1) * fw].to_vec());
            self.branch
                .backward(self.branch_params(params, i), tape, g, &mut gb[i * nb..(i + 1) * nb]);
        }
        loss
    }

    fn probabilities(&self, params: &[f64], views: &[Tensor; 4]) -> [f64; 2] {
        let feat = self.features_with(params, views);
        self.probabilities_from(params, feat)
    }
}

pub fn train_density_patient(
    view: &DensityViewModel,
    train: &[Labeled<[Tensor; 4]>],
    val: &[Labeled<[Tensor; 4]>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<DensityPatientModel> {
    check_labels(train, val, "density patient")?;
    let mut model = DensityPatientModel::from_view_model(view, cfg.seed)?;
    for s in train.iter().chain(val) {
        model.check_inputs(&s.input)?;
    }
    model.params = fit(&model, model.params.clone(), train, val, cfg, "density_patient", log)?;
    Ok(model)
}

/// Dense-class probability and the concatenated view feature.
pub fn predict_density(model: &DensityPatientModel, views: &[Tensor; 4]) -> Result<(f64, Vec<f64>)> {
    let (p, f) = model.predict(views)?;
    Ok((p[1], f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PreprocessProfile;

    fn backbone() -> BackboneConfig {
        BackboneConfig::new(16, PreprocessProfile::density(1.0 / 8.0).unwrap())
    }

    fn views(seed: usize) -> [Tensor; 4] {
        std::array::from_fn(|k| {
            let data = (0..44 * 28)
                .map(|i| ((i * 31 + k * 977 + seed * 7877) % 256) as f64)
                .collect();
            Tensor::from_vec(1, 44, 28, data)
        })
    }

    #[test]
    fn feature_is_four_branch_widths() {
        let m = DensityPatientModel::random(backbone(), 3).unwrap();
        let (p, f) = predict_density(&m, &views(1)).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(f.len(), 64);
        assert_eq!(predict_density(&m, &views(1)).unwrap(), (p, f));
    }

    #[test]
    fn branch_order_matters() {
        let mut m = DensityPatientModel::random(backbone(), 3).unwrap();
        let nb = m.branch.param_count();
        for i in 0..nb {
            m.params[nb + i] *= 1.5;
        }
        let v = views(2);
        let swapped = [v[1].clone(), v[0].clone(), v[2].clone(), v[3].clone()];
        assert_ne!(m.predict(&v).unwrap().0, m.predict(&swapped).unwrap().0);
    }

    #[test]
    fn mean_view_score_is_average() {
        let view = DensityViewModel::new(backbone(), 5).unwrap();
        let v = views(4);
        let manual: f64 = v.iter().map(|t| view.predict(t).unwrap()).sum::<f64>() / 4.0;
        assert_eq!(mean_view_score(&view, &v).unwrap(), manual);
    }

    #[test]
    fn patient_branches_copy_view_features() {
        let view = DensityViewModel::new(backbone(), 5).unwrap();
        let m = DensityPatientModel::from_view_model(&view, 1).unwrap();
        let v = views(6);
        let (_, f) = m.predict(&v).unwrap();
        assert_eq!(&f[16..32], &view.net.predict(&v[1]).unwrap().1[..]);
    }
}
