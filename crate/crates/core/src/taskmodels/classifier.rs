use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, Dense, Layer, Mode, Sequential, Tensor};
use crate::preprocess::{augment, AugmentationPolicy};

use super::config::BackboneConfig;
use super::train::Trainable;

/// Layers placed after global average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Dropout then a dense layer to two logits.
    Linear,
    /// Dense, ReLU, dropout, dense to two logits.
    Hidden,
}

impl HeadKind {
    fn layers(self, width: usize, dropout: f64) -> Vec<Layer> {
        let dense = |inputs, outputs| Layer::Dense(Dense { inputs, outputs });
        match self {
            HeadKind::Linear => vec![Layer::Dropout { rate: dropout }, dense(width, 2)],
            HeadKind::Hidden => vec![
                dense(width, width),
                Layer::Relu,
                Layer::Dropout { rate: dropout },
                dense(width, 2),
            ],
        }
    }
}

/// Backbone with global pooling (the trunk, whose output is the image
/// feature) and a two-class head. Parameters are stored trunk first.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageClassifier {
    pub backbone: BackboneConfig,
    pub head_kind: HeadKind,
    trunk: Sequential,
    head: Sequential,
    pub params: Vec<f64>,
}

impl ImageClassifier {
    pub fn new(backbone: BackboneConfig, head_kind: HeadKind, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut layers = backbone.layers();
        layers.push(Layer::GlobalAvgPool);
        let trunk = Sequential::new(layers);
        let head = Sequential::new(head_kind.layers(backbone.feature_width, backbone.dropout_rate));
        let mut params = vec![0.0; trunk.param_count() + head.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, h) = params.split_at_mut(trunk.param_count());
        trunk.init(t, &mut rng);
        head.init(h, &mut rng);
        Ok(Self {
            backbone,
            head_kind,
            trunk,
            head,
            params,
        })
    }

    /// Rebuild from a configuration and stored weights.
    pub fn from_params(backbone: BackboneConfig, head_kind: HeadKind, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(backbone, head_kind, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Integrity(format!(
                "classifier expects {} weights, found {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.param_count()
    }

    pub fn trunk_params(&self) -> &[f64] {
        &self.params[..self.trunk.param_count()]
    }

    /// Copy trunk weights from a classifier with an identical backbone.
    pub fn load_trunk(&mut self, weights: &[f64]) -> Result<()> {
        let n = self.trunk.param_count();
        if weights.len() != n {
            return Err(Error::Contract(format!(
                "trunk expects {n} weights, found {}",
                weights.len()
            )));
        }
        self.params[..n].copy_from_slice(weights);
        Ok(())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.backbone.input_shape();
        if x.shape() != expected {
            return Err(Error::Contract(format!(
                "input shape {:?}, expected {expected:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Pooled feature vector (length `feature_width`).
    pub fn features_with(&self, params: &[f64], x: &Tensor) -> Vec<f64> {
        self.trunk.infer(&params[..self.trunk.param_count()], x.clone()).data
    }

    fn head_probabilities(&self, params: &[f64], feature: Vec<f64>) -> [f64; 2] {
        let logits = self
            .head
            .infer(&params[self.trunk.param_count()..], Tensor::vector(feature));
        let p = softmax(&logits.data);
        [p[0], p[1]]
    }

    /// Class probabilities and pooled feature.
    pub fn predict(&self, x: &Tensor) -> Result<([f64; 2], Vec<f64>)> {
        self.check_input(x)?;
        let f = self.features_with(&self.params, x);
        Ok((self.head_probabilities(&self.params, f.clone()), f))
    }

    /// Loss and gradient of one (already augmented) sample.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: Tensor,
        label: usize,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        let nt = self.trunk.param_count();
        let (pt, ph) = params.split_at(nt);
        let (gt, gh) = grads.split_at_mut(nt);
        let mut mode = Mode::Train(rng);
        let (f, tape_t) = self.trunk.forward(pt, x, &mut mode);
        let (logits, tape_h) = self.head.forward(ph, f, &mut mode);
        let (loss, gl) = softmax_cross_entropy(&logits.data, label, 1.0);
        let gf = self.head.backward(ph, tape_h, Tensor::vector(gl), gh);
        self.trunk.backward(pt, tape_t, gf, gt);
        loss
    }
}

impl Trainable for ImageClassifier {
    type Input = Tensor;

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn train_sample(
        &self,
        params: &[f64],
        input: &Tensor,
        label: usize,
        policy: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        let x = augment(input, &[], policy, rng).image;
        self.loss_and_grad(params, x, label, rng, grads)
    }

    fn probabilities(&self, params: &[f64], input: &Tensor) -> [f64; 2] {
        let f = self.features_with(params, input);
        self.head_probabilities(params, f)
    }
}
