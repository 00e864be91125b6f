use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, Conv2d, Dense, Layer, Mode, OptimizerKind, Sequential, Tensor};
use crate::preprocess::AugmentationPolicy;
use crate::taskmodels::{fit, EarlyStopConfig, Labeled, StopMetric, TrainConfig, TrainLog, Trainable};

use super::bundle::FeatureBundle;
use super::layout::FusionConfig;

pub const EMBEDDING_DROPOUT: f64 = 0.1;
pub const EMBEDDING_LEARNING_RATE: f64 = 5e-4;
pub const EMBEDDING_BATCH: usize = 8;

/// Shape of the multi-branch feature fusion network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingNetConfig {
    pub feature_width: usize,
    pub fusion: FusionConfig,
    /// Convolution channels of every branch block.
    pub channels: usize,
    /// Width of the first dense layer.
    pub hidden: usize,
    pub dropout: f64,
}

impl EmbeddingNetConfig {
    pub fn new(feature_width: usize, fusion: FusionConfig) -> Self {
        Self {
            feature_width,
            fusion,
            channels: 8,
            hidden: 32,
            dropout: EMBEDDING_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.feature_width < 8 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "embedding net needs feature_width >= 8 and non-zero channels and hidden width".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "embedding dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Slot count and block count per branch, in bundle order.
    fn branches(&self) -> Vec<(usize, usize)> {
        let mut b = Vec::with_capacity(3);
        if self.fusion.include_density {
            b.push((4, 2));
        }
        b.push((4, 2));
        b.push((4 * self.fusion.n, 3));
        b
    }

    /// Training schedule: Adam, batch 8, lr 5e-4, class-balanced batches and
    /// early stopping on validation loss.
    pub fn train_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            early_stopping: Some(EarlyStopConfig {
                metric: StopMetric::ValLoss,
                patience: 10,
                tolerance: 1e-3,
            }),
            stratified: true,
            seed,
            ..TrainConfig::new(OptimizerKind::Adam, EMBEDDING_LEARNING_RATE, epochs, EMBEDDING_BATCH)
        }
    }

    pub fn echo(&self, prefix: &str) -> String {
        format!(
            "{prefix}.feature_width = {}\n{prefix}.channels = {}\n{prefix}.hidden = {}\n{prefix}.dropout = {}\n",
            self.feature_width, self.channels, self.hidden, self.dropout
        )
    }
}

/// Feature fusion network: per-branch convolution and pooling blocks over the
/// (slots x feature) grid, concatenation, then two dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub config: EmbeddingNetConfig,
    branches: Vec<Sequential>,
    slots: Vec<usize>,
    head: Sequential,
    pub params: Vec<f64>,
}

impl EmbeddingNet {
    pub fn new(config: EmbeddingNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let fw = config.feature_width;
        let mut branches = Vec::new();
        let mut slots = Vec::new();
        let mut concat = 0;
        for (s, blocks) in config.branches() {
            let mut layers = Vec::new();
            let mut c_in = s;
            for _ in 0..blocks {
                layers.push(Layer::Conv2d(Conv2d::along_width(c_in, config.channels, 3)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool {
                    kernel_h: 1,
                    kernel_w: 2,
                });
                c_in = config.channels;
            }
            let net = Sequential::new(layers);
            let (c, h, w) = net.output_shape((s, 1, fw));
            concat += c * h * w;
            branches.push(net);
            slots.push(s);
        }
        let head = Sequential::new(vec![
            Layer::Relu,
            Layer::Dense(Dense {
                inputs: concat,
                outputs: config.hidden,
            }),
            Layer::Relu,
            Layer::Dropout { rate: config.dropout },
            Layer::Dense(Dense {
                inputs: config.hidden,
                outputs: 2,
            }),
        ]);
        let total = branches.iter().map(Sequential::param_count).sum::<usize>() + head.param_count();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for b in &branches {
            b.init(&mut params[off..off + b.param_count()], &mut rng);
            off += b.param_count();
        }
        head.init(&mut params[off..], &mut rng);
        Ok(Self {
            config,
            branches,
            slots,
            head,
            params,
        })
    }

    pub fn from_params(config: EmbeddingNetConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Integrity(format!(
                "embedding net expects {} weights, found {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    /// Branch input grids in bundle order.
    fn inputs(&self, bundle: &FeatureBundle) -> Vec<Tensor> {
        let fw = self.config.feature_width;
        let mut out = Vec::with_capacity(3);
        if let Some(d) = &bundle.density {
            out.push(Tensor::from_vec(4, 1, fw, d.clone()));
        }
        out.push(Tensor::from_vec(4, 1, fw, bundle.findings.concat()));
        out.push(Tensor::from_vec(
            bundle.localizer.len(),
            1,
            fw,
            bundle.localizer.concat(),
        ));
        out
    }

    pub fn check_bundle(&self, bundle: &FeatureBundle) -> Result<()> {
        let fw = self.config.feature_width;
        if bundle.density.is_some() != self.config.fusion.include_density {
            return Err(Error::Contract(
                "density branch presence differs from the fusion layout".into(),
            ));
        }
        if let Some(d) = &bundle.density {
            if d.len() != 4 * fw {
                return Err(Error::Contract(format!(
                    "density feature has length {}, expected {}",
                    d.len(),
                    4 * fw
                )));
            }
        }
        if bundle.findings.iter().any(|f| f.len() != fw) {
            return Err(Error::Contract(format!("findings features must have length {fw}")));
        }
        if bundle.localizer.len() != 4 * self.config.fusion.n || bundle.localizer.iter().any(|f| f.len() != fw) {
            return Err(Error::Contract(format!(
                "localizer branch expects {} features of length {fw}",
                4 * self.config.fusion.n
            )));
        }
        Ok(())
    }

    fn branch_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        self.branches
            .iter()
            .map(|b| {
                let r = off..off + b.param_count();
                off = r.end;
                r
            })
            .collect()
    }

    /// Loss for one bundle; gradients accumulate into `grads`.
    fn forward_backward(
        &self,
        params: &[f64],
        bundle: &FeatureBundle,
        label: usize,
        mode: &mut Mode<'_>,
        grads: &mut [f64],
    ) -> f64 {
        let ranges = self.branch_ranges();
        let head_off = ranges.last().map_or(0, |r| r.end);
        let mut concat = Vec::new();
        let mut tapes = Vec::with_capacity(self.branches.len());
        for ((b, r), x) in self.branches.iter().zip(&ranges).zip(self.inputs(bundle)) {
            let (y, tape) = b.forward(&params[r.clone()], x, mode);
            tapes.push((y.shape(), tape));
            concat.extend(y.data);
        }
        let (logits, tape) = self.head.forward(&params[head_off..], Tensor::vector(concat), mode);
        let (loss, gl) = softmax_cross_entropy(&logits.data, label, 1.0);
        let (gb, gh) = grads.split_at_mut(head_off);
        let gc = self.head.backward(&params[head_off..], tape, Tensor::vector(gl), gh);
        let mut pos = 0;
        for ((b, r), ((c, h, w), tape)) in self.branches.iter().zip(&ranges).zip(tapes) {
            let len = c * h * w;
            let g = Tensor::from_vec(c, h, w, gc.data[pos..pos + len].to_vec());
            pos += len;
            b.backward(&params[r.clone()], tape, g, &mut gb[r.clone()]);
        }
        loss
    }

    /// Loss and gradient in evaluation mode (dropout off).
    pub fn loss_and_grad(&self, params: &[f64], bundle: &FeatureBundle, label: usize) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; params.len()];
        let loss = self.forward_backward(params, bundle, label, &mut Mode::Eval, &mut grads);
        (loss, grads)
    }

    pub fn predict(&self, bundle: &FeatureBundle) -> Result<[f64; 2]> {
        self.check_bundle(bundle)?;
        Ok(self.probabilities(&self.params, bundle))
    }
}

impl Trainable for EmbeddingNet {
    type Input = FeatureBundle;

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn train_sample(
        &self,
        params: &[f64],
        bundle: &FeatureBundle,
        label: usize,
        _: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        self.forward_backward(params, bundle, label, &mut Mode::Train(rng), grads)
    }

    fn probabilities(&self, params: &[f64], bundle: &FeatureBundle) -> [f64; 2] {
        let ranges = self.branch_ranges();
        let head_off = ranges.last().map_or(0, |r| r.end);
        let mut concat = Vec::new();
        for ((b, r), x) in self.branches.iter().zip(&ranges).zip(self.inputs(bundle)) {
            concat.extend(b.infer(&params[r.clone()], x).data);
        }
        let p = softmax(&self.head.infer(&params[head_off..], Tensor::vector(concat)).data);
        [p[0], p[1]]
    }
}

fn check_binary(labels: impl Iterator<Item = usize>) -> Result<()> {
    let mut seen = [false; 2];
    for l in labels {
        *seen
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("fusion label {l} is not 0 or 1")))? = true;
    }
    if !(seen[0] && seen[1]) {
        return Err(Error::Data("fusion training labels contain a single class".into()));
    }
    Ok(())
}

pub(crate) fn check_fusion_labels(labels: &[usize]) -> Result<()> {
    check_binary(labels.iter().copied())
}

/// Train the feature fusion network on normalized bundles.
pub fn train_feature_fusion(
    train: &[Labeled<FeatureBundle>],
    val: &[Labeled<FeatureBundle>],
    config: EmbeddingNetConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<EmbeddingNet> {
    check_binary(train.iter().map(|s| s.label))?;
    let mut net = EmbeddingNet::new(config, cfg.seed)?;
    for s in train.iter().chain(val) {
        net.check_bundle(&s.input)?;
    }
    let stage = format!("feature_fusion_{}{}", config.fusion.target, config.fusion.suffix());
    net.params = fit(&net, net.params.clone(), train, val, cfg, &stage, log)?;
    Ok(net)
}
