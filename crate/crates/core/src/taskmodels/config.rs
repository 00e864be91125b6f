use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, DepthwiseConv2d, Layer, OptimizerKind, Shape};
use crate::preprocess::{AugmentationPolicy, IntensityMode, PreprocessProfile};

/// Depthwise-separable convolutional feature extractor.
///
/// A 3×3 stride-2 stem is followed by one depthwise-separable block per
/// remaining multiplier; channel counts are `feature_width · m / m_last`, so
/// the last block always emits `feature_width` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub feature_width: usize,
    pub stage_channel_multipliers: Vec<usize>,
    pub input_profile: PreprocessProfile,
    /// Dropout applied by the classification heads on top of the backbone.
    pub dropout_rate: f64,
    /// Stride of the last block; 1 keeps a finer map for detection.
    pub final_stride: usize,
}

impl BackboneConfig {
    pub const DESK_FEATURE_WIDTH: usize = 64;
    pub const FULL_SCALE_FEATURE_WIDTH: usize = 1024;

    pub fn new(feature_width: usize, input_profile: PreprocessProfile) -> Self {
        Self {
            feature_width,
            stage_channel_multipliers: vec![1, 2, 4, 8],
            input_profile,
            dropout_rate: 0.0,
            final_stride: 2,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_width < 8 {
            return Err(Error::Config(format!("feature width {} below 8", self.feature_width)));
        }
        if self.stage_channel_multipliers.len() < 2 || self.stage_channel_multipliers.contains(&0) {
            return Err(Error::Config("at least two positive stage multipliers required".into()));
        }
        if self.channels().contains(&0) {
            return Err(Error::Config("stage multipliers yield an empty stage".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !matches!(self.final_stride, 1 | 2) {
            return Err(Error::Config(format!(
                "final stride {} not in {{1, 2}}",
                self.final_stride
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        let last = *self.stage_channel_multipliers.last().expect("validated non-empty");
        self.stage_channel_multipliers
            .iter()
            .map(|m| self.feature_width * m / last)
            .collect()
    }

    /// Total downsampling factor of the feature map.
    pub fn stride(&self) -> usize {
        let blocks = self.stage_channel_multipliers.len() - 1;
        (1 << blocks) * self.final_stride
    }

    pub fn input_shape(&self) -> Shape {
        (1, self.input_profile.target_height, self.input_profile.target_width)
    }

    fn input_norm(&self) -> Layer {
        match self.input_profile.intensity_mode {
            IntensityMode::Rescale0To255 => Layer::InputNorm {
                scale: 1.0 / 127.5,
                shift: -1.0,
            },
            IntensityMode::Rescale01ZScore => Layer::InputNorm { scale: 1.0, shift: 0.0 },
            IntensityMode::Raw => Layer::InputNorm {
                scale: 1.0 / 32767.5,
                shift: -1.0,
            },
        }
    }

    /// Layers up to (not including) global pooling.
    pub fn layers(&self) -> Vec<Layer> {
        let ch = self.channels();
        let mut layers = vec![
            self.input_norm(),
            Layer::Conv2d(Conv2d::square(1, ch[0], 3, 2)),
            Layer::Relu,
        ];
        for i in 1..ch.len() {
            let stride = if i + 1 == ch.len() { self.final_stride } else { 2 };
            layers.push(Layer::Depthwise(DepthwiseConv2d {
                channels: ch[i - 1],
                kernel: 3,
                stride,
            }));
            layers.push(Layer::Relu);
            layers.push(Layer::Conv2d(Conv2d::square(ch[i - 1], ch[i], 1, 1)));
            layers.push(Layer::Relu);
        }
        layers
    }

    pub fn echo(&self, prefix: &str) -> String {
        let m: Vec<String> = self.stage_channel_multipliers.iter().map(|v| v.to_string()).collect();
        let p = &self.input_profile;
        format!(
            "{prefix}.feature_width = {}\n{prefix}.stage_channel_multipliers = {}\n{prefix}.dropout_rate = {}\n\
             {prefix}.final_stride = {}\n{prefix}.input_height = {}\n{prefix}.input_width = {}\n\
             {prefix}.intensity_mode = {}\n{prefix}.scale_factor = {}\n",
            self.feature_width,
            m.join(","),
            self.dropout_rate,
            self.final_stride,
            p.target_height,
            p.target_width,
            p.intensity_mode,
            p.scale_factor
        )
    }
}

/// Quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMetric {
    ValLoss,
    ValAuc,
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopMetric::ValLoss => "val_loss",
            StopMetric::ValAuc => "val_auc",
        })
    }
}

impl FromStr for StopMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_loss" => Ok(StopMetric::ValLoss),
            "val_auc" => Ok(StopMetric::ValAuc),
            other => Err(Error::Config(format!("unknown early-stopping metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopConfig {
    pub metric: StopMetric,
    pub patience: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Reduce-on-plateau (factor, patience) on validation loss.
    pub plateau: Option<(f64, usize)>,
    pub epochs: usize,
    /// Iteration budget; overrides `epochs` for iteration-based training.
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub early_stopping: Option<EarlyStopConfig>,
    /// First epoch (1-based) included in the weight average.
    pub swa_start: Option<usize>,
    /// Class-balanced batches.
    pub stratified: bool,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Second pass at a reduced learning rate; 0 epochs disables it.
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            optimizer,
            learning_rate,
            plateau: None,
            epochs,
            iterations: None,
            batch_size,
            early_stopping: None,
            swa_start: None,
            stratified: false,
            seed: 0,
            augmentation: AugmentationPolicy::none(),
            finetune_epochs: 0,
            finetune_learning_rate: learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (self.epochs > 0 || self.iterations.is_some_and(|i| i > 0));
        if !positive {
            return Err(Error::Config(
                "learning rate, batch size and epochs must be positive".into(),
            ));
        }
        if let Some((factor, patience)) = self.plateau {
            if !(factor > 0.0 && factor < 1.0) || patience == 0 {
                return Err(Error::Config(
                    "plateau factor must lie in (0, 1) with positive patience".into(),
                ));
            }
        }
        if let Some(es) = self.early_stopping {
            if es.patience == 0 || es.tolerance < 0.0 {
                return Err(Error::Config(
                    "early stopping needs positive patience and tolerance ≥ 0".into(),
                ));
            }
        }
        if self.swa_start == Some(0) {
            return Err(Error::Config("SWA start epoch is 1-based".into()));
        }
        if self.finetune_epochs > 0 && self.finetune_learning_rate <= 0.0 {
            return Err(Error::Config("fine-tune learning rate must be positive".into()));
        }
        self.augmentation.validate()
    }

    /// Configuration of the fine-tune pass.
    pub fn finetune(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune_learning_rate,
            epochs: self.finetune_epochs,
            swa_start: None,
            finetune_epochs: 0,
            seed: self.seed ^ 0x5EED_F17E,
            ..self.clone()
        }
    }

    pub fn echo(&self, prefix: &str) -> String {
        let mut s = format!(
            "{prefix}.optimizer = {}\n{prefix}.learning_rate = {}\n{prefix}.epochs = {}\n{prefix}.batch_size = {}\n\
             {prefix}.stratified = {}\n{prefix}.seed = {}\n{prefix}.finetune_epochs = {}\n{prefix}.finetune_learning_rate = {}\n",
            self.optimizer,
            self.learning_rate,
            self.epochs,
            self.batch_size,
            self.stratified,
            self.seed,
            self.finetune_epochs,
            self.finetune_learning_rate
        );
        if let Some(i) = self.iterations {
            s += &format!("{prefix}.iterations = {i}\n");
        }
        if let Some((f, p)) = self.plateau {
            s += &format!("{prefix}.plateau_factor = {f}\n{prefix}.plateau_patience = {p}\n");
        }
        if let Some(es) = self.early_stopping {
            s += &format!(
                "{prefix}.early_stop_metric = {}\n{prefix}.early_stop_patience = {}\n{prefix}.early_stop_tolerance = {}\n",
                es.metric, es.patience, es.tolerance
            );
        }
        if let Some(e) = self.swa_start {
            s += &format!("{prefix}.swa_start = {e}\n");
        }
        s
    }
}
