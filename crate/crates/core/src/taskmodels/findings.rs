use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::classifier::{HeadKind, ImageClassifier};
use super::config::{BackboneConfig, TrainConfig};
use super::train::{fit_with_finetune, Labeled, TrainLog};

/// Dropout between the two dense layers of the findings head.
pub const FINDINGS_DROPOUT: f64 = 0.5;

/// Lesion-vs-background patch classifier used to pre-train the findings backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    pub net: ImageClassifier,
}

impl PatchClassifier {
    pub fn new(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: ImageClassifier::new(backbone.with_dropout(0.0), HeadKind::Linear, seed)?,
        })
    }

    /// Lesion probability of a patch.
    pub fn predict(&self, patch: &Tensor) -> Result<f64> {
        Ok(self.net.predict(patch)?.0[1])
    }
}

pub fn train_patch_classifier(
    backbone: BackboneConfig,
    train: &[Labeled<Tensor>],
    val: &[Labeled<Tensor>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PatchClassifier> {
    let has = |c| train.iter().any(|s| s.label == c);
    if !(has(0) && has(1)) {
        return Err(Error::Data("degenerate patch labels".into()));
    }
    let mut model = PatchClassifier::new(backbone, cfg.seed)?;
    for s in train.iter().chain(val) {
        model.net.check_input(&s.input)?;
    }
    model.net.params = fit_with_finetune(&model.net, model.net.params.clone(), train, val, cfg, "patch", log)?;
    Ok(model)
}

/// Whole-view classifier deciding whether a view contains any lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct FindingsModel {
    pub net: ImageClassifier,
    pub pretrained: bool,
}

impl FindingsModel {
    pub fn new(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: ImageClassifier::new(backbone.with_dropout(FINDINGS_DROPOUT), HeadKind::Hidden, seed)?,
            pretrained: false,
        })
    }
}

/// Train the findings model, starting from the patch classifier's backbone
/// when given (pass `None` for the no-pre-training ablation).
pub fn train_findings(
    patch: Option<&PatchClassifier>,
    backbone: BackboneConfig,
    train: &[Labeled<Tensor>],
    val: &[Labeled<Tensor>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<FindingsModel> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("findings: empty training or validation split".into()));
    }
    let mut model = FindingsModel::new(backbone, cfg.seed)?;
    if let Some(p) = patch {
        model.net.load_trunk(p.net.trunk_params())?;
        model.pretrained = true;
    }
    for s in train.iter().chain(val) {
        model.net.check_input(&s.input)?;
    }
    let stage = if model.pretrained {
        "findings"
    } else {
        "findings_scratch"
    };
    model.net.params = fit_with_finetune(&model.net, model.net.params.clone(), train, val, cfg, stage, log)?;
    Ok(model)
}

/// Lesion probability of a view and its pooled feature.
pub fn predict_findings(model: &FindingsModel, image: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (p, f) = model.net.predict(image)?;
    Ok((p[1], f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerKind;
    use crate::preprocess::{IntensityMode, PreprocessProfile};

    fn patch_backbone() -> BackboneConfig {
        let p = PreprocessProfile::scaled((16, 16), IntensityMode::Rescale01ZScore, 1.0).unwrap();
        BackboneConfig::new(8, p)
    }

    #[test]
    fn single_class_patches_are_rejected() {
        let s: Vec<Labeled<Tensor>> = (0..3)
            .map(|i| Labeled {
                id: i.to_string(),
                input: Tensor::zeros(1, 16, 16),
                label: 1,
            })
            .collect();
        let cfg = TrainConfig::new(OptimizerKind::Adam, 1e-3, 1, 2);
        let err = train_patch_classifier(patch_backbone(), &s, &s, &cfg, &mut TrainLog::default()).unwrap_err();
        assert!(err.to_string().contains("degenerate patch labels"));
    }

    #[test]
    fn findings_inherit_patch_backbone() {
        let patch = PatchClassifier::new(patch_backbone(), 4).unwrap();
        let p = PreprocessProfile::scaled((32, 24), IntensityMode::Rescale01ZScore, 1.0).unwrap();
        let mut model = FindingsModel::new(BackboneConfig::new(8, p), 1).unwrap();
        model.net.load_trunk(patch.net.trunk_params()).unwrap();
        let img = Tensor::from_vec(1, 32, 24, (0..768).map(|i| (i % 13) as f64 - 6.0).collect());
        let (prob, feat) = predict_findings(&model, &img).unwrap();
        assert!((0.0..=1.0).contains(&prob));
        assert_eq!(feat.len(), 8);
    }
}
