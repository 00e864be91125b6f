//! Patient-level meta-models combining the task models' scores or features.

mod bundle;
mod embedding;
mod heads;
mod layout;

pub use bundle::{apply_normalizer, build_feature_bundle, fit_normalizer, FeatureBundle, Normalizer};
pub use embedding::{
    train_feature_fusion, EmbeddingNet, EmbeddingNetConfig, EMBEDDING_BATCH, EMBEDDING_DROPOUT, EMBEDDING_LEARNING_RATE,
};
pub use heads::{
    default_grid, log_loss, train_score_fusion, HeadParam, Mlp, RandomForest, ScoreFusionHead, ScoreHeadKind,
    ScoreModel, Svm, Tree, TreeNode, FOREST_TREE_GRID, SVM_C_GRID,
};
pub use layout::{
    build_score_vector, ensemble_max, retained_detections, FusionConfig, FusionTarget, FusionVector, Layout, Slot,
    MAX_DETECTIONS_PER_VIEW,
};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::taskmodels::Detection;

/// Decision threshold on the positive-class probability.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Task-model outputs and labels of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub case_id: String,
    pub split: Split,
    pub has_lesion: bool,
    pub is_malignant: bool,
    pub is_dense: bool,
    /// Patient density model probability of the dense class.
    pub p_density: f64,
    pub feat_density: Vec<f64>,
    /// Single-view density model probabilities in view order.
    pub p_density_views: [f64; 4],
    pub p_findings: [f64; 4],
    pub feat_findings: [Vec<f64>; 4],
    /// Detections per view, confidence-descending.
    pub detections: [Vec<Detection>; 4],
    /// Whole-image pooled localizer feature per view.
    pub background: [Vec<f64>; 4],
}

impl PatientRecord {
    pub fn label(&self, target: FusionTarget) -> usize {
        usize::from(match target {
            FusionTarget::Lesion => self.has_lesion,
            FusionTarget::Malignancy => self.is_malignant,
        })
    }

    pub fn score_vector(&self, config: FusionConfig) -> Result<FusionVector> {
        build_score_vector(Some(self.p_density), &self.p_findings, &self.detections, config)
    }

    pub fn feature_bundle(&self, config: FusionConfig, feature_width: usize) -> Result<FeatureBundle> {
        build_feature_bundle(
            Some(&self.feat_density),
            &self.feat_findings,
            &self.detections,
            &self.background,
            config,
            feature_width,
        )
    }

    pub fn ensemble_max(&self, target: FusionTarget) -> f64 {
        ensemble_max(&self.p_findings, &self.detections, target)
    }
}

/// A trained patient meta-model.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaModel {
    Score {
        layout: Layout,
        head: ScoreFusionHead,
    },
    Feature {
        layout: Layout,
        normalizer: Normalizer,
        net: EmbeddingNet,
    },
}

impl MetaModel {
    pub fn layout(&self) -> &Layout {
        match self {
            MetaModel::Score { layout, .. } | MetaModel::Feature { layout, .. } => layout,
        }
    }

    /// Positive-class probability of a prepared score vector.
    pub fn predict_vector(&self, w: &FusionVector) -> Result<f64> {
        match self {
            MetaModel::Score { layout, head } => {
                if &w.layout != layout {
                    return Err(Error::Contract(format!(
                        "score vector layout '{}' differs from training layout '{}'",
                        w.layout.descriptor(),
                        layout.descriptor()
                    )));
                }
                Ok(head.predict(&w.values))
            }
            MetaModel::Feature { .. } => Err(Error::Contract("feature fusion model needs a feature bundle".into())),
        }
    }

    /// Positive-class probability of a raw (unnormalized) feature bundle.
    pub fn predict_bundle(&self, bundle: &FeatureBundle) -> Result<f64> {
        match self {
            MetaModel::Feature { normalizer, net, .. } => {
                net.check_bundle(bundle)?;
                Ok(net.predict(&apply_normalizer(normalizer, bundle)?)?[1])
            }
            MetaModel::Score { .. } => Err(Error::Contract("score fusion model needs a score vector".into())),
        }
    }
}

/// Positive-class probability for one case.
pub fn predict_patient(model: &MetaModel, record: &PatientRecord) -> Result<f64> {
    let config = model.layout().config;
    match model {
        MetaModel::Score { .. } => model.predict_vector(&record.score_vector(config)?),
        MetaModel::Feature { net, .. } => {
            model.predict_bundle(&record.feature_bundle(config, net.config.feature_width)?)
        }
    }
}
