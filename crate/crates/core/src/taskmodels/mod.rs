//! Density, findings and localization models with their training procedures.

mod classifier;
mod config;
mod density;
mod findings;
mod localizer;
mod train;

pub use classifier::{HeadKind, ImageClassifier};
pub use config::{BackboneConfig, EarlyStopConfig, StopMetric, TrainConfig};
pub use density::{
    mean_view_score, predict_density, train_density_patient, train_density_view, DensityPatientModel, DensityViewModel,
    PATIENT_DROPOUT, VIEW_DROPOUT,
};
pub use findings::{
    predict_findings, train_findings, train_patch_classifier, FindingsModel, PatchClassifier, FINDINGS_DROPOUT,
};
pub use localizer::{
    class_nms, detect_lesions, detection_order, localizer_loss, sort_detections, train_localizer, AnchorTarget,
    Candidate, Detection, Localizer, LocalizerConfig, LocalizerSample, FUSION_SCORE_THRESHOLD, NMS_IOU, NUM_CLASSES,
    FULL_SCALE_ANCHORS, REPORT_SCORE_THRESHOLD,
};
pub use train::{evaluate, fit, fit_with_finetune, make_batches, Evaluation, Labeled, LogRow, TrainLog, Trainable};
