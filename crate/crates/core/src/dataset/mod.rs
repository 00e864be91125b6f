//! Data model, manifest ingestion, label derivation and the stratified split.

mod image;
mod manifest;
mod split;
mod types;

pub use image::{read_png16, write_png16, Image16, ImageRef};
pub use manifest::{load_manifest, write_manifest, LoadReport, LoadedDataset, Rejection, MANIFEST_COLUMNS};
pub use split::{
    largest_remainder, split_cases, split_dataset, DatasetSplit, SplitCase, SplitOutcome, SplitRatios, SplitReport,
    SplitRow, StratumKey,
};
pub use types::{
    bounding_box_from_mask, derive_case_labels, BBox, CaseLabels, Density, DensitySuper, Exam, Laterality,
    LesionAnnotation, LesionCategory, LesionClass, LesionType, Pathology, PathologyCategory, Projection, Split,
    ViewKey,
};
