//! Breast segmentation, model-specific resizing and normalization, patch
//! sampling and training-time augmentation.

mod augment;
mod patches;
mod profile;
mod resize;
mod segment;

pub use augment::{augment, augment_seeded, gaussian_blur, Affine, AugmentationPolicy, Augmented};
pub use patches::{
    breast_overlap, lesion_overlap, sample_patch_windows, sample_patches, Patch, PatchLabel, PatchSample, PatchWindow,
};
pub use profile::{prepare_view, IntensityMode, PreparedView, PreprocessProfile};
pub use resize::resize_bicubic;
pub use segment::{binary_closing, otsu_threshold, segment_breast, Mask};
