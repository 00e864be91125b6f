use std::fmt;
use std::str::FromStr;

use crate::dataset::{BBox, Image16};
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::resize::resize_bicubic;
use super::segment::{segment_breast, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityMode {
    Rescale0To255,
    Rescale01ZScore,
    Raw,
}

impl fmt::Display for IntensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntensityMode::Rescale0To255 => "rescale_0_255",
            IntensityMode::Rescale01ZScore => "rescale_0_1_zscore",
            IntensityMode::Raw => "raw",
        })
    }
}

impl FromStr for IntensityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rescale_0_255" => Ok(IntensityMode::Rescale0To255),
            "rescale_0_1_zscore" => Ok(IntensityMode::Rescale01ZScore),
            "raw" => Ok(IntensityMode::Raw),
            other => Err(Error::Config(format!("unknown intensity mode '{other}'"))),
        }
    }
}

/// Target geometry and intensity mapping of one model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessProfile {
    pub target_height: usize,
    pub target_width: usize,
    pub intensity_mode: IntensityMode,
    pub scale_factor: f64,
}

/// `round(value)` snapped to the nearest multiple of 4 (halves round up), at least 4.
fn to_multiple_of_4(value: f64) -> usize {
    let r = value.round();
    (((r / 4.0) + 0.5).floor() as usize * 4).max(4)
}

impl PreprocessProfile {
    pub const DENSITY_FULL_SCALE: (usize, usize) = (336, 224);
    pub const FINDINGS_FULL_SCALE: (usize, usize) = (1152, 896);
    pub const PATCH_FULL_SCALE: (usize, usize) = (224, 224);
    pub const LOCALIZER_FULL_SCALE: (usize, usize) = (2700, 1200);

    pub fn scaled(full: (usize, usize), intensity_mode: IntensityMode, scale_factor: f64) -> Result<Self> {
        if !(scale_factor > 0.0 && scale_factor <= 1.0) {
            return Err(Error::Config(format!("scale factor {scale_factor} outside (0, 1]")));
        }
        Ok(Self {
            target_height: to_multiple_of_4(full.0 as f64 * scale_factor),
            target_width: to_multiple_of_4(full.1 as f64 * scale_factor),
            intensity_mode,
            scale_factor,
        })
    }

    pub fn density(scale: f64) -> Result<Self> {
        Self::scaled(Self::DENSITY_FULL_SCALE, IntensityMode::Rescale0To255, scale)
    }

    pub fn findings(scale: f64) -> Result<Self> {
        Self::scaled(Self::FINDINGS_FULL_SCALE, IntensityMode::Rescale01ZScore, scale)
    }

    pub fn patch_size(scale: f64) -> Result<usize> {
        Ok(Self::scaled(Self::PATCH_FULL_SCALE, IntensityMode::Rescale01ZScore, scale)?.target_width)
    }

    pub fn localizer(scale: f64) -> Result<Self> {
        Self::scaled(Self::LOCALIZER_FULL_SCALE, IntensityMode::Rescale0To255, scale)
    }
}

/// A view resized and normalized for one model, with its breast mask and the
/// factors mapping source pixel coordinates into the target frame.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub tensor: Tensor,
    pub mask: Mask,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl PreparedView {
    pub fn map_box(&self, b: &BBox) -> BBox {
        b.scaled(self.scale_x, self.scale_y)
    }
}

pub fn prepare_view(image: &Image16, profile: &PreprocessProfile) -> Result<PreparedView> {
    let (w, h) = (image.width, image.height);
    let mut values = image.to_f64();
    let mask = segment_breast(&values, w, h)?;
    for (v, m) in values.iter_mut().zip(&mask.data) {
        if !m {
            *v = 0.0;
        }
    }
    let (src_lo, src_hi) = min_max(&values);
    let (tw, th) = (profile.target_width, profile.target_height);
    let mut out = resize_bicubic(&values, w, h, tw, th);
    out.iter_mut().for_each(|v| *v = v.clamp(src_lo, src_hi));
    let (lo, hi) = min_max(&out);
    let span = if hi > lo { hi - lo } else { 1.0 };
    match profile.intensity_mode {
        IntensityMode::Raw => {}
        IntensityMode::Rescale0To255 => out.iter_mut().for_each(|v| *v = (*v - lo) / span * 255.0),
        IntensityMode::Rescale01ZScore => {
            out.iter_mut().for_each(|v| *v = (*v - lo) / span);
            let n = out.len() as f64;
            let mean = out.iter().sum::<f64>() / n;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let mut std = var.sqrt();
            if std < 1e-8 {
                log::warn!("zero intensity spread; clamping std to 1e-8");
                std = 1e-8;
            }
            out.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    Ok(PreparedView {
        tensor: Tensor::from_vec(1, th, tw, out),
        mask: mask.resized(tw, th),
        scale_x: tw as f64 / w as f64,
        scale_y: th as f64 / h as f64,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn breast_image() -> Image16 {
        let (w, h) = (64, 80);
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if (8..56).contains(&x) && (10..70).contains(&y) {
                    1000 + ((x * 997 + y * 613) % 64535) as u16
                } else {
                    0
                }
            })
            .collect();
        Image16::new(w, h, data)
    }

    #[test]
    fn desk_scale_dimensions() {
        let s = 1.0 / 8.0;
        let d = PreprocessProfile::density(s).unwrap();
        assert_eq!((d.target_height, d.target_width), (44, 28));
        let f = PreprocessProfile::findings(s).unwrap();
        assert_eq!((f.target_height, f.target_width), (144, 112));
        let l = PreprocessProfile::localizer(s).unwrap();
        assert_eq!((l.target_height, l.target_width), (340, 152));
        assert_eq!(PreprocessProfile::patch_size(s).unwrap(), 28);
        let p = PreprocessProfile::findings(1.0).unwrap();
        assert_eq!((p.target_height, p.target_width), (1152, 896));
        assert!(PreprocessProfile::density(0.0).is_err());
    }

    #[test]
    fn rescale_0_255_spans_range() {
        let p = PreprocessProfile::scaled((40, 32), IntensityMode::Rescale0To255, 1.0).unwrap();
        let v = prepare_view(&breast_image(), &p).unwrap();
        let (lo, hi) = min_max(&v.tensor.data);
        assert_eq!(lo, 0.0);
        assert!((hi - 255.0).abs() < 1e-9);
        assert_eq!(v.tensor.shape(), (1, 40, 32));
    }

    #[test]
    fn zscore_mode_is_standardized() {
        let p = PreprocessProfile::scaled((48, 40), IntensityMode::Rescale01ZScore, 1.0).unwrap();
        let v = prepare_view(&breast_image(), &p).unwrap();
        let n = v.tensor.data.len() as f64;
        let mean = v.tensor.data.iter().sum::<f64>() / n;
        let std = (v.tensor.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5);
        assert!((std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn constant_image_is_rejected() {
        let p = PreprocessProfile::scaled((8, 8), IntensityMode::Raw, 1.0).unwrap();
        assert!(prepare_view(&Image16::new(4, 4, vec![9; 16]), &p).is_err());
    }
}
