use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BBox, Exam, ViewKey};
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::profile::{prepare_view, PreprocessProfile};
use super::segment::Mask;

const MIN_OVERLAP: f64 = 0.9;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchLabel {
    Lesion,
    Background,
}

impl PatchLabel {
    pub fn index(self) -> usize {
        match self {
            PatchLabel::Background => 0,
            PatchLabel::Lesion => 1,
        }
    }
}

/// Square patch location in the prepared frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub label: PatchLabel,
    /// Index into the box list for lesion patches.
    pub lesion: Option<usize>,
}

impl PatchWindow {
    pub fn bbox(&self) -> BBox {
        BBox {
            x_min: self.x as f64,
            y_min: self.y as f64,
            x_max: (self.x + self.size) as f64,
            y_max: (self.y + self.size) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub window: PatchWindow,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct PatchSample {
    pub patches: Vec<Patch>,
    pub warnings: Vec<String>,
}

/// Fraction of the lesion box covered by a window.
pub fn lesion_overlap(window: &BBox, lesion: &BBox) -> f64 {
    window.intersection_area(lesion) / lesion.area()
}

/// Fraction of the window lying inside the breast mask.
pub fn breast_overlap(w: &PatchWindow, mask: &Mask) -> f64 {
    mask.count_in(w.x, w.y, w.x + w.size, w.y + w.size) as f64 / (w.size * w.size) as f64
}

fn clamp_origin(center: f64, size: usize, limit: usize) -> usize {
    (center - size as f64 / 2.0).round().clamp(0.0, (limit - size) as f64) as usize
}

/// Pick window positions: `per_lesion` windows covering ≥ 90% of each lesion
/// box, or, when `boxes` is empty, `per_normal` windows lying ≥ 90% inside the
/// breast mask.
pub fn sample_patch_windows<R: Rng>(
    mask: &Mask,
    boxes: &[BBox],
    size: usize,
    per_lesion: usize,
    per_normal: usize,
    rng: &mut R,
) -> Result<(Vec<PatchWindow>, Vec<String>)> {
    let (w, h) = (mask.width, mask.height);
    if size > w || size > h || size == 0 {
        return Err(Error::Contract(format!("patch size {size} exceeds image {w}×{h}")));
    }
    let mut windows = Vec::new();
    let mut warnings = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let reachable = b.width().min(size as f64) * b.height().min(size as f64) / b.area();
        if reachable < MIN_OVERLAP {
            let (cx, cy) = b.center();
            warnings.push(format!("lesion {i} larger than patch; using a center crop"));
            for _ in 0..per_lesion {
                windows.push(PatchWindow {
                    x: clamp_origin(cx, size, w),
                    y: clamp_origin(cy, size, h),
                    size,
                    label: PatchLabel::Lesion,
                    lesion: Some(i),
                });
            }
            continue;
        }
        let slack_x = 0.1 * b.width();
        let slack_y = 0.1 * b.height();
        let x_lo = (b.x_max - size as f64 - slack_x).floor().max(0.0) as usize;
        let x_hi = ((b.x_min + slack_x).ceil() as usize).min(w - size);
        let y_lo = (b.y_max - size as f64 - slack_y).floor().max(0.0) as usize;
        let y_hi = ((b.y_min + slack_y).ceil() as usize).min(h - size);
        for _ in 0..per_lesion {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let x = rng.random_range(x_lo.min(x_hi)..=x_hi);
                let y = rng.random_range(y_lo.min(y_hi)..=y_hi);
                let cand = PatchWindow {
                    x,
                    y,
                    size,
                    label: PatchLabel::Lesion,
                    lesion: Some(i),
                };
                if lesion_overlap(&cand.bbox(), b) >= MIN_OVERLAP {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(c) => windows.push(c),
                None => warnings.push(format!("lesion {i}: no window after {MAX_ATTEMPTS} attempts")),
            }
        }
    }
    if boxes.is_empty() {
        for _ in 0..per_normal {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let cand = PatchWindow {
                    x: rng.random_range(0..=w - size),
                    y: rng.random_range(0..=h - size),
                    size,
                    label: PatchLabel::Background,
                    lesion: None,
                };
                if breast_overlap(&cand, mask) >= MIN_OVERLAP {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(c) => windows.push(c),
                None => warnings.push(format!("no breast window after {MAX_ATTEMPTS} attempts")),
            }
        }
    }
    Ok((windows, warnings))
}

/// Prepare `view` of `exam` with `profile` and cut lesion / breast patches from it.
pub fn sample_patches(
    exam: &Exam,
    view: ViewKey,
    profile: &PreprocessProfile,
    patch_size: usize,
    per_lesion: usize,
    per_normal: usize,
    seed: u64,
) -> Result<PatchSample> {
    let image = exam.image(view)?.load()?;
    let prepared = prepare_view(&image, profile)?;
    let boxes: Vec<BBox> = exam.lesions_in(view).map(|l| prepared.map_box(&l.bbox)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (windows, warnings) =
        sample_patch_windows(&prepared.mask, &boxes, patch_size, per_lesion, per_normal, &mut rng)?;
    for w in &warnings {
        log::warn!("{} {view}: {w}", exam.case_id);
    }
    let patches = windows
        .into_iter()
        .map(|w| Patch {
            tensor: prepared.tensor.window(w.x, w.y, w.size, w.size),
            window: w,
        })
        .collect();
    Ok(PatchSample { patches, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_mask(w: usize, h: usize) -> Mask {
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - w as f64 / 2.0, (i / w) as f64 - h as f64 / 2.0);
                x * x + y * y < (w.min(h) as f64 / 2.2).powi(2)
            })
            .collect();
        Mask::new(w, h, data)
    }

    #[test]
    fn lesion_patches_contain_small_box() {
        let mask = disc_mask(100, 120);
        let b = BBox::new(40.0, 50.0, 52.0, 61.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ws, warn) = sample_patch_windows(&mask, &[b], 28, 5, 5, &mut rng).unwrap();
        assert!(warn.is_empty());
        assert_eq!(ws.len(), 5);
        for w in ws {
            assert!(lesion_overlap(&w.bbox(), &b) >= 0.9);
            assert_eq!(w.label, PatchLabel::Lesion);
        }
    }

    #[test]
    fn normal_patches_lie_in_breast() {
        let mask = disc_mask(100, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ws, _) = sample_patch_windows(&mask, &[], 28, 5, 5, &mut rng).unwrap();
        assert_eq!(ws.len(), 5);
        assert!(ws.iter().all(|w| breast_overlap(w, &mask) >= 0.9));
    }

    #[test]
    fn oversized_lesion_falls_back_to_center_crop() {
        let mask = disc_mask(100, 120);
        let b = BBox::new(10.0, 10.0, 70.0, 90.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ws, warn) = sample_patch_windows(&mask, &[b], 28, 2, 0, &mut rng).unwrap();
        assert_eq!(warn.len(), 1);
        assert_eq!((ws[0].x, ws[0].y), (26, 36));
    }

    #[test]
    fn fixed_seed_fixes_coordinates() {
        let mask = disc_mask(80, 90);
        let run = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            sample_patch_windows(&mask, &[], 20, 0, 6, &mut rng).unwrap().0
        };
        assert_eq!(run(9), run(9));
    }
}
