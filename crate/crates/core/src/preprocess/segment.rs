use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size");
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Foreground pixel count inside the half-open window `[x0,x1)×[y0,y1)`.
    pub fn count_in(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> usize {
        (y0..y1.min(self.height))
            .map(|y| (x0..x1.min(self.width)).filter(|&x| self.get(x, y)).count())
            .sum()
    }

    /// Nearest-neighbour resampling to another frame.
    pub fn resized(&self, width: usize, height: usize) -> Mask {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.get(sx, sy));
            }
        }
        Mask::new(width, height, data)
    }
}

/// Otsu threshold over a 1024-bin histogram spanning the value range.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 1024;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + (best_bin + 1) as f64 * width)
}

fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Mask::new(w, h, label.iter().map(|&l| l != 0 && l == best.1).collect())
}

/// 3×3 morphology; neighbours outside the frame are ignored.
fn morph(mask: &Mask, dilate: bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = mask.get(nx, ny);
                    acc = if dilate { acc || v } else { acc && v };
                }
            }
            out[y * w + x] = acc;
        }
    }
    Mask::new(w, h, out)
}

pub fn binary_closing(mask: &Mask) -> Mask {
    morph(&morph(mask, true), false)
}

/// Global Otsu threshold, largest 4-connected component, then 3×3 closing.
pub fn segment_breast(values: &[f64], width: usize, height: usize) -> Result<Mask> {
    assert_eq!(values.len(), width * height, "image size");
    let t = otsu_threshold(values).ok_or_else(|| Error::Data("no breast found".into()))?;
    let raw = Mask::new(width, height, values.iter().map(|&v| v >= t).collect());
    let mask = binary_closing(&largest_component(&raw));
    if mask.area() == 0 {
        return Err(Error::Data("no breast found".into()));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paint(w: usize, h: usize, rects: &[(usize, usize, usize, usize, f64)]) -> Vec<f64> {
        let mut img = vec![0.0; w * h];
        for &(x0, y0, x1, y1, v) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    img[y * w + x] = v;
                }
            }
        }
        img
    }

    #[test]
    fn rectangle_on_black() {
        let img = paint(30, 20, &[(5, 4, 25, 16, 1000.0)]);
        let m = segment_breast(&img, 30, 20).unwrap();
        for y in 0..20 {
            for x in 0..30 {
                let inside = (5..25).contains(&x) && (4..16).contains(&y);
                assert_eq!(m.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn keeps_only_largest_component() {
        // 10×10 = 100 px and 5×8 = 40 px
        let img = paint(40, 20, &[(2, 2, 12, 12, 500.0), (25, 5, 30, 13, 500.0)]);
        let m = segment_breast(&img, 40, 20).unwrap();
        assert_eq!(m.area(), 100);
        assert!(m.get(5, 5) && !m.get(27, 8));
    }

    #[test]
    fn constant_image_has_no_breast() {
        let err = segment_breast(&[3.0; 16], 4, 4).unwrap_err();
        assert!(err.to_string().contains("no breast found"));
    }

    #[test]
    fn closing_fills_pinholes() {
        let mut img = paint(20, 20, &[(2, 2, 18, 18, 100.0)]);
        img[10 * 20 + 10] = 0.0;
        let m = segment_breast(&img, 20, 20).unwrap();
        assert!(m.get(10, 10));
    }
}
