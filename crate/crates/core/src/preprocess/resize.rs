/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample source indices and normalized weights along one axis.
/// When shrinking, the kernel is stretched by the scale factor (antialiasing).
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = 2.0 * scale.max(1.0);
    let stretch = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let start = (center - support).floor().max(0.0) as usize;
            let end = ((center + support).ceil() as usize).min(src - 1);
            let mut w: Vec<f64> = (start..=end).map(|j| cubic((j as f64 - center) / stretch)).collect();
            let s: f64 = w.iter().sum();
            if s != 0.0 {
                w.iter_mut().for_each(|v| *v /= s);
            }
            (start, w)
        })
        .collect()
}

/// Separable bicubic resampling of a row-major plane.
pub fn resize_bicubic(src: &[f64], width: usize, height: usize, new_width: usize, new_height: usize) -> Vec<f64> {
    assert_eq!(src.len(), width * height, "plane size");
    assert!(new_width > 0 && new_height > 0);
    if width == new_width && height == new_height {
        return src.to_vec();
    }
    let wx = axis_weights(width, new_width);
    let wy = axis_weights(height, new_height);
    let mut tmp = vec![0.0; height * new_width];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for (x, (start, w)) in wx.iter().enumerate() {
            tmp[y * new_width + x] = w.iter().enumerate().map(|(k, c)| c * row[start + k]).sum();
        }
    }
    let mut out = vec![0.0; new_height * new_width];
    for (y, (start, w)) in wy.iter().enumerate() {
        let dst = &mut out[y * new_width..(y + 1) * new_width];
        for (k, c) in w.iter().enumerate() {
            let row = &tmp[(start + k) * new_width..(start + k + 1) * new_width];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += c * s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_stays_constant() {
        let out = resize_bicubic(&[7.0; 40 * 30], 40, 30, 13, 17);
        assert!(out.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn identity_size_is_copy() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bicubic(&src, 4, 3, 4, 3), src);
    }

    #[test]
    fn linear_ramp_is_preserved_when_upscaling() {
        let src: Vec<f64> = (0..8 * 8).map(|i| (i % 8) as f64).collect();
        let out = resize_bicubic(&src, 8, 8, 16, 16);
        // interior samples reproduce the ramp exactly (cubic convolution is exact on linear data)
        for x in 4..12 {
            let expected = (x as f64 + 0.5) * 0.5 - 0.5;
            assert!((out[5 * 16 + x] - expected).abs() < 1e-9);
        }
    }
}
