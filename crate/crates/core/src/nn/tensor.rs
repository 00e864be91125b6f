/// Dense `channels × height × width` array of `f64`, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Shape triple `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// A flat vector viewed as `len × 1 × 1`.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(n, 1, 1, data)
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn reshape(mut self, channels: usize, height: usize, width: usize) -> Self {
        assert_eq!(self.data.len(), channels * height * width, "reshape changes size");
        self.channels = channels;
        self.height = height;
        self.width = width;
        self
    }

    /// Copy with `pad` zero pixels on every side of each channel.
    pub fn padded(&self, pad_h: usize, pad_w: usize) -> Tensor {
        if pad_h == 0 && pad_w == 0 {
            return self.clone();
        }
        let (ph, pw) = (self.height + 2 * pad_h, self.width + 2 * pad_w);
        let mut out = Tensor::zeros(self.channels, ph, pw);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.data[(c * self.height + y) * self.width..][..self.width];
                let dst = &mut out.data[(c * ph + y + pad_h) * pw + pad_w..][..self.width];
                dst.copy_from_slice(src);
            }
        }
        out
    }

    /// Inverse of [`Tensor::padded`]: drop the border.
    pub fn cropped(&self, pad_h: usize, pad_w: usize) -> Tensor {
        if pad_h == 0 && pad_w == 0 {
            return self.clone();
        }
        let (h, w) = (self.height - 2 * pad_h, self.width - 2 * pad_w);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = &self.data[(c * self.height + y + pad_h) * self.width + pad_w..][..w];
                out.data[(c * h + y) * w..][..w].copy_from_slice(src);
            }
        }
        out
    }

    /// Copy the window `[x, x+width) × [y, y+height)` of every channel.
    pub fn window(&self, x: usize, y: usize, width: usize, height: usize) -> Tensor {
        assert!(
            x + width <= self.width && y + height <= self.height,
            "window out of bounds"
        );
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height {
                let src = &self.data[(c * self.height + y + r) * self.width + x..][..width];
                out.data[(c * height + r) * width..][..width].copy_from_slice(src);
            }
        }
        out
    }

    /// Concatenate along the channel axis; spatial dims must agree.
    pub fn concat_channels(parts: &[Tensor]) -> Tensor {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut channels = 0;
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Tensor::from_vec(channels, h, w, data)
    }
}

/// Dot product with a fixed eight-lane accumulation order, so the result is
/// bit-stable and still vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major `C (m×n) = A (m×k) · B (k×n) + beta·C`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m×n) += Aᵀ · B` where `A` is stored `k×m` and `B` is `k×n`.
pub fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; A is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m×n) += A · Bᵀ` where `A` is `m×k` and `B` is stored `n×k`.
pub fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: bounds asserted above; B is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::from_vec(2, 2, 3, (0..12).map(f64::from).collect());
        let p = t.padded(1, 2);
        assert_eq!(p.shape(), (2, 4, 7));
        assert_eq!(p.at(0, 1, 2), 0.0);
        assert_eq!(p.at(1, 2, 4), t.at(1, 1, 2));
        assert_eq!(p.cropped(1, 2), t);
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // Aᵀ·B with A stored k×m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_at_b(m, k, n, &at, &b, &mut c2);
        assert_eq!(c, c2);
        // A·Bᵀ with B stored n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_a_bt(m, k, n, &a, &bt, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..29).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..29).map(|i| 1.0 - i as f64 * 0.03).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
