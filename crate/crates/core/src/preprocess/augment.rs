use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Random transforms applied to training images. Every enabled transform fires
/// independently with probability 0.5; box jitter always applies when its
/// ratio is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotation_degrees: Option<(f64, f64)>,
    pub crop_scale: Option<(f64, f64)>,
    pub shear: bool,
    pub shear_degrees: f64,
    pub blur: bool,
    pub grid_distortion: bool,
    pub transpose: bool,
    pub shift_scale_rotate: bool,
    pub box_jitter_ratio: f64,
}

const APPLY_PROBABILITY: f64 = 0.5;

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotation_degrees: None,
            crop_scale: None,
            shear: false,
            shear_degrees: 10.0,
            blur: false,
            grid_distortion: false,
            transpose: false,
            shift_scale_rotate: false,
            box_jitter_ratio: 0.0,
        }
    }

    /// Flips, ±15° rotations and 85–100% random sized crops.
    pub fn standard() -> Self {
        Self {
            horizontal_flip: true,
            rotation_degrees: Some((-15.0, 15.0)),
            crop_scale: Some((0.85, 1.0)),
            ..Self::none()
        }
    }

    pub fn density_view() -> Self {
        Self {
            shear: true,
            ..Self::standard()
        }
    }

    pub fn density_patient() -> Self {
        Self {
            horizontal_flip: false,
            blur: true,
            grid_distortion: true,
            ..Self::standard()
        }
    }

    pub fn patches() -> Self {
        Self {
            vertical_flip: true,
            transpose: true,
            shift_scale_rotate: true,
            ..Self::standard()
        }
    }

    pub fn findings() -> Self {
        Self {
            vertical_flip: true,
            ..Self::standard()
        }
    }

    pub fn localizer() -> Self {
        Self {
            box_jitter_ratio: 0.005,
            ..Self::standard()
        }
    }

    pub const PRESETS: [&'static str; 7] = [
        "none",
        "standard",
        "density_view",
        "density_patient",
        "patches",
        "findings",
        "localizer",
    ];

    /// Named preset, one of [`Self::PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => Self::none(),
            "standard" => Self::standard(),
            "density_view" => Self::density_view(),
            "density_patient" => Self::density_patient(),
            "patches" => Self::patches(),
            "findings" => Self::findings(),
            "localizer" => Self::localizer(),
            other => return Err(Error::Config(format!("unknown augmentation preset '{other}'"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.rotation_degrees {
            if !(lo <= hi && lo >= -45.0 && hi <= 45.0) {
                return Err(Error::Config("rotation interval must lie within [-45, 45]".into()));
            }
        }
        if let Some((lo, hi)) = self.crop_scale {
            if !(lo <= hi && lo > 0.0 && hi <= 1.0) {
                return Err(Error::Config("crop scale must lie within (0, 1]".into()));
            }
        }
        if !(self.box_jitter_ratio >= 0.0) || !(self.shear_degrees >= 0.0) {
            return Err(Error::Config(
                "jitter ratio and shear range must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Forward 2-D affine map `p' = M·p + t` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &Affine) -> Affine {
        let a = &other.m;
        let b = &self.m;
        Affine {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * self.t[0] + a[0][1] * self.t[1] + other.t[0],
                a[1][0] * self.t[0] + a[1][1] * self.t[1] + other.t[1],
            ],
        }
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Affine { m, t }
    }

    /// Linear map `m` applied about the point `(cx, cy)`.
    fn about(m: [[f64; 2]; 2], cx: f64, cy: f64) -> Affine {
        let shift = Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [-cx, -cy],
        };
        let lin = Affine { m, t: [0.0, 0.0] };
        let back = Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [cx, cy],
        };
        shift.then(&lin).then(&back)
    }

    pub fn rotation(degrees: f64, cx: f64, cy: f64) -> Affine {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::about([[c, -s], [s, c]], cx, cy)
    }

    pub fn shear_x(degrees: f64, cx: f64, cy: f64) -> Affine {
        Self::about([[1.0, degrees.to_radians().tan()], [0.0, 1.0]], cx, cy)
    }

    pub fn scale(sx: f64, sy: f64, cx: f64, cy: f64) -> Affine {
        Self::about([[sx, 0.0], [0.0, sy]], cx, cy)
    }

    pub fn translation(dx: f64, dy: f64) -> Affine {
        Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [dx, dy],
        }
    }

    pub fn horizontal_flip(width: f64) -> Affine {
        Affine {
            m: [[-1.0, 0.0], [0.0, 1.0]],
            t: [width, 0.0],
        }
    }

    pub fn vertical_flip(height: f64) -> Affine {
        Affine {
            m: [[1.0, 0.0], [0.0, -1.0]],
            t: [0.0, height],
        }
    }

    pub fn transpose() -> Affine {
        Affine {
            m: [[0.0, 1.0], [1.0, 0.0]],
            t: [0.0, 0.0],
        }
    }

    /// Axis-aligned hull of the mapped box corners.
    pub fn map_box(&self, b: &BBox) -> BBox {
        let corners = [
            self.apply(b.x_min, b.y_min),
            self.apply(b.x_max, b.y_min),
            self.apply(b.x_min, b.y_max),
            self.apply(b.x_max, b.y_max),
        ];
        let fold =
            |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| corners.iter().map(sel).fold(init, f);
        BBox {
            x_min: fold(f64::min, f64::INFINITY, |p| p.0),
            y_min: fold(f64::min, f64::INFINITY, |p| p.1),
            x_max: fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            y_max: fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        }
    }
}

fn sample_plane(plane: &[f64], w: usize, h: usize, x: f64, y: f64, fill: f64) -> f64 {
    // pixel centers sit at integer + 0.5
    let (fx, fy) = (x - 0.5, y - 0.5);
    if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
        return fill;
    }
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| {
        let xi = xi.clamp(0.0, w as f64 - 1.0) as usize;
        let yi = yi.clamp(0.0, h as f64 - 1.0) as usize;
        plane[yi * w + xi]
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Resample `img` so that output pixel `q` takes the input value at `map(q)`.
fn warp(img: &Tensor, fill: f64, map: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = img.shape();
    let mut out = Tensor::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64 + 0.5, y as f64 + 0.5);
            for ch in 0..c {
                out.data[(ch * h + y) * w + x] = sample_plane(img.plane(ch), w, h, sx, sy, fill);
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let (c, h, w) = img.shape();
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = Tensor::zeros(c, h, w);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xi = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[y * w + xi];
                }
                tmp.data[(ch * h + y) * w + x] = acc;
            }
        }
        let t = tmp.plane(ch).to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yi = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * t[yi * w + x];
                }
                out.data[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Smooth displacement field interpolated from a 4×4-cell control grid whose
/// interior nodes move by up to `limit` of the image size.
struct GridField {
    nodes: Vec<(f64, f64)>,
    width: f64,
    height: f64,
}

const GRID_CELLS: usize = 4;

impl GridField {
    fn random<R: Rng>(rng: &mut R, width: f64, height: f64, limit: f64) -> Self {
        let n = GRID_CELLS + 1;
        let nodes = (0..n * n)
            .map(|i| {
                let (gx, gy) = (i % n, i / n);
                if gx == 0 || gy == 0 || gx == GRID_CELLS || gy == GRID_CELLS {
                    (0.0, 0.0)
                } else {
                    (
                        rng.random_range(-limit..=limit) * width,
                        rng.random_range(-limit..=limit) * height,
                    )
                }
            })
            .collect();
        Self { nodes, width, height }
    }

    fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let n = GRID_CELLS + 1;
        let gx = (x / self.width * GRID_CELLS as f64).clamp(0.0, GRID_CELLS as f64 - 1e-9);
        let gy = (y / self.height * GRID_CELLS as f64).clamp(0.0, GRID_CELLS as f64 - 1e-9);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (gx - ix as f64, gy - iy as f64);
        let node = |i: usize, j: usize| self.nodes[j * n + i];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(node(ix, iy), node(ix + 1, iy), tx);
        let bottom = lerp(node(ix, iy + 1), node(ix + 1, iy + 1), tx);
        lerp(top, bottom, ty)
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Tensor,
    /// One entry per input box; `None` when the box left the frame.
    pub boxes: Vec<Option<BBox>>,
}

impl Augmented {
    pub fn dropped(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_none()).count()
    }

    pub fn kept_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().flatten().copied().collect()
    }
}

/// Apply `policy` to an image (and optional boxes in its frame).
pub fn augment<R: Rng>(img: &Tensor, boxes: &[BBox], policy: &AugmentationPolicy, rng: &mut R) -> Augmented {
    let (_, h, w) = img.shape();
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let mut fire = || rng.random_bool(APPLY_PROBABILITY);
    // decide all coin flips first so parameter draws do not shift them
    let flags = [
        policy.horizontal_flip && fire(),
        policy.vertical_flip && fire(),
        policy.transpose && w == h && fire(),
        policy.rotation_degrees.is_some() && fire(),
        policy.shear && fire(),
        policy.shift_scale_rotate && fire(),
        policy.crop_scale.is_some() && fire(),
        policy.grid_distortion && fire(),
        policy.blur && fire(),
    ];
    let mut affine = Affine::IDENTITY;
    if flags[0] {
        affine = affine.then(&Affine::horizontal_flip(wf));
    }
    if flags[1] {
        affine = affine.then(&Affine::vertical_flip(hf));
    }
    if flags[2] {
        affine = affine.then(&Affine::transpose());
    }
    if let (true, Some((lo, hi))) = (flags[3], policy.rotation_degrees) {
        let deg = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        affine = affine.then(&Affine::rotation(deg, cx, cy));
    }
    if flags[4] {
        let s = policy.shear_degrees;
        let deg = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
        affine = affine.then(&Affine::shear_x(deg, cx, cy));
    }
    if flags[5] {
        let (dx, dy) = (
            rng.random_range(-0.0625..=0.0625) * wf,
            rng.random_range(-0.0625..=0.0625) * hf,
        );
        let scale = rng.random_range(0.9..=1.1);
        let deg = rng.random_range(-15.0..=15.0);
        affine = affine
            .then(&Affine::scale(scale, scale, cx, cy))
            .then(&Affine::rotation(deg, cx, cy))
            .then(&Affine::translation(dx, dy));
    }
    if let (true, Some((lo, hi))) = (flags[6], policy.crop_scale) {
        let s: f64 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = s.sqrt();
        let ox = rng.random_range(0.0..=(1.0 - side)) * wf;
        let oy = rng.random_range(0.0..=(1.0 - side)) * hf;
        affine = affine
            .then(&Affine::translation(-ox, -oy))
            .then(&Affine::scale(1.0 / side, 1.0 / side, 0.0, 0.0));
    }
    let grid = flags[7].then(|| GridField::random(rng, wf, hf, 0.02));
    let sigma = flags[8].then(|| rng.random_range(0.5..=1.5));

    let fill = img.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut image = if affine == Affine::IDENTITY {
        img.clone()
    } else {
        let inv = affine.inverse();
        warp(img, fill, |x, y| inv.apply(x, y))
    };
    if let Some(g) = &grid {
        image = warp(&image, fill, |x, y| {
            let (dx, dy) = g.displacement(x, y);
            (x + dx, y + dy)
        });
    }
    if let Some(s) = sigma {
        image = gaussian_blur(&image, s);
    }

    let jitter = policy.box_jitter_ratio;
    let boxes = boxes
        .iter()
        .map(|b| {
            let mut nb = affine.map_box(b);
            if let Some(g) = &grid {
                let (x0, y0) = g.displacement(nb.x_min, nb.y_min);
                let (x1, y1) = g.displacement(nb.x_max, nb.y_max);
                nb = BBox {
                    x_min: nb.x_min - x0,
                    y_min: nb.y_min - y0,
                    x_max: nb.x_max - x1,
                    y_max: nb.y_max - y1,
                };
            }
            if jitter > 0.0 {
                let (jx, jy) = (jitter * wf, jitter * hf);
                nb.x_min += rng.random_range(-jx..=jx);
                nb.x_max += rng.random_range(-jx..=jx);
                nb.y_min += rng.random_range(-jy..=jy);
                nb.y_max += rng.random_range(-jy..=jy);
            }
            nb.clipped(wf, hf)
        })
        .collect();
    Augmented { image, boxes }
}

pub fn augment_seeded(img: &Tensor, boxes: &[BBox], policy: &AugmentationPolicy, seed: u64) -> Augmented {
    augment(img, boxes, policy, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(1, h, w, (0..h * w).map(|i| (i * 7 % 13) as f64).collect())
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = ramp(12, 10);
        let b = BBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        for seed in 0..5 {
            let out = augment_seeded(&img, &[b], &AugmentationPolicy::none(), seed);
            assert_eq!(out.image, img);
            assert_eq!(out.boxes, vec![Some(b)]);
        }
    }

    #[test]
    fn horizontal_flip_reflects_box() {
        let f = Affine::horizontal_flip(10.0);
        let b = f.map_box(&BBox::new(1.0, 2.0, 3.0, 4.0).unwrap());
        assert_eq!(b, BBox::new(7.0, 2.0, 9.0, 4.0).unwrap());
    }

    #[test]
    fn flip_policy_flips_image_and_box_together() {
        let img = ramp(6, 10);
        let policy = AugmentationPolicy {
            horizontal_flip: true,
            ..AugmentationPolicy::none()
        };
        let b = BBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let mut flipped = 0;
        for seed in 0..16 {
            let out = augment_seeded(&img, &[b], &policy, seed);
            if out.image == img {
                assert_eq!(out.boxes[0], Some(b));
            } else {
                flipped += 1;
                assert_eq!(out.boxes[0], Some(BBox::new(7.0, 2.0, 9.0, 4.0).unwrap()));
                assert_eq!(out.image.at(0, 3, 0), img.at(0, 3, 9));
            }
        }
        assert!(flipped > 0 && flipped < 16);
    }

    #[test]
    fn rotation_of_centered_square_is_corner_hull() {
        let img = ramp(40, 40);
        let b = BBox::new(15.0, 15.0, 25.0, 25.0).unwrap();
        let policy = AugmentationPolicy {
            rotation_degrees: Some((15.0, 15.0)),
            ..AugmentationPolicy::none()
        };
        // oracle: rotate the corners by 15° about (20,20) and take the hull
        let t = 15f64.to_radians();
        let corners = [(-5.0, -5.0), (5.0, -5.0), (-5.0, 5.0), (5.0, 5.0)];
        let xs: Vec<f64> = corners.iter().map(|(x, y)| 20.0 + x * t.cos() - y * t.sin()).collect();
        let ys: Vec<f64> = corners.iter().map(|(x, y)| 20.0 + x * t.sin() + y * t.cos()).collect();
        let half = 5.0 * (t.cos() + t.sin());
        let hull = (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        assert!((hull.0 - (20.0 - half)).abs() < 1e-12);
        let mut rotated = 0;
        for seed in 0..16 {
            let out = augment_seeded(&img, &[b], &policy, seed);
            let nb = out.boxes[0].unwrap();
            if out.image != img {
                rotated += 1;
                for (got, want) in [nb.x_min, nb.y_min, nb.x_max, nb.y_max]
                    .iter()
                    .zip([hull.0, hull.1, hull.2, hull.3])
                {
                    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
                }
            }
        }
        assert!(rotated > 0);
    }

    #[test]
    fn box_leaving_frame_is_dropped() {
        let img = ramp(20, 20);
        let policy = AugmentationPolicy {
            crop_scale: Some((0.25, 0.25)),
            ..AugmentationPolicy::none()
        };
        let corner = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let far = BBox::new(19.0, 19.0, 20.0, 20.0).unwrap();
        let dropped: usize = (0..16)
            .map(|s| augment_seeded(&img, &[corner, far], &policy, s).dropped())
            .sum();
        assert!(dropped > 0);
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine::rotation(12.0, 5.0, 7.0)
            .then(&Affine::shear_x(8.0, 5.0, 7.0))
            .then(&Affine::translation(1.0, -2.0));
        let (x, y) = a.apply(3.0, 4.0);
        let (bx, by) = a.inverse().apply(x, y);
        assert!((bx - 3.0).abs() < 1e-12 && (by - 4.0).abs() < 1e-12);
    }

    #[test]
    fn jitter_is_bounded() {
        let img = ramp(100, 100);
        let policy = AugmentationPolicy {
            box_jitter_ratio: 0.005,
            ..AugmentationPolicy::none()
        };
        let b = BBox::new(40.0, 40.0, 60.0, 60.0).unwrap();
        let out = augment_seeded(&img, &[b], &policy, 4).boxes[0].unwrap();
        assert!((out.x_min - 40.0).abs() <= 0.5 && (out.y_max - 60.0).abs() <= 0.5);
        assert_ne!(out, b);
    }

    #[test]
    fn invalid_intervals_rejected() {
        let mut p = AugmentationPolicy::standard();
        p.rotation_degrees = Some((-60.0, 10.0));
        assert!(p.validate().is_err());
        p = AugmentationPolicy::standard();
        p.crop_scale = Some((0.0, 1.0));
        assert!(p.validate().is_err());
    }
}
