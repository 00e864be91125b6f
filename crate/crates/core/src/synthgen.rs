//! Deterministic synthetic four-view exams.
//!
//! Each case draws from its own ChaCha stream (`seed`, stream = case index), so
//! exams can be generated in any order. Sampling a case ([`plan_exam`]) is kept
//! apart from rasterizing it ([`render_view`]) so label statistics can be
//! checked without drawing pixels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    bounding_box_from_mask, write_manifest, write_png16, Density, Exam, Image16, ImageRef, Laterality,
    LesionAnnotation, LesionClass, LesionType, Pathology, Projection, ViewKey,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub n_cases: usize,
    pub density_class_probs: [f64; 4],
    /// Probability of 0, 1, 2, ... lesions per case.
    pub lesion_count_distribution: Vec<f64>,
    pub malignant_fraction: f64,
    pub mass_fraction: f64,
    pub mass_radius_range: (f64, f64),
    pub calc_radius_range: (f64, f64),
    /// Cell size in pixels of the coarsest texture octave.
    pub texture_grain: f64,
    /// Added intensity per lesion class, indexed by [`LesionClass::index`].
    pub contrast_ranges: [(f64, f64); 4],
    pub noise_sigma: f64,
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_height: 288,
            image_width: 224,
            n_cases: 400,
            density_class_probs: [0.13, 0.38, 0.30, 0.19],
            lesion_count_distribution: vec![0.4, 0.45, 0.15],
            malignant_fraction: 0.5,
            mass_fraction: 0.5,
            mass_radius_range: (7.0, 14.0),
            calc_radius_range: (6.0, 11.0),
            texture_grain: 28.0,
            contrast_ranges: [(0.22, 0.34), (0.28, 0.42), (0.16, 0.24), (0.20, 0.30)],
            noise_sigma: 0.01,
            occlusion_probability: 0.15,
            seed: 7,
        }
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} must be probabilities summing to 1")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        check_probs("density_class_probs", &self.density_class_probs)?;
        check_probs("lesion_count_distribution", &self.lesion_count_distribution)?;
        for (name, p) in [
            ("malignant_fraction", self.malignant_fraction),
            ("mass_fraction", self.mass_fraction),
            ("occlusion_probability", self.occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1]")));
            }
        }
        if self.image_height < 32 || self.image_width < 32 {
            return Err(Error::Config("synthetic images must be at least 32×32".into()));
        }
        let limit = self.image_height.min(self.image_width) as f64 / 4.0;
        for (name, (lo, hi)) in [
            ("mass_radius_range", self.mass_radius_range),
            ("calc_radius_range", self.calc_radius_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < limit) {
                return Err(Error::Config(format!("{name} must be positive and below {limit}")));
            }
        }
        if !(self.texture_grain > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "texture_grain must be positive and noise_sigma non-negative".into(),
            ));
        }
        if self.contrast_ranges.iter().any(|(lo, hi)| !(*lo > 0.0 && lo <= hi)) {
            return Err(Error::Config("contrast ranges must be positive intervals".into()));
        }
        Ok(())
    }

    /// Flat `key = value` lines recording every field.
    pub fn echo(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s += &format!("synth.image_height = {}\n", self.image_height);
        s += &format!("synth.image_width = {}\n", self.image_width);
        s += &format!("synth.n_cases = {}\n", self.n_cases);
        s += &format!("synth.density_class_probs = {}\n", list(&self.density_class_probs));
        s += &format!(
            "synth.lesion_count_distribution = {}\n",
            list(&self.lesion_count_distribution)
        );
        s += &format!("synth.malignant_fraction = {}\n", self.malignant_fraction);
        s += &format!("synth.mass_fraction = {}\n", self.mass_fraction);
        s += &format!(
            "synth.mass_radius_range = {},{}\n",
            self.mass_radius_range.0, self.mass_radius_range.1
        );
        s += &format!(
            "synth.calc_radius_range = {},{}\n",
            self.calc_radius_range.0, self.calc_radius_range.1
        );
        s += &format!("synth.texture_grain = {}\n", self.texture_grain);
        for c in LesionClass::ALL {
            let (lo, hi) = self.contrast_ranges[c.index()];
            s += &format!("synth.contrast.{} = {lo},{hi}\n", c.short_name());
        }
        s += &format!("synth.noise_sigma = {}\n", self.noise_sigma);
        s += &format!("synth.occlusion_probability = {}\n", self.occlusion_probability);
        s += &format!("synth.seed = {}\n", self.seed);
        s
    }
}

/// Half-ellipse breast silhouette anchored on the chest-wall edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreastShape {
    pub center_y: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub chest_wall_left: bool,
}

impl BreastShape {
    fn chest_x(&self, width: f64) -> f64 {
        if self.chest_wall_left {
            0.0
        } else {
            width
        }
    }

    /// Normalized elliptical radius; `< 1` inside the breast.
    pub fn radius_at(&self, x: f64, y: f64, width: f64) -> f64 {
        let dx = (x - self.chest_x(width)) / self.semi_x;
        let dy = (y - self.center_y) / self.semi_y;
        (dx * dx + dy * dy).sqrt()
    }

    /// Position at polar coordinates (rho, theta) inside the ellipse, theta = 0
    /// pointing to the nipple.
    fn point(&self, rho: f64, theta: f64, width: f64) -> (f64, f64) {
        let dir = if self.chest_wall_left { 1.0 } else { -1.0 };
        (
            self.chest_x(width) + dir * rho * self.semi_x * theta.cos(),
            self.center_y + rho * self.semi_y * theta.sin(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionPlan {
    pub class: LesionClass,
    pub radius: f64,
    pub contrast: f64,
    /// Per-view center; `None` where the lesion is occluded.
    pub centers: BTreeMap<ViewKey, Option<(f64, f64)>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamPlan {
    pub case_id: String,
    pub density: Density,
    pub breasts: BTreeMap<ViewKey, BreastShape>,
    pub lesions: Vec<LesionPlan>,
    pub texture_amplitude: f64,
    pub view_seeds: BTreeMap<ViewKey, u64>,
}

const DENSITY_AMPLITUDE: [f64; 4] = [0.03, 0.055, 0.085, 0.12];
const DENSITY_LEVEL: [f64; 4] = [0.30, 0.34, 0.38, 0.42];

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn case_id(index: usize) -> String {
    format!("SYN_{index:05}")
}

fn case_rng(spec: &SynthSpec, case_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_index as u64);
    rng
}

/// Sample labels and geometry of one case.
pub fn plan_exam(spec: &SynthSpec, case_index: usize) -> Result<ExamPlan> {
    if case_index >= spec.n_cases {
        return Err(Error::Contract(format!(
            "case index {case_index} ≥ n_cases {}",
            spec.n_cases
        )));
    }
    let mut rng = case_rng(spec, case_index);
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let density = Density::ALL[sample_index(&mut rng, &spec.density_class_probs)];
    let mut breasts = BTreeMap::new();
    for view in ViewKey::ALL {
        let tall = if view.projection == Projection::MLO { 1.08 } else { 1.0 };
        breasts.insert(
            view,
            BreastShape {
                center_y: h * rng.random_range(0.47..0.53),
                semi_x: w * rng.random_range(0.72..0.86),
                semi_y: (h * rng.random_range(0.38..0.43) * tall).min(h * 0.47),
                chest_wall_left: view.laterality == Laterality::L,
            },
        );
    }
    let jitter = rng.random_range(0.8..1.25);
    let texture_amplitude = DENSITY_AMPLITUDE[density.index()] * jitter;
    let n_lesions = sample_index(&mut rng, &spec.lesion_count_distribution);
    let mut lesions: Vec<LesionPlan> = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let lesion_type = if rng.random::<f64>() < spec.mass_fraction {
            LesionType::Mass
        } else {
            LesionType::Calcification
        };
        let pathology = if rng.random::<f64>() < spec.malignant_fraction {
            Pathology::Malignant
        } else {
            Pathology::Benign
        };
        let class = LesionClass::from_parts(lesion_type, pathology);
        let range = match lesion_type {
            LesionType::Mass => spec.mass_radius_range,
            LesionType::Calcification => spec.calc_radius_range,
        };
        let contrast = uniform(&mut rng, spec.contrast_ranges[class.index()]);
        let laterality = if rng.random::<bool>() {
            Laterality::L
        } else {
            Laterality::R
        };
        let cc = ViewKey::new(laterality, Projection::CC);
        let mlo = ViewKey::new(laterality, Projection::MLO);
        let mut radius = uniform(&mut rng, range);
        let mut placed = None;
        'shrink: for _ in 0..2 {
            for _ in 0..100 {
                let rho = rng.random_range(0.2..0.8);
                let theta = rng.random_range(-1.2..1.2);
                let theta_mlo = theta + rng.random_range(-0.12..0.12);
                let pc = breasts[&cc].point(rho, theta, w);
                let pm = breasts[&mlo].point(rho, theta_mlo, w);
                let fits = |b: &BreastShape, (x, y): (f64, f64)| {
                    let reach = radius * 1.6;
                    x - reach >= 0.0
                        && x + reach < w
                        && y - reach >= 0.0
                        && y + reach < h
                        && [(reach, 0.0), (-reach, 0.0), (0.0, reach), (0.0, -reach)]
                            .iter()
                            .all(|(dx, dy)| b.radius_at(x + dx, y + dy, w) < 0.92)
                };
                let apart = |p: (f64, f64), view: ViewKey| {
                    lesions.iter().all(|l| match l.centers.get(&view).copied().flatten() {
                        Some(q) => ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() > (radius + l.radius) * 1.8,
                        None => true,
                    })
                };
                if fits(&breasts[&cc], pc) && fits(&breasts[&mlo], pm) && apart(pc, cc) && apart(pm, mlo) {
                    placed = Some((pc, pm));
                    break 'shrink;
                }
            }
            radius = (radius * 0.7).max(range.0 * 0.5);
        }
        let Some((pc, pm)) = placed else {
            return Err(Error::Data("unplaceable lesion".into()));
        };
        let mut centers = BTreeMap::new();
        centers.insert(cc, Some(pc));
        centers.insert(mlo, Some(pm));
        if rng.random::<f64>() < spec.occlusion_probability {
            let hidden = if rng.random::<bool>() { cc } else { mlo };
            centers.insert(hidden, None);
        }
        lesions.push(LesionPlan {
            class,
            radius,
            contrast,
            centers,
            seed: rng.random(),
        });
    }
    let view_seeds = ViewKey::ALL.into_iter().map(|v| (v, rng.random())).collect();
    Ok(ExamPlan {
        case_id: case_id(case_index),
        density,
        breasts,
        lesions,
        texture_amplitude,
        view_seeds,
    })
}

/// Smooth value noise in roughly [-1, 1] on a grid with `cell`-pixel spacing.
fn value_noise<R: Rng>(width: usize, height: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ox, oy): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let gy = y as f64 / cell + oy;
        let (iy, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..width {
            let gx = x as f64 / cell + ox;
            let (ix, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Additive intensity of one lesion in one view, plus its footprint mask.
fn render_lesion(plan: &LesionPlan, center: (f64, f64), width: usize, height: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut add = vec![0.0; width * height];
    let r = plan.radius;
    let (cx, cy) = center;
    let reach = (r * 1.6).ceil() as isize;
    let (x0, x1) = (
        (cx as isize - reach).max(0),
        (cx as isize + reach).min(width as isize - 1),
    );
    let (y0, y1) = (
        (cy as isize - reach).max(0),
        (cy as isize + reach).min(height as isize - 1),
    );
    match plan.class.parts().0 {
        LesionType::Mass => {
            let aspect = rng.random_range(0.7..1.0);
            let angle = rng.random_range(0.0..PI);
            let spiculated = plan.class.is_malignant();
            let n_spikes = rng.random_range(5..9);
            let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let u = dx * angle.cos() + dy * angle.sin();
                    let v = (-dx * angle.sin() + dy * angle.cos()) / aspect;
                    let theta = v.atan2(u);
                    let mut boundary = r * (1.0 + 0.08 * (2.0 * theta + phases[0]).sin());
                    if spiculated {
                        let spike = (n_spikes as f64 * theta + phases[1]).cos().max(0.0).powi(8);
                        boundary *= 1.0 + 0.45 * spike + 0.1 * (3.0 * theta + phases[2]).sin();
                    }
                    let d = (u * u + v * v).sqrt() / boundary;
                    if d < 1.0 {
                        add[y as usize * width + x as usize] = plan.contrast * (1.0 - d * d).powf(0.4);
                    }
                }
            }
        }
        LesionType::Calcification => {
            let malignant = plan.class.is_malignant();
            let count = if malignant {
                rng.random_range(10..18)
            } else {
                rng.random_range(5..10)
            };
            let sigma_range = if malignant { (0.55, 0.9) } else { (0.8, 1.3) };
            for _ in 0..count {
                let a = rng.random_range(0.0..2.0 * PI);
                let rad = r * rng.random::<f64>().sqrt();
                let (sx, sy) = (cx + rad * a.cos(), cy + rad * a.sin());
                let sigma = uniform(&mut rng, sigma_range);
                let amp = plan.contrast * rng.random_range(0.75..1.0);
                let span = (3.0 * sigma).ceil() as isize;
                for y in (sy as isize - span).max(0)..=(sy as isize + span).min(height as isize - 1) {
                    for x in (sx as isize - span).max(0)..=(sx as isize + span).min(width as isize - 1) {
                        let (dx, dy) = (x as f64 + 0.5 - sx, y as f64 + 0.5 - sy);
                        let v = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let cell = &mut add[y as usize * width + x as usize];
                        *cell = cell.max(v);
                    }
                }
            }
        }
    }
    let mask = add.iter().map(|v| *v >= 0.1 * plan.contrast).collect();
    (add, mask)
}

/// Rasterize one view of a planned exam; returns the image and the boxes of
/// the lesions visible in it.
pub fn render_view(spec: &SynthSpec, plan: &ExamPlan, view: ViewKey) -> Result<(Image16, Vec<LesionAnnotation>)> {
    let (w, h) = (spec.image_width, spec.image_height);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.view_seeds[&view]);
    let breast = plan.breasts[&view];
    let d = plan.density.index();
    let octaves = [(1.0, 1.0), (0.5, 0.5), (0.25, 0.3)];
    let mut texture = vec![0.0; w * h];
    for (scale, weight) in octaves {
        let layer = value_noise(w, h, spec.texture_grain * scale, &mut rng);
        for (t, l) in texture.iter_mut().zip(layer) {
            *t += weight * l;
        }
    }
    let mut pixels = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let rr = breast.radius_at(x as f64 + 0.5, y as f64 + 0.5, w as f64);
            if rr < 1.0 {
                let falloff = (1.0 - rr * rr).powf(0.25);
                let i = y * w + x;
                pixels[i] = falloff * (DENSITY_LEVEL[d] + plan.texture_amplitude * texture[i]);
            }
        }
    }
    let mut annotations = Vec::new();
    for l in &plan.lesions {
        let Some(center) = l.centers.get(&view).copied().flatten() else {
            continue;
        };
        let (add, mask) = render_lesion(l, center, w, h);
        for (p, a) in pixels.iter_mut().zip(&add) {
            *p += a;
        }
        let (lesion_type, pathology) = l.class.parts();
        annotations.push(LesionAnnotation {
            view,
            bbox: bounding_box_from_mask(&mask, w, h)?,
            lesion_type,
            pathology,
            source_mask_path: None,
        });
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let data = pixels
        .iter()
        .map(|p| {
            let v = if spec.noise_sigma > 0.0 {
                p + noise.sample(&mut rng)
            } else {
                *p
            };
            (v.clamp(0.0, 1.0) * 0.85 * 65535.0).round() as u16
        })
        .collect();
    Ok((Image16::new(w, h, data), annotations))
}

pub fn generate_exam(spec: &SynthSpec, case_index: usize) -> Result<Exam> {
    let plan = plan_exam(spec, case_index)?;
    let mut images = BTreeMap::new();
    let mut lesions = Vec::new();
    for view in ViewKey::ALL {
        let (img, ann) = render_view(spec, &plan, view)?;
        images.insert(view, ImageRef::Memory(Arc::new(img)));
        lesions.extend(ann);
    }
    Ok(Exam {
        case_id: plan.case_id,
        images,
        density: plan.density,
        lesions,
        preassigned_split: None,
    })
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<Exam>> {
    spec.validate()?;
    (0..spec.n_cases).map(|i| generate_exam(spec, i)).collect()
}

pub fn image_file_name(case_id: &str, view: ViewKey) -> String {
    format!("images/{case_id}_{view}.png")
}

/// Write PNGs, `manifest.csv` and `synth_spec.txt` under `dir`; returns the manifest path.
pub fn write_dataset(spec: &SynthSpec, exams: &[Exam], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for exam in exams {
        for view in ViewKey::ALL {
            let img = exam.image(view)?.load()?;
            write_png16(&dir.join(image_file_name(&exam.case_id, view)), &img)?;
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, exams, |e, v| image_file_name(&e.case_id, v))?;
    let echo = dir.join("synth_spec.txt");
    fs::write(&echo, spec.echo()).map_err(|e| Error::io(&echo, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::derive_case_labels;

    fn small() -> SynthSpec {
        SynthSpec {
            n_cases: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn no_lesion_distribution_gives_normal_exams() {
        let spec = SynthSpec {
            lesion_count_distribution: vec![1.0],
            ..small()
        };
        let e = generate_exam(&spec, 3).unwrap();
        assert!(e.lesions.is_empty());
        assert!(!derive_case_labels(&e).has_lesion);
    }

    #[test]
    fn forced_malignant_mass_is_malignant() {
        let spec = SynthSpec {
            n_cases: 1,
            lesion_count_distribution: vec![0.0, 1.0],
            malignant_fraction: 1.0,
            mass_fraction: 1.0,
            occlusion_probability: 0.0,
            ..SynthSpec::default()
        };
        let e = generate_exam(&spec, 0).unwrap();
        assert!(derive_case_labels(&e).is_malignant);
        assert_eq!(e.lesions.len(), 2, "one lesion seen in both ipsilateral views");
        assert!(e.lesions.iter().all(|l| l.class() == LesionClass::MalignantMass));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small();
        let a = generate_exam(&spec, 5).unwrap();
        let b = generate_exam(&spec, 5).unwrap();
        assert_eq!(a.lesions, b.lesions);
        for v in ViewKey::ALL {
            assert_eq!(a.image(v).unwrap().load().unwrap(), b.image(v).unwrap().load().unwrap());
        }
    }

    #[test]
    fn single_density_class() {
        let spec = SynthSpec {
            density_class_probs: [0.0, 1.0, 0.0, 0.0],
            ..small()
        };
        for i in 0..spec.n_cases {
            assert_eq!(plan_exam(&spec, i).unwrap().density, Density::B);
        }
    }

    #[test]
    fn boxes_lie_inside_frame() {
        let spec = small();
        for e in generate_dataset(&spec).unwrap() {
            for l in &e.lesions {
                assert!(l.bbox.fits_within(spec.image_width as f64, spec.image_height as f64));
            }
        }
    }

    #[test]
    fn invalid_radius_rejected() {
        let spec = SynthSpec {
            mass_radius_range: (5.0, 80.0),
            ..small()
        };
        assert!(spec.validate().is_err());
    }
}
