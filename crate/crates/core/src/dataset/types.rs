use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::image::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Laterality {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    CC,
    MLO,
}

/// One of the four standard mammography views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewKey {
    pub laterality: Laterality,
    pub projection: Projection,
}

impl ViewKey {
    pub const L_CC: ViewKey = ViewKey::new(Laterality::L, Projection::CC);
    pub const L_MLO: ViewKey = ViewKey::new(Laterality::L, Projection::MLO);
    pub const R_CC: ViewKey = ViewKey::new(Laterality::R, Projection::CC);
    pub const R_MLO: ViewKey = ViewKey::new(Laterality::R, Projection::MLO);

    /// Canonical branch/slot order used by every multi-view model and layout.
    pub const ALL: [ViewKey; 4] = [Self::L_CC, Self::L_MLO, Self::R_CC, Self::R_MLO];

    pub const fn new(laterality: Laterality, projection: Projection) -> Self {
        Self { laterality, projection }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|v| *v == self).expect("view in ALL")
    }

    /// The other projection of the same breast.
    pub fn ipsilateral(self) -> ViewKey {
        let projection = match self.projection {
            Projection::CC => Projection::MLO,
            Projection::MLO => Projection::CC,
        };
        ViewKey::new(self.laterality, projection)
    }
}

impl fmt::Display for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lat = match self.laterality {
            Laterality::L => "L",
            Laterality::R => "R",
        };
        let proj = match self.projection {
            Projection::CC => "CC",
            Projection::MLO => "MLO",
        };
        write!(f, "{lat}-{proj}")
    }
}

impl FromStr for ViewKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ViewKey::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim())
            .ok_or_else(|| Error::Format(format!("unknown view '{s}'")))
    }
}

/// Axis-aligned box in pixel coordinates; the max edges are exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) || x_min < 0.0 || y_min < 0.0 || !b.is_finite() {
            return Err(Error::Data(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    fn is_finite(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Point-in-box test on the half-open extent.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Map into a resized frame.
    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    /// Clip to `[0,width)×[0,height)`; `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionType {
    Mass,
    Calcification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathology {
    Benign,
    Malignant,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Format(format!(
                        concat!("invalid ", stringify!($ty), " '{}'"), other))),
                }
            }
        }
    };
}

text_enum!(LesionType { Mass => "mass", Calcification => "calcification" });
text_enum!(Pathology { Benign => "benign", Malignant => "malignant" });

/// The localizer's four output classes, in output-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionClass {
    BenignCalcification,
    MalignantCalcification,
    BenignMass,
    MalignantMass,
}

impl LesionClass {
    pub const ALL: [LesionClass; 4] = [
        LesionClass::BenignCalcification,
        LesionClass::MalignantCalcification,
        LesionClass::BenignMass,
        LesionClass::MalignantMass,
    ];

    pub fn from_parts(lesion_type: LesionType, pathology: Pathology) -> Self {
        match (lesion_type, pathology) {
            (LesionType::Calcification, Pathology::Benign) => LesionClass::BenignCalcification,
            (LesionType::Calcification, Pathology::Malignant) => LesionClass::MalignantCalcification,
            (LesionType::Mass, Pathology::Benign) => LesionClass::BenignMass,
            (LesionType::Mass, Pathology::Malignant) => LesionClass::MalignantMass,
        }
    }

    pub fn parts(self) -> (LesionType, Pathology) {
        match self {
            LesionClass::BenignCalcification => (LesionType::Calcification, Pathology::Benign),
            LesionClass::MalignantCalcification => (LesionType::Calcification, Pathology::Malignant),
            LesionClass::BenignMass => (LesionType::Mass, Pathology::Benign),
            LesionClass::MalignantMass => (LesionType::Mass, Pathology::Malignant),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_malignant(self) -> bool {
        self.parts().1 == Pathology::Malignant
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LesionClass::BenignCalcification => "ben_calc",
            LesionClass::MalignantCalcification => "mal_calc",
            LesionClass::BenignMass => "ben_mass",
            LesionClass::MalignantMass => "mal_mass",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionAnnotation {
    pub view: ViewKey,
    pub bbox: BBox,
    pub lesion_type: LesionType,
    pub pathology: Pathology,
    pub source_mask_path: Option<String>,
}

impl LesionAnnotation {
    pub fn class(&self) -> LesionClass {
        LesionClass::from_parts(self.lesion_type, self.pathology)
    }
}

/// BI-RADS density category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Density {
    A,
    B,
    C,
    D,
}

text_enum!(Density { A => "a", B => "b", C => "c", D => "d" });

impl Density {
    pub const ALL: [Density; 4] = [Density::A, Density::B, Density::C, Density::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn superclass(self) -> DensitySuper {
        match self {
            Density::A | Density::B => DensitySuper::Fatty,
            Density::C | Density::D => DensitySuper::Dense,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DensitySuper {
    Fatty,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionCategory {
    Normal,
    Mass,
    Calcification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathologyCategory {
    Normal,
    Benign,
    Malignant,
}

text_enum!(DensitySuper { Fatty => "fatty", Dense => "dense" });
text_enum!(LesionCategory { Normal => "normal", Mass => "mass", Calcification => "calcification" });
text_enum!(PathologyCategory { Normal => "normal", Benign => "benign", Malignant => "malignant" });

/// Split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

text_enum!(Split { Train => "train", Validation => "validation", Test => "test" });

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

/// One patient case with its four views.
#[derive(Debug, Clone)]
pub struct Exam {
    pub case_id: String,
    pub images: BTreeMap<ViewKey, ImageRef>,
    pub density: Density,
    pub lesions: Vec<LesionAnnotation>,
    /// Split fixed upstream (e.g. an official test partition), if any.
    pub preassigned_split: Option<Split>,
}

impl Exam {
    pub fn image(&self, view: ViewKey) -> Result<&ImageRef> {
        self.images
            .get(&view)
            .ok_or_else(|| Error::Contract(format!("case {} has no {view} view", self.case_id)))
    }

    pub fn lesions_in(&self, view: ViewKey) -> impl Iterator<Item = &LesionAnnotation> {
        self.lesions.iter().filter(move |l| l.view == view)
    }
}

/// Case-level labels derived from an [`Exam`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CaseLabels {
    pub density_super: DensitySuper,
    pub has_lesion: bool,
    pub is_malignant: bool,
    pub lesion_category: LesionCategory,
    pub pathology_category: PathologyCategory,
}

/// Derive [`CaseLabels`]; masses take precedence over calcifications for the
/// single lesion category of a case.
pub fn derive_case_labels(exam: &Exam) -> CaseLabels {
    let has_lesion = !exam.lesions.is_empty();
    let is_malignant = exam.lesions.iter().any(|l| l.pathology == Pathology::Malignant);
    let lesion_category = if exam.lesions.iter().any(|l| l.lesion_type == LesionType::Mass) {
        LesionCategory::Mass
    } else if has_lesion {
        LesionCategory::Calcification
    } else {
        LesionCategory::Normal
    };
    let pathology_category = if is_malignant {
        PathologyCategory::Malignant
    } else if has_lesion {
        PathologyCategory::Benign
    } else {
        PathologyCategory::Normal
    };
    CaseLabels {
        density_super: exam.density.superclass(),
        has_lesion,
        is_malignant,
        lesion_category,
        pathology_category,
    }
}

/// Tightest half-open box around the `true` pixels of a row-major mask.
pub fn bounding_box_from_mask(mask: &[bool], width: usize, height: usize) -> Result<BBox> {
    assert_eq!(mask.len(), width * height, "mask size");
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Data("empty lesion mask".into()));
    }
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exam(density: Density, lesions: Vec<(LesionType, Pathology)>) -> Exam {
        Exam {
            case_id: "c".into(),
            images: BTreeMap::new(),
            density,
            lesions: lesions
                .into_iter()
                .map(|(lesion_type, pathology)| LesionAnnotation {
                    view: ViewKey::R_CC,
                    bbox: BBox::new(1.0, 1.0, 4.0, 4.0).unwrap(),
                    lesion_type,
                    pathology,
                    source_mask_path: None,
                })
                .collect(),
            preassigned_split: None,
        }
    }

    #[test]
    fn view_keys_serialize_in_canonical_form() {
        let names: Vec<String> = ViewKey::ALL.iter().map(ToString::to_string).collect();
        assert_eq!(names, ["L-CC", "L-MLO", "R-CC", "R-MLO"]);
        for v in ViewKey::ALL {
            assert_eq!(v.to_string().parse::<ViewKey>().unwrap(), v);
        }
        assert!("L-XX".parse::<ViewKey>().is_err());
        assert_eq!(ViewKey::R_MLO.ipsilateral(), ViewKey::R_CC);
    }

    #[test]
    fn normal_exam_labels() {
        let l = derive_case_labels(&exam(Density::B, vec![]));
        assert_eq!(
            l,
            CaseLabels {
                density_super: DensitySuper::Fatty,
                has_lesion: false,
                is_malignant: false,
                lesion_category: LesionCategory::Normal,
                pathology_category: PathologyCategory::Normal,
            }
        );
    }

    #[test]
    fn benign_calcification_labels() {
        let l = derive_case_labels(&exam(Density::C, vec![(LesionType::Calcification, Pathology::Benign)]));
        assert_eq!(l.density_super, DensitySuper::Dense);
        assert!(l.has_lesion && !l.is_malignant);
        assert_eq!(l.lesion_category, LesionCategory::Calcification);
        assert_eq!(l.pathology_category, PathologyCategory::Benign);
    }

    #[test]
    fn any_malignant_lesion_makes_case_malignant() {
        let l = derive_case_labels(&exam(
            Density::A,
            vec![
                (LesionType::Mass, Pathology::Benign),
                (LesionType::Calcification, Pathology::Malignant),
            ],
        ));
        assert!(l.is_malignant);
        assert_eq!(l.pathology_category, PathologyCategory::Malignant);
        assert_eq!(l.lesion_category, LesionCategory::Mass);
    }

    #[test]
    fn lesion_classes_are_bijective() {
        for (i, c) in LesionClass::ALL.into_iter().enumerate() {
            let (t, p) = c.parts();
            assert_eq!(LesionClass::from_parts(t, p), c);
            assert_eq!(LesionClass::from_index(i), Some(c));
        }
    }

    #[test]
    fn bbox_single_pixel() {
        let mut m = vec![false; 10 * 10];
        m[7 * 10 + 5] = true;
        assert_eq!(
            bounding_box_from_mask(&m, 10, 10).unwrap(),
            BBox::new(5.0, 7.0, 6.0, 8.0).unwrap()
        );
    }

    #[test]
    fn bbox_full_frame() {
        let m = vec![true; 100];
        assert_eq!(
            bounding_box_from_mask(&m, 10, 10).unwrap(),
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
        );
    }

    #[test]
    fn bbox_l_shape_matches_brute_force() {
        // rows 2..=4, cols 3..=9, shaped as an L
        let (w, h) = (12, 8);
        let mut m = vec![false; w * h];
        for y in 2..=4 {
            m[y * w + 3] = true;
        }
        for x in 3..=9 {
            m[4 * w + x] = true;
        }
        let fg: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|(x, y)| m[y * w + x])
            .collect();
        let oracle = (
            fg.iter().map(|p| p.0).min().unwrap() as f64,
            fg.iter().map(|p| p.1).min().unwrap() as f64,
            fg.iter().map(|p| p.0).max().unwrap() as f64 + 1.0,
            fg.iter().map(|p| p.1).max().unwrap() as f64 + 1.0,
        );
        assert_eq!(oracle, (3.0, 2.0, 10.0, 5.0));
        let b = bounding_box_from_mask(&m, w, h).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), oracle);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let err = bounding_box_from_mask(&[false; 4], 2, 2).unwrap_err();
        assert!(err.to_string().contains("empty lesion mask"));
    }

    #[test]
    fn iou_of_half_overlap() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
