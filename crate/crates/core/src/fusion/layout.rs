use std::fmt;
use std::str::FromStr;

use crate::dataset::ViewKey;
use crate::error::{Error, Result};
use crate::taskmodels::Detection;

pub const MAX_DETECTIONS_PER_VIEW: usize = 5;

/// Patient-level prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionTarget {
    /// Any lesion present.
    Lesion,
    /// Any malignant lesion present.
    Malignancy,
}

impl FusionTarget {
    pub const ALL: [FusionTarget; 2] = [FusionTarget::Lesion, FusionTarget::Malignancy];
}

impl fmt::Display for FusionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionTarget::Lesion => "lesion",
            FusionTarget::Malignancy => "malignancy",
        })
    }
}

impl FromStr for FusionTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lesion" => Ok(FusionTarget::Lesion),
            "malignancy" => Ok(FusionTarget::Malignancy),
            other => Err(Error::Config(format!("unknown fusion target '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FusionConfig {
    /// Detections kept per view.
    pub n: usize,
    pub target: FusionTarget,
    pub include_density: bool,
}

impl FusionConfig {
    pub fn new(n: usize, target: FusionTarget, include_density: bool) -> Result<Self> {
        let c = Self {
            n,
            target,
            include_density,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DETECTIONS_PER_VIEW).contains(&self.n) {
            return Err(Error::Config(format!(
                "detections per view n = {} outside 1..={MAX_DETECTIONS_PER_VIEW}",
                self.n
            )));
        }
        Ok(())
    }

    /// Short model-name suffix: `*` marks the variant without density.
    pub fn suffix(&self) -> &'static str {
        if self.include_density {
            ""
        } else {
            "*"
        }
    }
}

/// One position of the fusion vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Density,
    Findings(ViewKey),
    /// Detection of the given 0-based confidence rank in a view.
    Localizer(ViewKey, usize),
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Density => f.write_str("density"),
            Slot::Findings(v) => write!(f, "findings:{v}"),
            Slot::Localizer(v, r) => write!(f, "localizer:{v}:{r}"),
        }
    }
}

impl FromStr for Slot {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Format(format!("bad layout slot '{s}'"));
        match parts.as_slice() {
            ["density"] => Ok(Slot::Density),
            ["findings", v] => Ok(Slot::Findings(v.parse().map_err(|_| bad())?)),
            ["localizer", v, r] => Ok(Slot::Localizer(
                v.parse().map_err(|_| bad())?,
                r.parse().map_err(|_| bad())?,
            )),
            _ => Err(bad()),
        }
    }
}

/// Ordered slot list of a fusion configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub config: FusionConfig,
    pub slots: Vec<Slot>,
}

impl Layout {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::with_capacity(5 + 4 * config.n);
        if config.include_density {
            slots.push(Slot::Density);
        }
        slots.extend(ViewKey::ALL.iter().map(|&v| Slot::Findings(v)));
        for v in ViewKey::ALL {
            slots.extend((0..config.n).map(|r| Slot::Localizer(v, r)));
        }
        Ok(Self { config, slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Single-line text form: config fields, then slots.
    pub fn descriptor(&self) -> String {
        let slots: Vec<String> = self.slots.iter().map(Slot::to_string).collect();
        format!(
            "n={} target={} density={} score=confidence slots={}",
            self.config.n,
            self.config.target,
            self.config.include_density,
            slots.join(",")
        )
    }

    pub fn parse(descriptor: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad layout descriptor '{descriptor}'"));
        let mut n = None;
        let mut target = None;
        let mut density = None;
        let mut slots = None;
        for field in descriptor.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "n" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
                "target" => target = Some(v.parse::<FusionTarget>()?),
                "density" => density = Some(v.parse::<bool>().map_err(|_| bad())?),
                "score" => {}
                "slots" => slots = Some(v.split(',').map(str::parse).collect::<Result<Vec<Slot>>>()?),
                _ => return Err(bad()),
            }
        }
        let config = FusionConfig::new(n.ok_or_else(bad)?, target.ok_or_else(bad)?, density.ok_or_else(bad)?)?;
        let layout = Self::new(config)?;
        if slots.as_ref() != Some(&layout.slots) {
            return Err(Error::Integrity(
                "layout slots disagree with their configuration".into(),
            ));
        }
        Ok(layout)
    }
}

/// Indices (into the view's confidence-sorted list) of the detections that
/// fill the view's localizer slots.
pub fn retained_detections(detections: &[Detection], target: FusionTarget, n: usize) -> Vec<usize> {
    detections
        .iter()
        .enumerate()
        .filter(|(_, d)| target == FusionTarget::Lesion || d.class.is_malignant())
        .map(|(i, _)| i)
        .take(n)
        .collect()
}

/// Patient score vector `w` with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

fn check_sorted(view: ViewKey, dets: &[Detection]) -> Result<()> {
    if dets.windows(2).any(|w| w[0].confidence < w[1].confidence) {
        return Err(Error::Contract(format!(
            "detections of {view} not sorted by confidence"
        )));
    }
    Ok(())
}

/// Concatenate density, per-view findings and top-n detection confidences
/// per view (zero for missing detections).
pub fn build_score_vector(
    p_density: Option<f64>,
    p_findings: &[f64; 4],
    detections: &[Vec<Detection>; 4],
    config: FusionConfig,
) -> Result<FusionVector> {
    let layout = Layout::new(config)?;
    let mut values = Vec::with_capacity(layout.len());
    if config.include_density {
        values.push(p_density.ok_or_else(|| Error::Contract("density score missing".into()))?);
    }
    values.extend_from_slice(p_findings);
    for (v, dets) in ViewKey::ALL.iter().zip(detections) {
        check_sorted(*v, dets)?;
        let kept = retained_detections(dets, config.target, config.n);
        values.extend(kept.iter().map(|&i| dets[i].confidence));
        values.extend(std::iter::repeat_n(0.0, config.n - kept.len()));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("fusion scores must lie in [0, 1]".into()));
    }
    Ok(FusionVector { values, layout })
}

/// Max-ensemble baseline: highest findings score for the lesion target,
/// highest malignant detection confidence (0 without any) for malignancy.
pub fn ensemble_max(p_findings: &[f64; 4], detections: &[Vec<Detection>; 4], target: FusionTarget) -> f64 {
    match target {
        FusionTarget::Lesion => p_findings.iter().copied().fold(0.0, f64::max),
        FusionTarget::Malignancy => detections
            .iter()
            .flatten()
            .filter(|d| d.class.is_malignant())
            .map(|d| d.confidence)
            .fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BBox, LesionClass};

    pub(crate) fn det(class: LesionClass, confidence: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class,
            confidence,
            feature: vec![confidence; 2],
        }
    }

    #[test]
    fn no_detections_pad_with_zero() {
        let cfg = FusionConfig::new(1, FusionTarget::Lesion, true).unwrap();
        let w = build_score_vector(Some(0.7), &[0.9, 0.2, 0.1, 0.4], &Default::default(), cfg).unwrap();
        assert_eq!(w.values, vec![0.7, 0.9, 0.2, 0.1, 0.4, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn slot_count() {
        let cfg = FusionConfig::new(3, FusionTarget::Lesion, true).unwrap();
        assert_eq!(Layout::new(cfg).unwrap().len(), 17);
        assert!(FusionConfig::new(6, FusionTarget::Lesion, true).is_err());
        assert!(FusionConfig::new(0, FusionTarget::Lesion, true).is_err());
    }

    #[test]
    fn malignancy_filters_benign() {
        let cfg = FusionConfig::new(2, FusionTarget::Malignancy, false).unwrap();
        let mut dets: [Vec<Detection>; 4] = Default::default();
        dets[0] = vec![
            det(LesionClass::BenignMass, 0.8),
            det(LesionClass::MalignantCalcification, 0.6),
        ];
        let w = build_score_vector(None, &[0.5; 4], &dets, cfg).unwrap();
        assert_eq!(&w.values[4..6], &[0.6, 0.0]);
    }

    #[test]
    fn descriptor_round_trips() {
        for n in 1..=5 {
            for t in FusionTarget::ALL {
                for d in [true, false] {
                    let l = Layout::new(FusionConfig::new(n, t, d).unwrap()).unwrap();
                    assert_eq!(Layout::parse(&l.descriptor()).unwrap(), l);
                }
            }
        }
    }

    #[test]
    fn ensemble_max_rules() {
        assert_eq!(
            ensemble_max(&[0.1, 0.2, 0.9, 0.3], &Default::default(), FusionTarget::Lesion),
            0.9
        );
        let mut dets: [Vec<Detection>; 4] = Default::default();
        dets[2] = vec![det(LesionClass::BenignMass, 0.8)];
        assert_eq!(ensemble_max(&[0.5; 4], &dets, FusionTarget::Malignancy), 0.0);
        dets[3] = vec![det(LesionClass::MalignantMass, 0.3)];
        assert_eq!(ensemble_max(&[0.5; 4], &dets, FusionTarget::Malignancy), 0.3);
    }
}
