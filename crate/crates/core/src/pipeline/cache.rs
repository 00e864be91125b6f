use std::path::Path;

use crate::dataset::{BBox, LesionClass, Split};
use crate::error::{Error, Result};
use crate::evalkit::{GroundTruth, ScoredBox};
use crate::fusion::PatientRecord;
use crate::taskmodels::Detection;

use super::container::Container;

const CACHE_KIND: &str = "fusion_cache";

/// Everything evaluation and fusion need from the task models for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub record: PatientRecord,
    /// Findings probabilities of the model trained without patch pre-training.
    pub p_findings_scratch: [f64; 4],
    /// Annotations in the localizer frame, per view.
    pub ground_truth: [Vec<GroundTruth>; 4],
    /// Every detection above the score threshold, per view, for FROC analysis.
    pub froc: [Vec<ScoredBox>; 4],
}

impl CaseRecord {
    pub fn view_has_lesion(&self, view: usize) -> bool {
        !self.ground_truth[view].is_empty()
    }
}

/// Per-case task outputs with a descriptor of how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCache {
    pub descriptor: String,
    pub cases: Vec<CaseRecord>,
}

fn push_box(out: &mut Vec<f64>, b: &BBox, class: LesionClass) {
    out.extend([b.x_min, b.y_min, b.x_max, b.y_max, class.index() as f64]);
}

struct Cursor<'a> {
    data: &'a [f64],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        let s = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Integrity("truncated cache record".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn one(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn bbox(&mut self) -> Result<(BBox, LesionClass)> {
        let r = self.take(5)?;
        let bbox = BBox::new(r[0], r[1], r[2], r[3]).map_err(|_| Error::Integrity("invalid box in cache".into()))?;
        let class =
            LesionClass::from_index(r[4] as usize).ok_or_else(|| Error::Integrity("invalid class in cache".into()))?;
        Ok((bbox, class))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(Error::Integrity("trailing values in cache record".into()))
        }
    }
}

fn per_view<T>(mut f: impl FnMut() -> Result<T>) -> Result<[T; 4]> {
    let v = vec![f()?, f()?, f()?, f()?];
    Ok(v.try_into().unwrap_or_else(|_| unreachable!()))
}

fn split4(flat: &[f64], width: usize) -> Result<[Vec<f64>; 4]> {
    if flat.len() != 4 * width {
        return Err(Error::Integrity("cache feature block has the wrong size".into()));
    }
    Ok(std::array::from_fn(|k| flat[k * width..(k + 1) * width].to_vec()))
}

impl FusionCache {
    fn feature_width(&self) -> usize {
        self.cases.first().map_or(0, |c| c.record.feat_findings[0].len())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CACHE_KIND);
        c.put_text("descriptor", &self.descriptor);
        c.put_text("cases", self.cases.len().to_string());
        c.put_text("feature_width", self.feature_width().to_string());
        for (i, case) in self.cases.iter().enumerate() {
            let r = &case.record;
            c.put_text(&format!("{i}.id"), &r.case_id);
            c.put_text(&format!("{i}.split"), r.split.to_string());
            let mut scalars = vec![r.p_density];
            scalars.extend(r.p_density_views);
            scalars.extend(r.p_findings);
            scalars.extend(case.p_findings_scratch);
            scalars.extend([r.has_lesion, r.is_malignant, r.is_dense].map(f64::from));
            c.put_array(&format!("{i}.scalars"), scalars);
            c.put_array(&format!("{i}.feat_density"), r.feat_density.clone());
            c.put_array(&format!("{i}.feat_findings"), r.feat_findings.concat());
            c.put_array(&format!("{i}.background"), r.background.concat());
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            let mut froc = Vec::new();
            for k in 0..4 {
                dets.push(r.detections[k].len() as f64);
                for d in &r.detections[k] {
                    push_box(&mut dets, &d.bbox, d.class);
                    dets.push(d.confidence);
                    dets.extend(&d.feature);
                }
                gts.push(case.ground_truth[k].len() as f64);
                for g in &case.ground_truth[k] {
                    push_box(&mut gts, &g.bbox, g.class);
                }
                froc.push(case.froc[k].len() as f64);
                for d in &case.froc[k] {
                    push_box(&mut froc, &d.bbox, d.class);
                    froc.push(d.confidence);
                }
            }
            c.put_array(&format!("{i}.detections"), dets);
            c.put_array(&format!("{i}.ground_truth"), gts);
            c.put_array(&format!("{i}.froc"), froc);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n: usize = c.parsed("cases")?;
        let fw: usize = c.parsed("feature_width")?;
        let mut cases = Vec::with_capacity(n);
        for i in 0..n {
            let s = c.array(&format!("{i}.scalars"))?;
            if s.len() != 16 {
                return Err(Error::Integrity(format!("cache record {i} has malformed scalars")));
            }
            let four = |o: usize| -> [f64; 4] { std::array::from_fn(|k| s[o + k]) };
            let mut cur = Cursor {
                data: c.array(&format!("{i}.detections"))?,
                pos: 0,
            };
            let detections = per_view(|| {
                let count = cur.one()? as usize;
                (0..count)
                    .map(|_| {
                        let (bbox, class) = cur.bbox()?;
                        let confidence = cur.one()?;
                        Ok(Detection {
                            bbox,
                            class,
                            confidence,
                            feature: cur.take(fw)?.to_vec(),
                        })
                    })
                    .collect()
            })?;
            cur.finish()?;
            let mut cur = Cursor {
                data: c.array(&format!("{i}.ground_truth"))?,
                pos: 0,
            };
            let ground_truth = per_view(|| {
                let count = cur.one()? as usize;
                (0..count)
                    .map(|_| cur.bbox().map(|(bbox, class)| GroundTruth { bbox, class }))
                    .collect()
            })?;
            cur.finish()?;
            let mut cur = Cursor {
                data: c.array(&format!("{i}.froc"))?,
                pos: 0,
            };
            let froc = per_view(|| {
                let count = cur.one()? as usize;
                (0..count)
                    .map(|_| {
                        let (bbox, class) = cur.bbox()?;
                        Ok(ScoredBox {
                            bbox,
                            class,
                            confidence: cur.one()?,
                        })
                    })
                    .collect()
            })?;
            cur.finish()?;
            cases.push(CaseRecord {
                record: PatientRecord {
                    case_id: c.text(&format!("{i}.id"))?.to_string(),
                    split: c.parsed::<Split>(&format!("{i}.split"))?,
                    has_lesion: s[13] != 0.0,
                    is_malignant: s[14] != 0.0,
                    is_dense: s[15] != 0.0,
                    p_density: s[0],
                    feat_density: c.array(&format!("{i}.feat_density"))?.to_vec(),
                    p_density_views: four(1),
                    p_findings: four(5),
                    feat_findings: split4(c.array(&format!("{i}.feat_findings"))?, fw)?,
                    detections,
                    background: split4(c.array(&format!("{i}.background"))?, fw)?,
                },
                p_findings_scratch: four(9),
                ground_truth,
                froc,
            });
        }
        Ok(Self {
            descriptor: c.text("descriptor")?.to_string(),
            cases,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("fusion cache {}", path.display())));
        }
        Self::from_container(&Container::read(path, CACHE_KIND)?)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.record.split == split)
    }
}
