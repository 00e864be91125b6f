use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{derive_case_labels, load_manifest, DatasetSplit, DensitySuper, Exam, Split, ViewKey};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::preprocess::{prepare_view, sample_patches, PreprocessProfile};
use crate::taskmodels::{Labeled, LocalizerSample};

/// Exams with their split assignment.
pub struct Cohort {
    pub exams: Vec<Exam>,
    pub split: DatasetSplit,
}

impl Cohort {
    pub fn load(manifest: &Path, split_csv: &Path) -> Result<Self> {
        let loaded = load_manifest(manifest)?;
        for r in &loaded.report.rejections {
            log::warn!("manifest: {r:?}");
        }
        let split = read_split(split_csv)?;
        Ok(Self {
            exams: loaded.exams,
            split,
        })
    }

    /// Exams of one split in the split's case order.
    pub fn exams_in(&self, split: Split) -> Result<Vec<&Exam>> {
        let by_id: BTreeMap<&str, &Exam> = self.exams.iter().map(|e| (e.case_id.as_str(), e)).collect();
        self.split
            .ids(split)
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("split lists unknown case {id}")))
            })
            .collect()
    }
}

/// Read `case_id,split,...` rows written by the split command.
pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let mut split = DatasetSplit::default();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let s: Split = rec.get(1).unwrap_or_default().parse()?;
        match s {
            Split::Train => split.train.push(id),
            Split::Validation => split.validation.push(id),
            Split::Test => split.test.push(id),
        }
    }
    Ok(split)
}

pub fn view_id(exam: &Exam, view: ViewKey) -> String {
    format!("{}:{view}", exam.case_id)
}

pub fn is_dense(exam: &Exam) -> bool {
    derive_case_labels(exam).density_super == DensitySuper::Dense
}

pub fn view_has_lesion(exam: &Exam, view: ViewKey) -> bool {
    exam.lesions_in(view).next().is_some()
}

/// One view prepared for a model profile.
pub fn view_tensor(exam: &Exam, view: ViewKey, profile: &PreprocessProfile) -> Result<Tensor> {
    Ok(prepare_view(&*exam.image(view)?.load()?, profile)?.tensor)
}

/// All four views in canonical order.
pub fn exam_tensors(exam: &Exam, profile: &PreprocessProfile) -> Result<[Tensor; 4]> {
    let mut out = Vec::with_capacity(4);
    for v in ViewKey::ALL {
        out.push(view_tensor(exam, v, profile)?);
    }
    Ok(out.try_into().expect("four views"))
}

/// Single-view samples labeled by `label`.
pub fn view_samples(
    exams: &[&Exam],
    profile: &PreprocessProfile,
    label: impl Fn(&Exam, ViewKey) -> usize,
) -> Result<Vec<Labeled<Tensor>>> {
    let mut out = Vec::with_capacity(exams.len() * 4);
    for e in exams {
        for v in ViewKey::ALL {
            out.push(Labeled {
                id: view_id(e, v),
                input: view_tensor(e, v, profile)?,
                label: label(e, v),
            });
        }
    }
    Ok(out)
}

pub fn density_patient_samples(exams: &[&Exam], profile: &PreprocessProfile) -> Result<Vec<Labeled<[Tensor; 4]>>> {
    exams
        .iter()
        .map(|e| {
            Ok(Labeled {
                id: e.case_id.clone(),
                input: exam_tensors(e, profile)?,
                label: usize::from(is_dense(e)),
            })
        })
        .collect()
}

/// Lesion and breast-background patches from every view.
pub fn patch_samples(
    exams: &[&Exam],
    profile: &PreprocessProfile,
    size: usize,
    per_lesion: usize,
    per_normal: usize,
    seed: u64,
) -> Result<Vec<Labeled<Tensor>>> {
    let mut out = Vec::new();
    for (i, e) in exams.iter().enumerate() {
        for (k, v) in ViewKey::ALL.into_iter().enumerate() {
            let view_seed = seed.wrapping_add((i * 4 + k) as u64 * 104_729);
            let sample = sample_patches(e, v, profile, size, per_lesion, per_normal, view_seed)?;
            for (j, p) in sample.patches.into_iter().enumerate() {
                out.push(Labeled {
                    id: format!("{}:{j}", view_id(e, v)),
                    input: p.tensor,
                    label: p.window.label.index(),
                });
            }
        }
    }
    Ok(out)
}

/// Prepared localizer input with its mapped ground truth.
pub fn localizer_sample(exam: &Exam, view: ViewKey, profile: &PreprocessProfile) -> Result<LocalizerSample> {
    let prepared = prepare_view(&*exam.image(view)?.load()?, profile)?;
    Ok(LocalizerSample {
        id: view_id(exam, view),
        boxes: exam
            .lesions_in(view)
            .map(|l| (prepared.map_box(&l.bbox), l.class()))
            .collect(),
        image: prepared.tensor,
    })
}

pub fn localizer_samples(exams: &[&Exam], profile: &PreprocessProfile) -> Result<Vec<LocalizerSample>> {
    let mut out = Vec::new();
    for e in exams {
        for v in ViewKey::ALL {
            out.push(localizer_sample(e, v, profile)?);
        }
    }
    Ok(out)
}
