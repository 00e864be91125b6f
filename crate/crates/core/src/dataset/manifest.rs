use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::image::ImageRef;
use super::types::{BBox, Density, Exam, LesionAnnotation, LesionType, Pathology, Split, ViewKey};

pub const MANIFEST_COLUMNS: [&str; 12] = [
    "case_id",
    "view",
    "image_path",
    "density",
    "row_kind",
    "lesion_type",
    "pathology",
    "x_min",
    "y_min",
    "x_max",
    "y_max",
    "preassigned_split",
];

const OPTIONAL_COLUMNS: [&str; 1] = ["preassigned_split"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub exams: Vec<Exam>,
    pub report: LoadReport,
}

#[derive(Default)]
struct PartialCase {
    views: BTreeMap<ViewKey, PathBuf>,
    density: Option<Density>,
    lesions: Vec<LesionAnnotation>,
    preassigned: Option<Split>,
    missing_image: Option<PathBuf>,
}

struct Columns(HashMap<&'static str, usize>);

impl Columns {
    fn get<'r>(&self, record: &'r csv::StringRecord, name: &str) -> &'r str {
        self.0
            .get(name)
            .and_then(|&i| record.get(i))
            .map(str::trim)
            .unwrap_or("")
    }
}

fn parse_coord(s: &str, line: u64) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: invalid coordinate '{s}'")))
}

/// Load and validate a manifest; image paths resolve relative to its directory.
pub fn load_manifest(path: &Path) -> Result<LoadedDataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let mut cols = HashMap::new();
    for name in MANIFEST_COLUMNS {
        match headers.iter().position(|h| h == name) {
            Some(i) => {
                cols.insert(name, i);
            }
            None if OPTIONAL_COLUMNS.contains(&name) => {}
            None => return Err(Error::MissingColumn(name.to_string())),
        }
    }
    let cols = Columns(cols);

    let mut order: Vec<String> = Vec::new();
    let mut cases: HashMap<String, PartialCase> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let case_id = cols.get(&record, "case_id").to_string();
        if case_id.is_empty() {
            return Err(Error::Format(format!("line {line}: empty case_id")));
        }
        let view: ViewKey = cols
            .get(&record, "view")
            .parse()
            .map_err(|e: Error| Error::Format(format!("line {line}: {e}")))?;
        let case = cases.entry(case_id.clone()).or_insert_with(|| {
            order.push(case_id.clone());
            PartialCase::default()
        });
        let density = cols.get(&record, "density");
        if !density.is_empty() {
            let d: Density = density.to_ascii_lowercase().parse()?;
            match case.density {
                Some(prev) if prev != d => {
                    return Err(Error::Format(format!("case {case_id}: conflicting density labels")))
                }
                _ => case.density = Some(d),
            }
        }
        let pre = cols.get(&record, "preassigned_split");
        if !pre.is_empty() {
            let s: Split = pre.parse()?;
            if s == Split::Validation {
                return Err(Error::Format(format!(
                    "line {line}: preassigned_split must be train or test"
                )));
            }
            match case.preassigned {
                Some(prev) if prev != s => {
                    return Err(Error::Format(format!("case {case_id}: conflicting preassigned splits")))
                }
                _ => case.preassigned = Some(s),
            }
        }
        match cols.get(&record, "row_kind") {
            "view" => {
                let rel = cols.get(&record, "image_path");
                if rel.is_empty() {
                    return Err(Error::Format(format!("line {line}: view row without image_path")));
                }
                let full = base.join(rel);
                if !full.is_file() {
                    case.missing_image.get_or_insert(full.clone());
                }
                if case.views.insert(view, full).is_some() {
                    return Err(Error::Format(format!("duplicate view {view} for case {case_id}")));
                }
            }
            "lesion" => {
                let bbox = BBox::new(
                    parse_coord(cols.get(&record, "x_min"), line)?,
                    parse_coord(cols.get(&record, "y_min"), line)?,
                    parse_coord(cols.get(&record, "x_max"), line)?,
                    parse_coord(cols.get(&record, "y_max"), line)?,
                )
                .map_err(|e| Error::Format(format!("line {line}: {e}")))?;
                case.lesions.push(LesionAnnotation {
                    view,
                    bbox,
                    lesion_type: cols.get(&record, "lesion_type").parse::<LesionType>()?,
                    pathology: cols.get(&record, "pathology").parse::<Pathology>()?,
                    source_mask_path: None,
                });
            }
            other => return Err(Error::Format(format!("line {line}: unknown row_kind '{other}'"))),
        }
    }

    let mut exams = Vec::with_capacity(order.len());
    let mut report = LoadReport::default();
    for case_id in order {
        let case = cases.remove(&case_id).expect("case recorded");
        let reject = |reason: String| Rejection {
            case_id: case_id.clone(),
            reason,
        };
        if case.views.len() < ViewKey::ALL.len() {
            report.rejections.push(reject("incomplete".into()));
            continue;
        }
        if let Some(p) = case.missing_image {
            report.rejections.push(reject(format!("missing image {}", p.display())));
            continue;
        }
        let Some(density) = case.density else {
            report.rejections.push(reject("missing density".into()));
            continue;
        };
        exams.push(Exam {
            case_id,
            images: case.views.into_iter().map(|(k, p)| (k, ImageRef::Path(p))).collect(),
            density,
            lesions: case.lesions,
            preassigned_split: case.preassigned,
        });
    }
    Ok(LoadedDataset { exams, report })
}

/// Write a manifest for `exams`; `image_path(exam, view)` yields the stored
/// (manifest-relative) path of each view image.
pub fn write_manifest(path: &Path, exams: &[Exam], image_path: impl Fn(&Exam, ViewKey) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for exam in exams {
        let pre = exam.preassigned_split.map(|s| s.to_string()).unwrap_or_default();
        for view in ViewKey::ALL {
            let (v, p, d) = (view.to_string(), image_path(exam, view), exam.density.to_string());
            w.write_record([&exam.case_id, &v, &p, &d, "view", "", "", "", "", "", "", &pre])
                .map_err(csv_err)?;
        }
        for l in &exam.lesions {
            let b = l.bbox;
            w.write_record([
                exam.case_id.as_str(),
                &l.view.to_string(),
                "",
                "",
                "lesion",
                &l.lesion_type.to_string(),
                &l.pathology.to_string(),
                &b.x_min.to_string(),
                &b.y_min.to_string(),
                &b.x_max.to_string(),
                &b.y_max.to_string(),
                &pre,
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const HEADER: &str =
        "case_id,view,image_path,density,row_kind,lesion_type,pathology,x_min,y_min,x_max,y_max,preassigned_split";

    fn fixture(rows: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png", "d.png"] {
            fs::write(dir.path().join(name), b"").unwrap();
        }
        let path = dir.path().join("manifest.csv");
        fs::write(&path, format!("{HEADER}\n{}\n", rows.join("\n"))).unwrap();
        (dir, path)
    }

    const VIEWS: [&str; 4] = [
        "p1,L-CC,a.png,b,view,,,,,,,",
        "p1,L-MLO,b.png,b,view,,,,,,,",
        "p1,R-CC,c.png,b,view,,,,,,,",
        "p1,R-MLO,d.png,b,view,,,,,,,",
    ];

    #[test]
    fn four_view_rows_form_one_normal_exam() {
        let (_d, path) = fixture(&VIEWS);
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.exams.len(), 1);
        assert!(ds.exams[0].lesions.is_empty());
        assert_eq!(ds.exams[0].density, Density::B);
        assert!(ds.report.rejections.is_empty());
    }

    #[test]
    fn lesion_rows_merge_into_exam() {
        let mut rows = VIEWS.to_vec();
        rows.push("p1,R-CC,,,lesion,mass,malignant,10,20,30,40,");
        rows.push("p1,R-CC,,,lesion,calcification,benign,1,2,3,4,");
        let (_d, path) = fixture(&rows);
        let ds = load_manifest(&path).unwrap();
        let lesions = &ds.exams[0].lesions;
        assert_eq!(lesions.len(), 2);
        assert!(lesions.iter().all(|l| l.view == ViewKey::R_CC));
        assert_eq!(lesions[0].bbox, BBox::new(10.0, 20.0, 30.0, 40.0).unwrap());
    }

    #[test]
    fn incomplete_case_is_rejected_and_reported() {
        let (_d, path) = fixture(&VIEWS[..3]);
        let ds = load_manifest(&path).unwrap();
        assert!(ds.exams.is_empty());
        assert_eq!(
            ds.report.rejections,
            vec![Rejection {
                case_id: "p1".into(),
                reason: "incomplete".into()
            }]
        );
    }

    #[test]
    fn duplicate_view_is_a_format_error() {
        let mut rows = VIEWS.to_vec();
        rows.push("p1,L-CC,a.png,b,view,,,,,,,");
        let (_d, path) = fixture(&rows);
        let err = load_manifest(&path).unwrap_err();
        assert!(
            matches!(err, Error::Format(ref m) if m.contains("duplicate view")),
            "{err}"
        );
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "case_id,view,image_path,row_kind\n").unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::MissingColumn(c) => assert_eq!(c, "density"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn preassigned_column_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"").unwrap();
        let path = dir.path().join("m.csv");
        let header = &HEADER[..HEADER.rfind(',').unwrap()];
        let body: String = ViewKey::ALL
            .iter()
            .map(|v| format!("p9,{v},a.png,d,view,,,,,,\n"))
            .collect();
        fs::write(&path, format!("{header}\n{body}")).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.exams[0].preassigned_split, None);
        assert_eq!(ds.exams[0].density, Density::D);
    }
}
