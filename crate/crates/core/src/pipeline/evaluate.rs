use std::fmt::Write as _;

use crate::dataset::{LesionClass, Split, ViewKey};
use crate::error::{Error, Result};
use crate::evalkit::{
    build_report, classification_metrics, froc, write_curve_csv, write_text, Chart, FrocCurve, FrocImage,
    ModelPredictions, ScoredSample, DEFAULT_THRESHOLD,
};
use crate::fusion::{predict_patient, retained_detections, FusionTarget};

use super::cache::{CaseRecord, FusionCache};
use super::meta::Variant;
use super::persist::load_meta;
use super::Workspace;

/// FPI at which localizer sensitivity is summarized.
pub const SUMMARY_FPI: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionScore {
    pub target: FusionTarget,
    pub model: String,
    pub auc: Option<f64>,
}

/// Headline test-set numbers of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSummary {
    pub test_cases: usize,
    pub density_auc: Option<f64>,
    pub density_mean_view_auc: Option<f64>,
    pub findings_auc: Option<f64>,
    pub findings_scratch_auc: Option<f64>,
    /// Sensitivity at `SUMMARY_FPI` per FROC curve ("all" or a class short name).
    pub froc_tpr: Vec<(String, Option<f64>)>,
    pub fusion: Vec<FusionScore>,
}

impl EvaluationSummary {
    pub fn fusion_auc(&self, target: FusionTarget, model: &str) -> Option<f64> {
        self.fusion
            .iter()
            .find(|f| f.target == target && f.model == model)
            .and_then(|f| f.auc)
    }

    pub fn tpr_at_summary_fpi(&self, curve: &str) -> Option<f64> {
        self.froc_tpr.iter().find(|(n, _)| n == curve).and_then(|(_, t)| *t)
    }

    /// `key = value` lines at full precision.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "test_cases = {}", self.test_cases);
        let _ = writeln!(s, "density.auc.D = {}", f(self.density_auc));
        let _ = writeln!(s, "density.auc.mean_view = {}", f(self.density_mean_view_auc));
        let _ = writeln!(s, "findings.auc.pretrained = {}", f(self.findings_auc));
        let _ = writeln!(s, "findings.auc.scratch = {}", f(self.findings_scratch_auc));
        for (name, t) in &self.froc_tpr {
            let _ = writeln!(s, "localizer.tpr_at_fpi_{SUMMARY_FPI}.{name} = {}", f(*t));
        }
        for r in &self.fusion {
            let _ = writeln!(s, "fusion.{}.auc.{} = {}", r.target, r.model, f(r.auc));
        }
        s
    }
}

fn sample(id: String, score: f64, label: bool) -> ScoredSample {
    ScoredSample::new(id, score, label)
}

fn preds(model: &str, target: &str, samples: Vec<ScoredSample>) -> ModelPredictions {
    ModelPredictions {
        model: model.into(),
        target: target.into(),
        samples,
    }
}

/// Highest localizer confidence among the detections a target keeps.
fn max_localizer(case: &CaseRecord, target: FusionTarget) -> f64 {
    let r = &case.record;
    r.detections
        .iter()
        .flat_map(|d| {
            retained_detections(d, target, usize::MAX)
                .into_iter()
                .map(|i| d[i].confidence)
        })
        .fold(0.0, f64::max)
}

impl Workspace {
    /// Evaluate every model on the test split and write the report directory.
    pub fn evaluate(&self) -> Result<EvaluationSummary> {
        let cache = self.load_or_extract()?;
        self.evaluate_cache(&cache)
    }

    pub fn evaluate_cache(&self, cache: &FusionCache) -> Result<EvaluationSummary> {
        let test: Vec<&CaseRecord> = cache.in_split(Split::Test).collect();
        if test.is_empty() {
            return Err(Error::Data("empty test split".into()));
        }
        let dir = self.report_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let (density_auc, density_mean_view_auc) = self.evaluate_density(&test)?;
        let (findings_auc, findings_scratch_auc) = self.evaluate_findings(&test)?;
        let froc_tpr = self.evaluate_localizer(&test)?;
        let mut fusion = Vec::new();
        for target in FusionTarget::ALL {
            fusion.extend(self.evaluate_fusion(&test, target)?);
        }
        let summary = EvaluationSummary {
            test_cases: test.len(),
            density_auc,
            density_mean_view_auc,
            findings_auc,
            findings_scratch_auc,
            froc_tpr,
            fusion,
        };
        write_text(&dir.join("summary.txt"), &summary.to_text())?;
        Ok(summary)
    }

    /// Patient density model D against the mean of its single-view scores.
    fn evaluate_density(&self, test: &[&CaseRecord]) -> Result<(Option<f64>, Option<f64>)> {
        let label = |c: &CaseRecord| c.record.is_dense;
        let d: Vec<ScoredSample> = test
            .iter()
            .map(|c| sample(c.record.case_id.clone(), c.record.p_density, label(c)))
            .collect();
        let mean: Vec<ScoredSample> = test
            .iter()
            .map(|c| {
                let m = c.record.p_density_views.iter().sum::<f64>() / 4.0;
                sample(c.record.case_id.clone(), m, label(c))
            })
            .collect();
        let mut table = String::from("model,threshold,accuracy,tpr,tnr,f1\n");
        for (name, s) in [("D", &d), ("mean(D^v)", &mean)] {
            for &t in &self.config.density_thresholds {
                let m = classification_metrics(s, t)?;
                let o = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
                let _ = writeln!(table, "{name},{t},{},{},{},{}", m.accuracy, o(m.tpr), o(m.tnr), m.f1);
            }
        }
        write_text(&self.report_dir().join("density_thresholds.csv"), &table)?;
        let report = build_report(
            &[preds("D", "dense", d), preds("mean(D^v)", "dense", mean)],
            DEFAULT_THRESHOLD,
        )?;
        report.write(&self.report_dir(), "density_")?;
        Ok((report.metrics[0].auc, report.metrics[1].auc))
    }

    /// View-level lesion detection with and without patch pre-training.
    fn evaluate_findings(&self, test: &[&CaseRecord]) -> Result<(Option<f64>, Option<f64>)> {
        let views = |scores: fn(&CaseRecord) -> [f64; 4]| -> Vec<ScoredSample> {
            test.iter()
                .flat_map(|c| {
                    let s = scores(c);
                    ViewKey::ALL
                        .into_iter()
                        .enumerate()
                        .map(move |(k, v)| sample(format!("{}:{v}", c.record.case_id), s[k], c.view_has_lesion(k)))
                })
                .collect()
        };
        let report = build_report(
            &[
                preds("findings", "view_lesion", views(|c| c.record.p_findings)),
                preds("findings_scratch", "view_lesion", views(|c| c.p_findings_scratch)),
            ],
            DEFAULT_THRESHOLD,
        )?;
        report.write(&self.report_dir(), "findings_")?;
        Ok((report.metrics[0].auc, report.metrics[1].auc))
    }

    /// FROC over all test views, overall and per lesion class.
    fn evaluate_localizer(&self, test: &[&CaseRecord]) -> Result<Vec<(String, Option<f64>)>> {
        let images: Vec<FrocImage> = test
            .iter()
            .flat_map(|c| {
                (0..4).map(|k| FrocImage {
                    detections: c.froc[k].clone(),
                    ground_truths: c.ground_truth[k].clone(),
                })
            })
            .collect();
        let mut curves: Vec<(String, FrocCurve)> = Vec::new();
        let mut out = Vec::new();
        let filters = std::iter::once(None).chain(LesionClass::ALL.into_iter().map(Some));
        for filter in filters {
            let name = filter.map_or("all", LesionClass::short_name).to_string();
            match froc(&images, filter) {
                Ok(curve) => {
                    write_curve_csv(&self.report_dir().join(format!("froc_{name}.csv")), &curve.points)?;
                    out.push((name.clone(), Some(curve.tpr_at_fpi(SUMMARY_FPI))));
                    curves.push((name, curve));
                }
                Err(Error::Undefined(m)) => {
                    log::warn!("FROC {name}: {m}");
                    out.push((name, None));
                }
                Err(e) => return Err(e),
            }
        }
        let chart = Chart {
            title: "FROC (test views)",
            x_label: "false positives per image",
            y_label: "sensitivity",
            x_max: 4.0,
            y_max: 1.0,
            series: curves.iter().map(|(n, c)| (n.clone(), &c.points[..])).collect(),
        };
        write_text(&self.report_dir().join("froc.svg"), &chart.to_svg())?;
        let mut text = String::new();
        for (name, t) in &out {
            let _ = writeln!(
                text,
                "curve={name} tpr_at_fpi_{SUMMARY_FPI}={}",
                t.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
            );
        }
        write_text(&self.report_dir().join("localizer_report.txt"), &text)?;
        Ok(out)
    }

    fn evaluate_fusion(&self, test: &[&CaseRecord], target: FusionTarget) -> Result<Vec<FusionScore>> {
        let t = target.to_string();
        let label = |c: &CaseRecord| c.record.label(target) == 1;
        let mut sets = Vec::new();
        for variant in Variant::all(&self.config.fusion_heads) {
            let stem = variant.file_stem(target);
            let model = load_meta(&self.fusion_path(&stem), &format!("fusion {stem}"))?;
            let samples = test
                .iter()
                .map(|c| {
                    Ok(sample(
                        c.record.case_id.clone(),
                        predict_patient(&model, &c.record)?,
                        label(c),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push(preds(&variant.name(), &t, samples));
        }
        let max_f = test
            .iter()
            .map(|c| {
                sample(
                    c.record.case_id.clone(),
                    c.record.p_findings.iter().copied().fold(0.0, f64::max),
                    label(c),
                )
            })
            .collect();
        let max_l = test
            .iter()
            .map(|c| sample(c.record.case_id.clone(), max_localizer(c, target), label(c)))
            .collect();
        sets.push(preds("max(p_F)", &t, max_f));
        sets.push(preds("max(p_L)", &t, max_l));
        let report = build_report(&sets, DEFAULT_THRESHOLD)?;
        report.write(&self.report_dir(), &format!("fusion_{t}_"))?;
        let mut table = String::from("case_id,label");
        for p in &sets {
            table += &format!(",{}", p.model);
        }
        table.push('\n');
        for (i, c) in test.iter().enumerate() {
            table += &format!("{},{}", c.record.case_id, u8::from(label(c)));
            for p in &sets {
                table += &format!(",{}", p.samples[i].score);
            }
            table.push('\n');
        }
        write_text(&self.report_dir().join(format!("fusion_{t}_predictions.csv")), &table)?;
        Ok(report
            .metrics
            .iter()
            .map(|m| FusionScore {
                target,
                model: m.model.clone(),
                auc: m.auc,
            })
            .collect())
    }
}
