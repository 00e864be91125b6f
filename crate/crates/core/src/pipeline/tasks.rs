use crate::dataset::Split;
use crate::error::Result;
use crate::taskmodels::{
    train_density_patient, train_density_view, train_findings, train_localizer, train_patch_classifier, BackboneConfig,
    DensityPatientModel, DensityViewModel, FindingsModel, Localizer, LocalizerConfig, TrainLog,
};

use super::data::{density_patient_samples, is_dense, localizer_samples, patch_samples, view_has_lesion, view_samples};
use super::persist::{load_task, save_task};
use super::Workspace;

/// Trained models needed to fill the fusion cache.
pub struct TaskModels {
    pub density_view: DensityViewModel,
    pub density_patient: DensityPatientModel,
    pub findings: FindingsModel,
    pub findings_scratch: FindingsModel,
    pub localizer: Localizer,
}

impl Workspace {
    /// Settings a checkpoint of `stage` depends on.
    fn settings(&self, stage: &str, model: &str) -> String {
        format!(
            "{model}{}split.seed = {}\npatch.per_lesion = {}\npatch.per_normal = {}\n",
            self.config.stage(stage).echo(&format!("train.{stage}")),
            self.config.split_seed,
            self.config.patches_per_lesion,
            self.config.patches_per_normal
        )
    }

    fn backbone_settings(&self, stage: &str, b: &BackboneConfig) -> String {
        self.settings(stage, &b.echo("backbone"))
    }

    fn localizer_settings(&self, c: &LocalizerConfig) -> String {
        self.settings("localizer", &c.echo("localizer"))
    }

    pub(super) fn train_density(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let (train, val) = (cohort.exams_in(Split::Train)?, cohort.exams_in(Split::Validation)?);
        let bb = self.config.density_backbone()?;
        let profile = bb.input_profile;
        let mut log = TrainLog::default();
        let label = |e: &crate::dataset::Exam, _| usize::from(is_dense(e));
        let view = train_density_view(
            bb.clone(),
            &view_samples(&train, &profile, label)?,
            &view_samples(&val, &profile, label)?,
            self.config.stage("density_view"),
            &mut log,
        )?;
        save_task(
            &self.checkpoint_path("density_view"),
            "density_view",
            &self.backbone_settings("density_view", &bb),
            &view.net.params,
        )?;
        let patient = train_density_patient(
            &view,
            &density_patient_samples(&train, &profile)?,
            &density_patient_samples(&val, &profile)?,
            self.config.stage("density_patient"),
            &mut log,
        )?;
        save_task(
            &self.checkpoint_path("density_patient"),
            "density_patient",
            &self.backbone_settings("density_patient", &bb),
            &patient.params,
        )?;
        log.write_csv(&self.log_path("density"))?;
        self.invalidate_cache()
    }

    pub(super) fn train_findings(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let (train, val) = (cohort.exams_in(Split::Train)?, cohort.exams_in(Split::Validation)?);
        let c = &self.config;
        let mut log = TrainLog::default();
        let pb = c.patch_backbone()?;
        let fb = c.findings_backbone()?;
        let size = c.patch_size()?;
        let seed = c.stage("patch").seed;
        let patch = {
            let tr = patch_samples(
                &train,
                &fb.input_profile,
                size,
                c.patches_per_lesion,
                c.patches_per_normal,
                seed,
            )?;
            let va = patch_samples(
                &val,
                &fb.input_profile,
                size,
                c.patches_per_lesion,
                c.patches_per_normal,
                seed ^ 1,
            )?;
            log::info!("patch classifier: {} train / {} val patches", tr.len(), va.len());
            train_patch_classifier(pb.clone(), &tr, &va, c.stage("patch"), &mut log)?
        };
        save_task(
            &self.checkpoint_path("patch"),
            "patch",
            &self.backbone_settings("patch", &pb),
            &patch.net.params,
        )?;
        let profile = fb.input_profile;
        let tr = view_samples(&train, &profile, |e, v| usize::from(view_has_lesion(e, v)))?;
        let va = view_samples(&val, &profile, |e, v| usize::from(view_has_lesion(e, v)))?;
        let pretrained = train_findings(Some(&patch), fb.clone(), &tr, &va, c.stage("findings"), &mut log)?;
        save_task(
            &self.checkpoint_path("findings"),
            "findings",
            &self.backbone_settings("findings", &fb),
            &pretrained.net.params,
        )?;
        let scratch = train_findings(None, fb.clone(), &tr, &va, c.stage("findings_scratch"), &mut log)?;
        save_task(
            &self.checkpoint_path("findings_scratch"),
            "findings_scratch",
            &self.backbone_settings("findings_scratch", &fb),
            &scratch.net.params,
        )?;
        log.write_csv(&self.log_path("findings"))?;
        self.invalidate_cache()
    }

    pub(super) fn train_localizer(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let lc = self.config.localizer_config()?;
        let profile = lc.backbone.input_profile;
        let train = localizer_samples(&cohort.exams_in(Split::Train)?, &profile)?;
        let val = localizer_samples(&cohort.exams_in(Split::Validation)?, &profile)?;
        let mut log = TrainLog::default();
        let model = train_localizer(lc.clone(), &train, &val, self.config.stage("localizer"), &mut log)?;
        save_task(
            &self.checkpoint_path("localizer"),
            "localizer",
            &self.localizer_settings(&lc),
            &model.params,
        )?;
        log.write_csv(&self.log_path("localizer"))?;
        self.invalidate_cache()
    }

    /// Load every task checkpoint, the localizer first.
    pub(super) fn load_task_models(&self) -> Result<TaskModels> {
        let c = &self.config;
        let lc = c.localizer_config()?;
        let shell = Localizer::new(lc.clone(), 0)?;
        let params = load_task(
            &self.checkpoint_path("localizer"),
            "localizer",
            &self.localizer_settings(&lc),
            shell.params.len(),
        )?;
        let localizer = Localizer::from_params(lc, params)?;

        let db = c.density_backbone()?;
        let mut density_view = DensityViewModel::new(db.clone(), 0)?;
        density_view.net.params = load_task(
            &self.checkpoint_path("density_view"),
            "density_view",
            &self.backbone_settings("density_view", &db),
            density_view.net.params.len(),
        )?;
        let shell = DensityPatientModel::random(db.clone(), 0)?;
        let params = load_task(
            &self.checkpoint_path("density_patient"),
            "density_patient",
            &self.backbone_settings("density_patient", &db),
            shell.params.len(),
        )?;
        let density_patient = DensityPatientModel::from_params(db, params)?;

        let fb = c.findings_backbone()?;
        let load_findings = |stage: &str, pretrained: bool| -> Result<FindingsModel> {
            let mut m = FindingsModel::new(fb.clone(), 0)?;
            m.net.params = load_task(
                &self.checkpoint_path(stage),
                stage,
                &self.backbone_settings(stage, &fb),
                m.net.params.len(),
            )?;
            m.pretrained = pretrained;
            Ok(m)
        };
        let findings = load_findings("findings", true)?;
        let findings_scratch = load_findings("findings_scratch", false)?;
        Ok(TaskModels {
            density_view,
            density_patient,
            findings,
            findings_scratch,
            localizer,
        })
    }
}
