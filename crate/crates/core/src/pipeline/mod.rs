//! Stage-wise experiment orchestration over one output directory.

mod cache;
mod config;
mod container;
mod data;
mod evaluate;
mod extract;
mod meta;
mod persist;
mod tasks;

use std::fs;
use std::path::{Path, PathBuf};

pub use cache::{CaseRecord, FusionCache};
pub use config::{parse_pairs, DataSource, Overrides, PipelineConfig, StageConfig, DEFAULT_SEED, DESK_SCALE, STAGES};
pub use container::{Container, CONTAINER_VERSION};
pub use data::{read_split, Cohort};
pub use evaluate::{EvaluationSummary, FusionScore};
pub use persist::{load_meta, load_task, parse_head_param, save_meta, save_task};

use crate::dataset::{load_manifest, split_dataset};
use crate::error::{Error, Result};
use crate::synthgen::{generate_dataset, write_dataset};

/// Task stages accepted by `train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Density,
    Findings,
    Localizer,
    Fusion,
}

impl std::str::FromStr for TrainStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(TrainStage::Density),
            "findings" => Ok(TrainStage::Findings),
            "localizer" => Ok(TrainStage::Localizer),
            "fusion" => Ok(TrainStage::Fusion),
            other => Err(Error::Config(format!(
                "unknown stage '{other}' (expected density, findings, localizer or fusion)"
            ))),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A configured experiment rooted at `config.out_dir`.
pub struct Workspace {
    pub config: PipelineConfig,
    _lock: DirLock,
}

impl Workspace {
    /// Lock the output directory and write the configuration echo.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let lock = DirLock::acquire(&config.out_dir)?;
        let ws = Self { config, _lock: lock };
        let echo = ws.path("config_echo.txt");
        fs::write(&echo, ws.config.echo()).map_err(|e| Error::io(&echo, e))?;
        Ok(ws)
    }

    pub fn out(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.source {
            DataSource::Synthetic => self.data_dir().join("manifest.csv"),
            DataSource::Manifest(p) => p.clone(),
        }
    }

    pub fn split_path(&self) -> PathBuf {
        self.path("split.csv")
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("checkpoints/{stage}.ckpt"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.path(&format!("logs/{name}.csv"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.path("cache/fusion_cache.bin")
    }

    pub fn fusion_path(&self, name: &str) -> PathBuf {
        self.path(&format!("fusion/{name}.ckpt"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.path("report")
    }

    /// Write the synthetic dataset; refuses a non-empty data directory unless `force`.
    pub fn generate(&self, force: bool) -> Result<PathBuf> {
        if !matches!(self.config.source, DataSource::Synthetic) {
            return Err(Error::Config("generate needs data.source = synthetic".into()));
        }
        let dir = self.data_dir();
        let non_empty = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let exams = generate_dataset(&self.config.synth)?;
        let manifest = write_dataset(&self.config.synth, &exams, &dir)?;
        log::info!("wrote {} cases to {}", exams.len(), dir.display());
        Ok(manifest)
    }

    fn require_manifest(&self) -> Result<PathBuf> {
        let m = self.manifest_path();
        if !m.exists() {
            return Err(Error::MissingArtifact(format!(
                "dataset manifest {} (run generate first)",
                m.display()
            )));
        }
        Ok(m)
    }

    /// Case-level stratified split written to `split.csv`; returns (train, val, test) sizes.
    pub fn split(&self) -> Result<(usize, usize, usize)> {
        let loaded = load_manifest(&self.require_manifest()?)?;
        for r in &loaded.report.rejections {
            log::warn!("manifest: {r:?}");
        }
        let c = &self.config;
        let outcome = split_dataset(&loaded.exams, c.split_ratios, &c.strata, c.split_seed)?;
        for w in &outcome.report.warnings {
            log::warn!("split: {w}");
        }
        outcome.report.write_csv(&self.split_path())?;
        let sizes = outcome.split.sizes();
        log::info!("split sizes train/val/test = {sizes:?}");
        Ok(sizes)
    }

    pub fn cohort(&self) -> Result<Cohort> {
        let manifest = self.require_manifest()?;
        let split = self.split_path();
        if !split.exists() {
            return Err(Error::MissingArtifact(format!(
                "split file {} (run split first)",
                split.display()
            )));
        }
        Cohort::load(&manifest, &split)
    }

    pub fn train(&self, stage: TrainStage) -> Result<()> {
        match stage {
            TrainStage::Density => self.train_density(),
            TrainStage::Findings => self.train_findings(),
            TrainStage::Localizer => self.train_localizer(),
            TrainStage::Fusion => self.train_fusion(),
        }
    }

    /// Retraining a task model invalidates the cached fusion inputs.
    fn invalidate_cache(&self) -> Result<()> {
        let p = self.cache_path();
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Fusion cache, extracting it first if absent.
    pub fn load_or_extract(&self) -> Result<FusionCache> {
        if self.cache_path().exists() {
            FusionCache::read(&self.cache_path())
        } else {
            self.extract()
        }
    }

    /// Print the report files written by `evaluate`.
    pub fn report(&self) -> Result<String> {
        let p = self.report_dir().join("summary.txt");
        if !p.exists() {
            return Err(Error::MissingArtifact(format!(
                "report {} (run evaluate first)",
                p.display()
            )));
        }
        let mut text = String::new();
        for name in ["summary.txt", "density_report.txt", "findings_report.txt"]
            .into_iter()
            .map(String::from)
            .chain(
                crate::fusion::FusionTarget::ALL
                    .iter()
                    .map(|t| format!("fusion_{t}_report.txt")),
            )
        {
            let f = self.report_dir().join(&name);
            if let Ok(s) = fs::read_to_string(&f) {
                text += &format!("== {name}\n{s}");
            }
        }
        Ok(text)
    }
}
