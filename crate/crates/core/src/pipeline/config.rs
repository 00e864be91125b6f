use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{LesionClass, SplitRatios, StratumKey};
use crate::error::{Error, Result};
use crate::fusion::{ScoreHeadKind, MAX_DETECTIONS_PER_VIEW};
use crate::nn::OptimizerKind;
use crate::preprocess::{AugmentationPolicy, PreprocessProfile};
use crate::synthgen::SynthSpec;
use crate::taskmodels::{BackboneConfig, EarlyStopConfig, LocalizerConfig, StopMetric, TrainConfig};

/// Default downscaling of the full-resolution model inputs.
pub const DESK_SCALE: f64 = 0.125;
pub const DEFAULT_SEED: u64 = 7;

/// Where exams come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated by `generate` into `<out>/data`.
    Synthetic,
    Manifest(PathBuf),
}

/// Training schedule of one stage plus its augmentation preset name.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub train: TrainConfig,
    pub augmentation: String,
}

impl StageConfig {
    fn new(train: TrainConfig, augmentation: &str) -> Self {
        Self {
            train: TrainConfig {
                augmentation: AugmentationPolicy::preset(augmentation).expect("built-in preset"),
                ..train
            },
            augmentation: augmentation.to_string(),
        }
    }
}

/// Stage names in training order; each owns a `StageConfig`.
pub const STAGES: [&str; 7] = [
    "density_view",
    "density_patient",
    "patch",
    "findings",
    "findings_scratch",
    "localizer",
    "embedding",
];

/// Full experiment description, read from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scale: f64,
    pub out_dir: PathBuf,
    pub source: DataSource,
    pub synth: SynthSpec,
    pub split_ratios: SplitRatios,
    pub split_seed: u64,
    pub strata: Vec<StratumKey>,
    pub feature_width: usize,
    pub patches_per_lesion: usize,
    pub patches_per_normal: usize,
    pub stages: BTreeMap<String, StageConfig>,
    /// Detections per view stored in the fusion cache.
    pub cache_detections: usize,
    pub fusion_n: Vec<usize>,
    pub fusion_heads: Vec<ScoreHeadKind>,
    pub density_thresholds: Vec<f64>,
}

fn stage_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 7919)
}

fn early(metric: StopMetric, patience: usize) -> Option<EarlyStopConfig> {
    Some(EarlyStopConfig {
        metric,
        patience,
        tolerance: 1e-3,
    })
}

fn desk_stages(seed: u64) -> BTreeMap<String, StageConfig> {
    let adam = |lr, epochs, batch| TrainConfig::new(OptimizerKind::Adam, lr, epochs, batch);
    let findings = TrainConfig {
        early_stopping: early(StopMetric::ValAuc, 10),
        swa_start: Some(12),
        stratified: true,
        finetune_epochs: 3,
        finetune_learning_rate: 1e-4,
        ..adam(1e-3, 24, 6)
    };
    let mut s = BTreeMap::new();
    let mut put = |name: &str, t: TrainConfig, aug: &str| {
        let idx = STAGES.iter().position(|s| *s == name).expect("known stage");
        let t = TrainConfig {
            seed: stage_seed(seed, idx),
            ..t
        };
        s.insert(name.to_string(), StageConfig::new(t, aug));
    };
    put(
        "density_view",
        TrainConfig {
            plateau: Some((0.2, 5)),
            swa_start: Some(8),
            ..adam(1e-3, 14, 16)
        },
        "density_view",
    );
    put(
        "density_patient",
        TrainConfig {
            plateau: Some((0.2, 5)),
            swa_start: Some(4),
            ..adam(3e-4, 8, 8)
        },
        "density_patient",
    );
    put(
        "patch",
        TrainConfig {
            early_stopping: early(StopMetric::ValLoss, 10),
            finetune_epochs: 3,
            finetune_learning_rate: 1e-4,
            ..adam(1e-3, 20, 32)
        },
        "patches",
    );
    put("findings", findings.clone(), "findings");
    put("findings_scratch", findings, "findings");
    put(
        "localizer",
        TrainConfig {
            iterations: Some(3000),
            ..adam(1e-3, 1, 2)
        },
        "localizer",
    );
    put(
        "embedding",
        crate::fusion::EmbeddingNetConfig::train_config(150, 0),
        "none",
    );
    s
}

fn full_scale_stages(seed: u64) -> BTreeMap<String, StageConfig> {
    let adam = |lr, epochs, batch| TrainConfig::new(OptimizerKind::Adam, lr, epochs, batch);
    let findings = TrainConfig {
        early_stopping: early(StopMetric::ValAuc, 10),
        swa_start: Some(5),
        stratified: true,
        finetune_epochs: 10,
        finetune_learning_rate: 1e-5,
        ..adam(1e-4, 100, 6)
    };
    let mut s = BTreeMap::new();
    let mut put = |name: &str, t: TrainConfig, aug: &str| {
        let idx = STAGES.iter().position(|s| *s == name).expect("known stage");
        let t = TrainConfig {
            seed: stage_seed(seed, idx),
            ..t
        };
        s.insert(name.to_string(), StageConfig::new(t, aug));
    };
    put(
        "density_view",
        TrainConfig {
            plateau: Some((0.2, 5)),
            swa_start: Some(10),
            ..adam(1e-3, 25, 16)
        },
        "density_view",
    );
    put(
        "density_patient",
        TrainConfig {
            plateau: Some((0.2, 5)),
            swa_start: Some(5),
            ..adam(1e-4, 25, 8)
        },
        "density_patient",
    );
    put(
        "patch",
        TrainConfig {
            early_stopping: early(StopMetric::ValLoss, 10),
            finetune_epochs: 10,
            finetune_learning_rate: 1e-5,
            ..adam(1e-4, 100, 64)
        },
        "patches",
    );
    put("findings", findings.clone(), "findings");
    put("findings_scratch", findings, "findings");
    put(
        "localizer",
        TrainConfig {
            iterations: Some(100_000),
            ..TrainConfig::new(OptimizerKind::SgdMomentum, 1e-4, 1, 2)
        },
        "localizer",
    );
    put(
        "embedding",
        crate::fusion::EmbeddingNetConfig::train_config(200, 0),
        "none",
    );
    s
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub paper_scale: bool,
    pub out_dir: Option<PathBuf>,
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| bad(key, v)))
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(bad(key, v)),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value '{v}' for '{key}'"))
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Split flat text into ordered `(key, value)` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn apply_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<()> {
    if let Some(es_field) = field.strip_prefix("early_stop_") {
        let es = t.early_stopping.get_or_insert(EarlyStopConfig {
            metric: StopMetric::ValLoss,
            patience: 10,
            tolerance: 1e-3,
        });
        match es_field {
            "metric" => es.metric = parse(key, v)?,
            "patience" => es.patience = parse(key, v)?,
            "tolerance" => es.tolerance = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        return Ok(());
    }
    match field {
        "optimizer" => t.optimizer = v.parse().map_err(|_| bad(key, v))?,
        "learning_rate" => t.learning_rate = parse(key, v)?,
        "epochs" => t.epochs = parse(key, v)?,
        "iterations" => t.iterations = Some(parse(key, v)?),
        "batch_size" => t.batch_size = parse(key, v)?,
        "stratified" => t.stratified = parse(key, v)?,
        "seed" => t.seed = parse(key, v)?,
        "finetune_epochs" => t.finetune_epochs = parse(key, v)?,
        "finetune_learning_rate" => t.finetune_learning_rate = parse(key, v)?,
        "swa_start" => t.swa_start = Some(parse(key, v)?),
        "plateau_factor" => t.plateau = Some((parse(key, v)?, t.plateau.map_or(5, |p| p.1))),
        "plateau_patience" => t.plateau = Some((t.plateau.map_or(0.2, |p| p.0), parse(key, v)?)),
        _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

impl PipelineConfig {
    /// Desk-scale defaults.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            scale: DESK_SCALE,
            out_dir: PathBuf::from("run"),
            source: DataSource::Synthetic,
            synth: SynthSpec {
                seed,
                ..SynthSpec::default()
            },
            split_ratios: SplitRatios::new(0.7, 0.1, 0.2).expect("valid ratios"),
            split_seed: seed,
            strata: vec![
                StratumKey::Density,
                StratumKey::LesionCategory,
                StratumKey::PathologyCategory,
            ],
            feature_width: BackboneConfig::DESK_FEATURE_WIDTH,
            patches_per_lesion: 5,
            patches_per_normal: 5,
            stages: desk_stages(seed),
            cache_detections: MAX_DETECTIONS_PER_VIEW,
            fusion_n: vec![1, 2, 3, 4, 5],
            fusion_heads: ScoreHeadKind::ALL.to_vec(),
            density_thresholds: vec![0.5, 0.6, 0.7, 0.8],
        }
    }

    /// Full-resolution inputs, full feature width and the original schedules.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            scale: 1.0,
            feature_width: BackboneConfig::FULL_SCALE_FEATURE_WIDTH,
            stages: full_scale_stages(seed),
            ..Self::desk(seed)
        }
    }

    /// Defaults chosen by the overrides, then file pairs, then the remaining overrides.
    pub fn from_text(text: &str, overrides: &Overrides) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let file_seed = pairs
            .iter()
            .find(|(k, _)| k == "seed")
            .map(|(k, v)| parse::<u64>(k, v))
            .transpose()?;
        let seed = overrides.seed.or(file_seed).unwrap_or(DEFAULT_SEED);
        let full = overrides.paper_scale || pairs.iter().any(|(k, v)| k == "paper_scale" && v == "true");
        let mut cfg = if full { Self::full_scale(seed) } else { Self::desk(seed) };
        for (k, v) in &pairs {
            if k == "paper_scale" {
                continue;
            }
            cfg.apply(k, v)?;
        }
        if overrides.seed.is_some() {
            cfg.reseed(seed);
        }
        if let Some(s) = overrides.scale {
            cfg.scale = s;
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    /// Replace every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.split_seed = seed;
        for (name, st) in self.stages.iter_mut() {
            let idx = STAGES.iter().position(|s| s == name).expect("known stage");
            st.train.seed = stage_seed(seed, idx);
        }
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.source" => {
                self.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    _ => return Err(bad(key, v)),
                }
            }
            "data.manifest" => self.source = DataSource::Manifest(PathBuf::from(v)),
            "split.ratios" => {
                let r = parse_list::<f64>(key, v)?;
                if r.len() != 3 {
                    return Err(bad(key, v));
                }
                self.split_ratios = SplitRatios::new(r[0], r[1], r[2])?;
            }
            "split.seed" => self.split_seed = parse(key, v)?,
            "split.strata" => self.strata = parse_list(key, v)?,
            "model.feature_width" => self.feature_width = parse(key, v)?,
            "patch.per_lesion" => self.patches_per_lesion = parse(key, v)?,
            "patch.per_normal" => self.patches_per_normal = parse(key, v)?,
            "fusion.cache_detections" => self.cache_detections = parse(key, v)?,
            "fusion.n" => self.fusion_n = parse_list(key, v)?,
            "fusion.heads" => self.fusion_heads = parse_list(key, v)?,
            "report.density_thresholds" => self.density_thresholds = parse_list(key, v)?,
            _ if key.starts_with("synth.") => self.apply_synth(key, v)?,
            _ => {
                let (stage, field) = key
                    .rsplit_once('.')
                    .filter(|(s, _)| s.starts_with("train."))
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                let st = self
                    .stages
                    .get_mut(&stage["train.".len()..])
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                if field == "augmentation" {
                    st.train.augmentation = AugmentationPolicy::preset(v)?;
                    st.augmentation = v.to_string();
                } else {
                    apply_train(&mut st.train, field, key, v)?;
                }
            }
        }
        Ok(())
    }

    fn apply_synth(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        match &key["synth.".len()..] {
            "image_height" => s.image_height = parse(key, v)?,
            "image_width" => s.image_width = parse(key, v)?,
            "n_cases" => s.n_cases = parse(key, v)?,
            "density_class_probs" => {
                let p = parse_list::<f64>(key, v)?;
                s.density_class_probs = p.try_into().map_err(|_| bad(key, v))?;
            }
            "lesion_count_distribution" => s.lesion_count_distribution = parse_list(key, v)?,
            "malignant_fraction" => s.malignant_fraction = parse(key, v)?,
            "mass_fraction" => s.mass_fraction = parse(key, v)?,
            "mass_radius_range" => s.mass_radius_range = parse_pair(key, v)?,
            "calc_radius_range" => s.calc_radius_range = parse_pair(key, v)?,
            "texture_grain" => s.texture_grain = parse(key, v)?,
            "noise_sigma" => s.noise_sigma = parse(key, v)?,
            "occlusion_probability" => s.occlusion_probability = parse(key, v)?,
            "seed" => s.seed = parse(key, v)?,
            other => {
                let class = other
                    .strip_prefix("contrast.")
                    .and_then(|c| LesionClass::ALL.into_iter().find(|l| l.short_name() == c))
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                s.contrast_ranges[class.index()] = parse_pair(key, v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("scale {} outside (0, 1]", self.scale)));
        }
        if let DataSource::Synthetic = self.source {
            self.synth.validate()?;
        }
        if self.fusion_n.is_empty() || self.fusion_n.iter().any(|&n| !(1..=self.cache_detections).contains(&n)) {
            return Err(Error::Config(format!(
                "fusion.n must be non-empty and within 1..={}",
                self.cache_detections
            )));
        }
        if self.cache_detections == 0 || self.cache_detections > MAX_DETECTIONS_PER_VIEW {
            return Err(Error::Config(format!(
                "fusion.cache_detections must lie in 1..={MAX_DETECTIONS_PER_VIEW}"
            )));
        }
        if self.fusion_heads.is_empty() || self.density_thresholds.is_empty() {
            return Err(Error::Config(
                "fusion.heads and report.density_thresholds must be non-empty".into(),
            ));
        }
        if self.patches_per_lesion == 0 || self.patches_per_normal == 0 {
            return Err(Error::Config("patch counts must be positive".into()));
        }
        for st in self.stages.values() {
            st.train.validate()?;
        }
        self.density_backbone()?.validate()?;
        self.findings_backbone()?.validate()?;
        self.patch_backbone()?.validate()?;
        self.localizer_config()?.validate()
    }

    pub fn stage(&self, name: &str) -> &TrainConfig {
        &self.stages[name].train
    }

    pub fn density_backbone(&self) -> Result<BackboneConfig> {
        Ok(BackboneConfig::new(
            self.feature_width,
            PreprocessProfile::density(self.scale)?,
        ))
    }

    pub fn findings_backbone(&self) -> Result<BackboneConfig> {
        Ok(BackboneConfig::new(
            self.feature_width,
            PreprocessProfile::findings(self.scale)?,
        ))
    }

    pub fn patch_size(&self) -> Result<usize> {
        PreprocessProfile::patch_size(self.scale)
    }

    /// Backbone of the patch classifier: findings intensity mode, patch-sized input.
    pub fn patch_backbone(&self) -> Result<BackboneConfig> {
        let f = PreprocessProfile::findings(self.scale)?;
        let size = self.patch_size()?;
        Ok(BackboneConfig::new(
            self.feature_width,
            PreprocessProfile {
                target_height: size,
                target_width: size,
                ..f
            },
        ))
    }

    pub fn localizer_config(&self) -> Result<LocalizerConfig> {
        Ok(LocalizerConfig::new(BackboneConfig::new(
            self.feature_width,
            PreprocessProfile::localizer(self.scale)?,
        )))
    }

    /// Every setting as re-readable `key = value` text.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        match &self.source {
            DataSource::Synthetic => {
                let _ = writeln!(s, "data.source = synthetic");
                s += &self.synth.echo();
            }
            DataSource::Manifest(p) => {
                let _ = writeln!(s, "data.manifest = {}", p.display());
            }
        }
        let r = self.split_ratios;
        let _ = writeln!(s, "split.ratios = {},{},{}", r.train, r.validation, r.test);
        let _ = writeln!(s, "split.seed = {}", self.split_seed);
        let _ = writeln!(s, "split.strata = {}", list(&self.strata));
        let _ = writeln!(s, "model.feature_width = {}", self.feature_width);
        let _ = writeln!(s, "patch.per_lesion = {}", self.patches_per_lesion);
        let _ = writeln!(s, "patch.per_normal = {}", self.patches_per_normal);
        for (name, st) in &self.stages {
            s += &st.train.echo(&format!("train.{name}"));
            let _ = writeln!(s, "train.{name}.augmentation = {}", st.augmentation);
        }
        let _ = writeln!(s, "fusion.cache_detections = {}", self.cache_detections);
        let _ = writeln!(s, "fusion.n = {}", list(&self.fusion_n));
        let _ = writeln!(s, "fusion.heads = {}", list(&self.fusion_heads));
        let _ = writeln!(s, "report.density_thresholds = {}", list(&self.density_thresholds));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        for cfg in [PipelineConfig::desk(7), PipelineConfig::full_scale(3)] {
            let back = PipelineConfig::from_text(&cfg.echo(), &Overrides::default()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn keys_override_defaults() {
        let text =
            "seed = 11\nfusion.n = 1,3 # comment\ntrain.findings.epochs = 2\nsynth.contrast.mal_calc = 0.1,0.2\n";
        let cfg = PipelineConfig::from_text(text, &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.fusion_n, vec![1, 3]);
        assert_eq!(cfg.stage("findings").epochs, 2);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        for text in ["nonsense = 1", "fusion.n = 0", "train.findings.epochs = x", "just text"] {
            assert!(
                matches!(
                    PipelineConfig::from_text(text, &Overrides::default()),
                    Err(Error::Config(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn seed_override_reseeds_stages() {
        let a = PipelineConfig::from_text("", &Overrides::default()).unwrap();
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let b = PipelineConfig::from_text("", &o).unwrap();
        assert_ne!(a.stage("findings").seed, b.stage("findings").seed);
        assert_eq!(b.synth.seed, 9);
    }
}
