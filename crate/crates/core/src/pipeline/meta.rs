use std::fmt::Write as _;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::evalkit::{classification_metrics, mann_whitney_auc, ScoredSample};
use crate::fusion::{
    apply_normalizer, default_grid, fit_normalizer, log_loss, train_feature_fusion, train_score_fusion,
    EmbeddingNetConfig, FusionConfig, FusionTarget, Layout, MetaModel, ScoreHeadKind, DECISION_THRESHOLD,
};
use crate::taskmodels::{Labeled, TrainConfig, TrainLog};

use super::cache::{CaseRecord, FusionCache};
use super::persist::save_meta;
use super::Workspace;

/// A fusion model variant reported per target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Score { head: ScoreHeadKind, density: bool },
    Feature { density: bool },
}

impl Variant {
    /// Variants trained for the configured score heads.
    pub fn all(heads: &[ScoreHeadKind]) -> Vec<Variant> {
        let mut v = vec![
            Variant::Score {
                head: ScoreHeadKind::Mlp,
                density: true,
            },
            Variant::Score {
                head: ScoreHeadKind::Mlp,
                density: false,
            },
            Variant::Feature { density: true },
            Variant::Feature { density: false },
        ];
        for &h in heads {
            if h != ScoreHeadKind::Mlp {
                v.push(Variant::Score { head: h, density: true });
            }
        }
        v
    }

    /// Report name; `*` marks the variant without the density input.
    pub fn name(self) -> String {
        let star = |d: bool| if d { "" } else { "*" };
        match self {
            Variant::Score {
                head: ScoreHeadKind::Mlp,
                density,
            } => format!("P_score{}", star(density)),
            Variant::Score { head, density } => format!("P_score{}[{head}]", star(density)),
            Variant::Feature { density } => format!("P_feat{}", star(density)),
        }
    }

    pub fn file_stem(self, target: FusionTarget) -> String {
        let suffix = |d: bool| if d { "" } else { "_nodensity" };
        match self {
            Variant::Score { head, density } => format!("{target}_score_{head}{}", suffix(density)),
            Variant::Feature { density } => format!("{target}_feat{}", suffix(density)),
        }
    }

    fn density(self) -> bool {
        match self {
            Variant::Score { density, .. } | Variant::Feature { density } => density,
        }
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed ^ 0x9E37_79B9_7F4A_7C15, |h, &p| {
        (h ^ p).wrapping_mul(0x0100_0000_01B3).rotate_left(17)
    })
}

/// Validation AUC, recall at the decision threshold and log-loss.
fn val_scores(scores: &[f64], labels: &[usize]) -> Result<(f64, f64, f64)> {
    let samples: Vec<ScoredSample> = scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredSample::new(i.to_string(), s, l == 1))
        .collect();
    let auc = mann_whitney_auc(&samples)?;
    let recall = classification_metrics(&samples, DECISION_THRESHOLD)?.tpr.unwrap_or(0.0);
    Ok((auc, recall, log_loss(&samples)))
}

struct Candidate {
    n: usize,
    model: MetaModel,
    auc: f64,
    recall: f64,
    loss: f64,
    detail: String,
}

impl Workspace {
    fn fit_variant(
        &self,
        variant: Variant,
        config: FusionConfig,
        train: &[&CaseRecord],
        val: &[&CaseRecord],
        log: &mut TrainLog,
    ) -> Result<Candidate> {
        let target = config.target;
        let labels = |rs: &[&CaseRecord]| -> Vec<usize> { rs.iter().map(|r| r.record.label(target)).collect() };
        let (ytr, yva) = (labels(train), labels(val));
        let layout = Layout::new(config)?;
        let seed_parts = [config.n as u64, target as u64, u64::from(config.include_density)];
        match variant {
            Variant::Score { head, .. } => {
                let vectors = |rs: &[&CaseRecord]| -> Result<Vec<Vec<f64>>> {
                    rs.iter().map(|r| Ok(r.record.score_vector(config)?.values)).collect()
                };
                let (xtr, xva) = (vectors(train)?, vectors(val)?);
                let grid = default_grid(head, layout.len());
                let seed = mix(self.config.seed, &[&seed_parts[..], &[head as u64]].concat());
                let fitted = train_score_fusion(&xtr, &ytr, &xva, &yva, &grid, seed, log)?;
                let scores: Vec<f64> = xva.iter().map(|x| fitted.predict(x)).collect();
                let (auc, recall, loss) = val_scores(&scores, &yva)?;
                let detail = format!("param={} grid={}", fitted.param, fitted.evaluated);
                Ok(Candidate {
                    n: config.n,
                    model: MetaModel::Score { layout, head: fitted },
                    auc,
                    recall,
                    loss,
                    detail,
                })
            }
            Variant::Feature { .. } => {
                let fw = self.config.feature_width;
                let raw = |rs: &[&CaseRecord]| -> Result<Vec<_>> {
                    rs.iter().map(|r| r.record.feature_bundle(config, fw)).collect()
                };
                let (btr, bva) = (raw(train)?, raw(val)?);
                let normalizer = fit_normalizer(&btr)?;
                let wrap = |rs: &[&CaseRecord], bs: Vec<_>, ys: &[usize]| -> Result<Vec<Labeled<_>>> {
                    rs.iter()
                        .zip(bs)
                        .zip(ys)
                        .map(|((r, b), &y)| {
                            Ok(Labeled {
                                id: r.record.case_id.clone(),
                                input: apply_normalizer(&normalizer, &b)?,
                                label: y,
                            })
                        })
                        .collect()
                };
                let tr = wrap(train, btr, &ytr)?;
                let va = wrap(val, bva, &yva)?;
                let base = self.config.stage("embedding");
                let cfg = TrainConfig {
                    seed: mix(base.seed, &seed_parts),
                    ..base.clone()
                };
                let net_config = EmbeddingNetConfig::new(fw, config);
                let (net_channels, net_hidden) = (net_config.channels, net_config.hidden);
                let net = train_feature_fusion(&tr, &va, net_config, &cfg, log)?;
                let scores: Vec<f64> = va
                    .iter()
                    .map(|s| net.predict(&s.input).map(|p| p[1]))
                    .collect::<Result<_>>()?;
                let (auc, recall, loss) = val_scores(&scores, &yva)?;
                Ok(Candidate {
                    n: config.n,
                    model: MetaModel::Feature {
                        layout,
                        normalizer,
                        net,
                    },
                    auc,
                    recall,
                    loss,
                    detail: format!("net=embedding channels={} hidden={}", net_channels, net_hidden),
                })
            }
        }
    }

    /// Train every fusion variant for both targets, choosing n on validation
    /// AUC (then recall, then log-loss, then smaller n).
    pub(super) fn train_fusion(&self) -> Result<()> {
        let cache = self.load_or_extract()?;
        self.train_fusion_from(&cache)
    }

    pub fn train_fusion_from(&self, cache: &FusionCache) -> Result<()> {
        let train: Vec<&CaseRecord> = cache.in_split(Split::Train).collect();
        let val: Vec<&CaseRecord> = cache.in_split(Split::Validation).collect();
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(
                "fusion needs non-empty training and validation splits".into(),
            ));
        }
        let mut log = TrainLog::default();
        let mut selection = String::new();
        for target in FusionTarget::ALL {
            for variant in Variant::all(&self.config.fusion_heads) {
                let mut best: Option<Candidate> = None;
                for &n in &self.config.fusion_n {
                    let config = FusionConfig::new(n, target, variant.density())?;
                    let mut local = TrainLog::default();
                    let cand = self.fit_variant(variant, config, &train, &val, &mut local)?;
                    for row in &mut local.rows {
                        row.stage = format!("{}_n{n}/{}", variant.file_stem(target), row.stage);
                    }
                    log.extend(local);
                    log::info!(
                        "{target} {} n={n}: val auc {:.4} recall {:.4}",
                        variant.name(),
                        cand.auc,
                        cand.recall
                    );
                    let better = best.as_ref().is_none_or(|b| {
                        cand.auc > b.auc
                            || (cand.auc == b.auc
                                && (cand.recall > b.recall || (cand.recall == b.recall && cand.loss < b.loss)))
                    });
                    if better {
                        best = Some(cand);
                    }
                }
                let best = best.ok_or_else(|| Error::Config("fusion.n is empty".into()))?;
                let _ = writeln!(
                    selection,
                    "target={target} model={} n={} val_auc={} val_recall={} val_loss={} {}",
                    variant.name(),
                    best.n,
                    best.auc,
                    best.recall,
                    best.loss,
                    best.detail
                );
                save_meta(&self.fusion_path(&variant.file_stem(target)), &best.model)?;
            }
        }
        let p = self.path("fusion/selection.txt");
        std::fs::write(&p, selection).map_err(|e| Error::io(&p, e))?;
        log.write_csv(&self.log_path("fusion"))
    }
}
