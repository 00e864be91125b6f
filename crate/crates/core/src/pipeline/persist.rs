use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{
    EmbeddingNet, EmbeddingNetConfig, HeadParam, Layout, MetaModel, Mlp, Normalizer, RandomForest, ScoreFusionHead,
    ScoreModel, Svm, Tree, TreeNode,
};

use super::container::Container;

const TASK_KIND: &str = "task_checkpoint";
const META_KIND: &str = "fusion_checkpoint";

/// Write task-model weights with the settings they were trained under.
pub fn save_task(path: &Path, stage: &str, settings: &str, params: &[f64]) -> Result<()> {
    let mut c = Container::new(TASK_KIND);
    c.put_text("stage", stage);
    c.put_text("settings", settings);
    c.put_array("params", params.to_vec());
    c.write(path)
}

/// Task-model weights, checked against the current settings and size.
pub fn load_task(path: &Path, stage: &str, settings: &str, expected_len: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint: {stage}")));
    }
    let c = Container::read(path, TASK_KIND)?;
    if c.text("stage")? != stage {
        return Err(Error::Integrity(format!(
            "{} holds stage '{}', not '{stage}'",
            path.display(),
            c.text("stage")?
        )));
    }
    if c.text("settings")? != settings {
        return Err(Error::Integrity(format!(
            "{} was trained under different settings; retrain the stage",
            path.display()
        )));
    }
    let params = c.array("params")?;
    if params.len() != expected_len {
        return Err(Error::Integrity(format!(
            "{}: expected {expected_len} weights, found {}",
            path.display(),
            params.len()
        )));
    }
    Ok(params.to_vec())
}

pub fn parse_head_param(s: &str) -> Result<HeadParam> {
    let bad = || Error::Integrity(format!("malformed head parameter '{s}'"));
    if let Some(rest) = s.strip_prefix("layers=[").and_then(|r| r.strip_suffix(']')) {
        let mut widths = rest
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if widths.pop() != Some(2) {
            return Err(bad());
        }
        return Ok(HeadParam::MlpHidden(widths));
    }
    if let Some(c) = s.strip_prefix("C=") {
        return c.parse().map(HeadParam::SvmC).map_err(|_| bad());
    }
    if let Some(t) = s.strip_prefix("trees=") {
        return t.parse().map(HeadParam::Trees).map_err(|_| bad());
    }
    Err(bad())
}

fn encode_svm(c: &mut Container, s: &Svm) {
    c.put_array("svm.scalars", vec![s.c, s.gamma, s.rho, s.platt_a, s.platt_b]);
    c.put_array("svm.coef", s.coef.clone());
    c.put_array("svm.support", s.support.iter().flatten().copied().collect());
}

fn decode_svm(c: &Container) -> Result<Svm> {
    let sc = c.array("svm.scalars")?;
    let coef = c.array("svm.coef")?.to_vec();
    let flat = c.array("svm.support")?;
    if sc.len() != 5 || coef.is_empty() || flat.len() % coef.len() != 0 {
        return Err(Error::Integrity("malformed SVM record".into()));
    }
    let dim = flat.len() / coef.len();
    Ok(Svm {
        c: sc[0],
        gamma: sc[1],
        rho: sc[2],
        platt_a: sc[3],
        platt_b: sc[4],
        support: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
        coef,
    })
}

/// Trees as `[n_nodes, (tag, a, b, c, d)*]` runs; tag 0 = leaf, 1 = split.
fn encode_forest(c: &mut Container, f: &RandomForest) {
    let mut out = Vec::new();
    for t in &f.trees {
        out.push(t.nodes.len() as f64);
        for n in &t.nodes {
            match *n {
                TreeNode::Leaf(p) => out.extend([0.0, p, 0.0, 0.0, 0.0]),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => out.extend([1.0, feature as f64, threshold, left as f64, right as f64]),
            }
        }
    }
    c.put_array("forest", out);
}

fn decode_forest(c: &Container) -> Result<RandomForest> {
    let raw = c.array("forest")?;
    let bad = || Error::Integrity("malformed random forest record".into());
    let mut trees = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let n = raw[i] as usize;
        i += 1;
        let body = raw.get(i..i + n * 5).ok_or_else(bad)?;
        i += n * 5;
        let nodes = body
            .chunks(5)
            .map(|r| match r[0] as u8 {
                0 => Ok(TreeNode::Leaf(r[1])),
                1 => {
                    let (left, right) = (r[3] as usize, r[4] as usize);
                    if left >= n || right >= n {
                        return Err(bad());
                    }
                    Ok(TreeNode::Split {
                        feature: r[1] as usize,
                        threshold: r[2],
                        left,
                        right,
                    })
                }
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        if nodes.is_empty() {
            return Err(bad());
        }
        trees.push(Tree { nodes });
    }
    if trees.is_empty() {
        return Err(bad());
    }
    Ok(RandomForest { trees })
}

/// Write a fusion meta-model with its layout descriptor.
pub fn save_meta(path: &Path, model: &MetaModel) -> Result<()> {
    let mut c = Container::new(META_KIND);
    c.put_text("layout", model.layout().descriptor());
    match model {
        MetaModel::Score { head, .. } => {
            c.put_text("strategy", "score");
            c.put_text("head", head.model.kind().to_string());
            c.put_text("param", head.param.to_string());
            c.put_text("val_auc", head.val_auc.to_string());
            c.put_text("evaluated", head.evaluated.to_string());
            match &head.model {
                ScoreModel::Mlp(m) => c.put_array("mlp", m.params.clone()),
                ScoreModel::Svm(s) => encode_svm(&mut c, s),
                ScoreModel::Forest(f) => encode_forest(&mut c, f),
            }
        }
        MetaModel::Feature { normalizer, net, .. } => {
            c.put_text("strategy", "feature");
            c.put_text("net", net.config.echo("net"));
            c.put_text("feature_width", net.config.feature_width.to_string());
            c.put_array("norm.min", normalizer.min.clone());
            c.put_array("norm.max", normalizer.max.clone());
            c.put_array("params", net.params.clone());
        }
    }
    c.write(path)
}

/// Read a fusion meta-model; `what` names it in the missing-artifact error.
pub fn load_meta(path: &Path, what: &str) -> Result<MetaModel> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint: {what}")));
    }
    let c = Container::read(path, META_KIND)?;
    let layout = Layout::parse(c.text("layout")?)?;
    let config = layout.config;
    match c.text("strategy")? {
        "score" => {
            let param = parse_head_param(c.text("param")?)?;
            let model = match &param {
                HeadParam::MlpHidden(h) => {
                    ScoreModel::Mlp(Mlp::from_params(layout.len(), h.clone(), c.array("mlp")?.to_vec())?)
                }
                HeadParam::SvmC(_) => ScoreModel::Svm(decode_svm(&c)?),
                HeadParam::Trees(_) => ScoreModel::Forest(decode_forest(&c)?),
            };
            Ok(MetaModel::Score {
                layout,
                head: ScoreFusionHead {
                    param,
                    model,
                    val_auc: c.parsed("val_auc")?,
                    evaluated: c.parsed("evaluated")?,
                },
            })
        }
        "feature" => {
            let net_config = EmbeddingNetConfig::new(c.parsed("feature_width")?, config);
            if c.text("net")? != net_config.echo("net") {
                return Err(Error::Integrity(format!(
                    "{}: embedding settings differ",
                    path.display()
                )));
            }
            let normalizer = Normalizer {
                min: c.array("norm.min")?.to_vec(),
                max: c.array("norm.max")?.to_vec(),
            };
            Ok(MetaModel::Feature {
                layout,
                normalizer,
                net: EmbeddingNet::from_params(net_config, c.array("params")?.to_vec())?,
            })
        }
        other => Err(Error::Integrity(format!("unknown fusion strategy '{other}'"))),
    }
}
