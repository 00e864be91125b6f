use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::{classification_metrics, mann_whitney_auc, ScoredSample};
use crate::nn::{softmax, softmax_cross_entropy, Dense, Layer, Mode, OptimizerKind, Sequential, Tensor};
use crate::preprocess::AugmentationPolicy;
use crate::taskmodels::{fit, EarlyStopConfig, Labeled, StopMetric, TrainConfig, TrainLog, Trainable};

use super::embedding::check_fusion_labels;

pub const SVM_C_GRID: [f64; 9] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 500.0, 1000.0];
pub const FOREST_TREE_GRID: [usize; 6] = [3, 5, 7, 10, 15, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreHeadKind {
    Mlp,
    SvmRbf,
    RandomForest,
}

impl ScoreHeadKind {
    pub const ALL: [ScoreHeadKind; 3] = [ScoreHeadKind::Mlp, ScoreHeadKind::SvmRbf, ScoreHeadKind::RandomForest];
}

impl fmt::Display for ScoreHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreHeadKind::Mlp => "mlp",
            ScoreHeadKind::SvmRbf => "svm_rbf",
            ScoreHeadKind::RandomForest => "random_forest",
        })
    }
}

impl FromStr for ScoreHeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown score head '{s}'")))
    }
}

/// One grid point of a score head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParam {
    /// Hidden layer widths; the 2-unit output layer is implied.
    MlpHidden(Vec<usize>),
    SvmC(f64),
    Trees(usize),
}

impl fmt::Display for HeadParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadParam::MlpHidden(h) => {
                let parts: Vec<String> = h.iter().chain(&[2]).map(usize::to_string).collect();
                write!(f, "layers=[{}]", parts.join(","))
            }
            HeadParam::SvmC(c) => write!(f, "C={c}"),
            HeadParam::Trees(t) => write!(f, "trees={t}"),
        }
    }
}

/// Default search grid for a head on vectors of length `dim`.
pub fn default_grid(kind: ScoreHeadKind, dim: usize) -> Vec<HeadParam> {
    match kind {
        ScoreHeadKind::Mlp => vec![
            HeadParam::MlpHidden(vec![dim]),
            HeadParam::MlpHidden(vec![dim, dim]),
            HeadParam::MlpHidden(vec![dim, (dim / 2).max(1)]),
        ],
        ScoreHeadKind::SvmRbf => SVM_C_GRID.iter().map(|&c| HeadParam::SvmC(c)).collect(),
        ScoreHeadKind::RandomForest => FOREST_TREE_GRID.iter().map(|&t| HeadParam::Trees(t)).collect(),
    }
}

/// Fully connected ReLU network with a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    net: Sequential,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: Vec<usize>, seed: u64) -> Result<Self> {
        if inputs == 0 || hidden.contains(&0) {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in &hidden {
            layers.push(Layer::Dense(Dense {
                inputs: prev,
                outputs: h,
            }));
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense(Dense {
            inputs: prev,
            outputs: 2,
        }));
        let net = Sequential::new(layers);
        let mut params = vec![0.0; net.param_count()];
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            inputs,
            hidden,
            net,
            params,
        })
    }

    pub fn from_params(inputs: usize, hidden: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(inputs, hidden, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Integrity(format!(
                "MLP expects {} weights, found {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    /// Adam, batch 8, class-balanced batches, early stopping on validation loss.
    pub fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            early_stopping: Some(EarlyStopConfig {
                metric: StopMetric::ValLoss,
                patience: 20,
                tolerance: 1e-4,
            }),
            stratified: true,
            seed,
            ..TrainConfig::new(OptimizerKind::Adam, 1e-3, 300, 8)
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.probabilities(&self.params, &x.to_vec())[1]
    }
}

impl Trainable for Mlp {
    type Input = Vec<f64>;

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn train_sample(
        &self,
        params: &[f64],
        x: &Vec<f64>,
        label: usize,
        _: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64 {
        let (logits, tape) = self
            .net
            .forward(params, Tensor::vector(x.clone()), &mut Mode::Train(rng));
        let (loss, g) = softmax_cross_entropy(&logits.data, label, 1.0);
        self.net.backward(params, tape, Tensor::vector(g), grads);
        loss
    }

    fn probabilities(&self, params: &[f64], x: &Vec<f64>) -> [f64; 2] {
        let p = softmax(&self.net.infer(params, Tensor::vector(x.clone())).data);
        [p[0], p[1]]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RBF-kernel support vector machine with Platt-scaled probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Svm {
    pub c: f64,
    pub gamma: f64,
    pub support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
    pub platt_a: f64,
    pub platt_b: f64,
}

const SMO_TOLERANCE: f64 = 1e-3;
const SMO_MAX_ITER: usize = 200_000;

impl Svm {
    /// `1 / (dim * var(X))` over all entries, 1 when the data are constant.
    pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
        let vals: Vec<f64> = x.iter().flatten().copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let dim = x[0].len() as f64;
        if var > 0.0 {
            1.0 / (dim * var)
        } else {
            1.0
        }
    }

    pub fn train(x: &[Vec<f64>], labels: &[usize], c: f64) -> Result<Self> {
        check_fusion_labels(labels)?;
        if !(c > 0.0) {
            return Err(Error::Config(format!("SVM C must be positive, got {c}")));
        }
        let gamma = Self::scale_gamma(x);
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let (alpha, rho) = smo(x, &y, c, gamma);
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for i in 0..x.len() {
            if alpha[i] > 0.0 {
                support.push(x[i].clone());
                coef.push(alpha[i] * y[i]);
            }
        }
        let mut svm = Self {
            c,
            gamma,
            support,
            coef,
            rho,
            platt_a: 0.0,
            platt_b: 0.0,
        };
        let dec: Vec<f64> = x.iter().map(|xi| svm.decision(xi)).collect();
        (svm.platt_a, svm.platt_b) = platt(&dec, labels);
        Ok(svm)
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, a)| a * (-self.gamma * sq_dist(s, x)).exp())
            .sum::<f64>()
            - self.rho
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid_platt(self.decision(x), self.platt_a, self.platt_b)
    }
}

fn sigmoid_platt(f: f64, a: f64, b: f64) -> f64 {
    let t = f * a + b;
    if t >= 0.0 {
        (-t).exp() / (1.0 + (-t).exp())
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Dual coordinate solver with maximal-violating-pair selection.
fn smo(x: &[Vec<f64>], y: &[f64], c: f64, gamma: f64) -> (Vec<f64>, f64) {
    let n = x.len();
    let k: Vec<f64> = (0..n * n)
        .map(|idx| (-gamma * sq_dist(&x[idx / n], &x[idx % n])).exp())
        .collect();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    for _ in 0..SMO_MAX_ITER {
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = None;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = Some(t);
            }
            if low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i, j) else { break };
        if gmax - gmin < SMO_TOLERANCE {
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(1e-12);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(1e-12);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut free = 0;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            free += 1;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    (alpha, rho)
}

/// Sigmoid fit `P(y=1|f) = 1 / (1 + exp(A f + B))` by regularized Newton
/// iterations with backtracking.
fn platt(dec: &[f64], labels: &[usize]) -> (f64, f64) {
    let prior1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let fa = f * a + b;
                if fa >= 0.0 {
                    ti * fa + (1.0 + (-fa).exp()).ln()
                } else {
                    (ti - 1.0) * fa + (1.0 + fa.exp()).ln()
                }
            })
            .sum()
    };
    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&f, &ti) in dec.iter().zip(&t) {
            let fa = f * a + b;
            let (p, q) = if fa >= 0.0 {
                ((-fa).exp() / (1.0 + (-fa).exp()), 1.0 / (1.0 + (-fa).exp()))
            } else {
                (1.0 / (1.0 + fa.exp()), fa.exp() / (1.0 + fa.exp()))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut improved = false;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                improved = true;
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

/// Flat CART node; leaves carry the positive-class fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(p) => return p,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    max_features: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    /// Best (feature, threshold) among a random feature subset, if any split
    /// lowers impurity.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let n = idx.len() as f64;
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count() as f64;
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let dim = self.x[0].len();
        for f in sample(rng, dim, self.max_features.min(dim)) {
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left_pos = 0.0;
            for k in 1..order.len() {
                left_pos += (self.y[order[k - 1]] == 1) as usize as f64;
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if lo == hi {
                    continue;
                }
                let nl = k as f64;
                let nr = n - nl;
                let imp = (nl * gini(left_pos, nl) + nr * gini(pos - left_pos, nr)) / n;
                if imp < parent - 1e-12 && best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        self.nodes.push(TreeNode::Leaf(pos as f64 / idx.len() as f64));
        if pos == 0 || pos == idx.len() {
            return at;
        }
        if let Some((feature, threshold)) = self.best_split(&idx, rng) {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
            let left = self.grow(l, rng);
            let right = self.grow(r, rng);
            self.nodes[at] = TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        at
    }
}

/// Bootstrap-aggregated gini trees with `sqrt(dim)` candidate features per split.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
}

impl RandomForest {
    pub fn train(x: &[Vec<f64>], labels: &[usize], n_trees: usize, seed: u64) -> Result<Self> {
        check_fusion_labels(labels)?;
        if n_trees == 0 {
            return Err(Error::Config("random forest needs at least one tree".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_features = ((x[0].len() as f64).sqrt() as usize).max(1);
        let trees = (0..n_trees)
            .map(|_| {
                let idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                let mut b = TreeBuilder {
                    x,
                    y: labels,
                    max_features,
                    nodes: Vec::new(),
                };
                b.grow(idx, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// A fitted score head of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreModel {
    Mlp(Mlp),
    Svm(Svm),
    Forest(RandomForest),
}

impl ScoreModel {
    pub fn kind(&self) -> ScoreHeadKind {
        match self {
            ScoreModel::Mlp(_) => ScoreHeadKind::Mlp,
            ScoreModel::Svm(_) => ScoreHeadKind::SvmRbf,
            ScoreModel::Forest(_) => ScoreHeadKind::RandomForest,
        }
    }

    /// Positive-class probability.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            ScoreModel::Mlp(m) => m.predict(x),
            ScoreModel::Svm(s) => s.predict(x),
            ScoreModel::Forest(f) => f.predict(x),
        }
    }
}

/// Selected score fusion model with its validation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFusionHead {
    pub param: HeadParam,
    pub model: ScoreModel,
    pub val_auc: f64,
    /// Number of grid points trained.
    pub evaluated: usize,
}

impl ScoreFusionHead {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.model.predict(x)
    }
}

fn fit_one(
    train: &[Vec<f64>],
    train_labels: &[usize],
    val: &[Vec<f64>],
    val_labels: &[usize],
    param: &HeadParam,
    seed: u64,
    log: &mut TrainLog,
) -> Result<ScoreModel> {
    Ok(match param {
        HeadParam::MlpHidden(h) => {
            let mut m = Mlp::new(train[0].len(), h.clone(), seed)?;
            let wrap = |x: &[Vec<f64>], y: &[usize]| -> Vec<Labeled<Vec<f64>>> {
                x.iter()
                    .zip(y)
                    .enumerate()
                    .map(|(i, (v, &l))| Labeled {
                        id: i.to_string(),
                        input: v.clone(),
                        label: l,
                    })
                    .collect()
            };
            let stage = format!("score_mlp_{param}");
            m.params = fit(
                &m,
                m.params.clone(),
                &wrap(train, train_labels),
                &wrap(val, val_labels),
                &Mlp::train_config(seed),
                &stage,
                log,
            )?;
            ScoreModel::Mlp(m)
        }
        HeadParam::SvmC(c) => ScoreModel::Svm(Svm::train(train, train_labels, *c)?),
        HeadParam::Trees(t) => ScoreModel::Forest(RandomForest::train(train, train_labels, *t, seed)?),
    })
}

/// Mean binary cross-entropy of scored samples, probabilities clamped to
/// [1e-7, 1 - 1e-7].
pub fn log_loss(samples: &[ScoredSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let p = s.score.clamp(1e-7, 1.0 - 1e-7);
            if s.label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Train every grid point and keep the one with the highest validation AUC
/// (ties: higher validation recall at 0.5, then lower validation log-loss,
/// then earlier grid position).
pub fn train_score_fusion(
    train: &[Vec<f64>],
    train_labels: &[usize],
    val: &[Vec<f64>],
    val_labels: &[usize],
    grid: &[HeadParam],
    seed: u64,
    log: &mut TrainLog,
) -> Result<ScoreFusionHead> {
    check_fusion_labels(train_labels)?;
    check_fusion_labels(val_labels)?;
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Contract("score vectors and labels differ in length".into()));
    }
    let dim = train[0].len();
    if train.iter().chain(val).any(|v| v.len() != dim) {
        return Err(Error::Contract("score vectors do not share one layout".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty score head grid".into()));
    }
    let mut best: Option<(f64, f64, f64, HeadParam, ScoreModel)> = None;
    for param in grid {
        let model = fit_one(train, train_labels, val, val_labels, param, seed, log)?;
        let samples: Vec<ScoredSample> = val
            .iter()
            .zip(val_labels)
            .enumerate()
            .map(|(i, (x, &l))| ScoredSample::new(i.to_string(), model.predict(x), l == 1))
            .collect();
        let auc = mann_whitney_auc(&samples)?;
        let recall = classification_metrics(&samples, 0.5)?.tpr.unwrap_or(0.0);
        let loss = log_loss(&samples);
        log::info!(
            "score head {} {param}: val auc {auc:.4} recall {recall:.4} loss {loss:.4}",
            model.kind()
        );
        let better = best.as_ref().is_none_or(|(ba, br, bl, _, _)| {
            auc > *ba || (auc == *ba && (recall > *br || (recall == *br && loss < *bl)))
        });
        if better {
            best = Some((auc, recall, loss, param.clone(), model));
        }
    }
    let (val_auc, _, _, param, model) = best.expect("non-empty grid");
    log::info!("score head grid: {} models trained, selected {param}", grid.len());
    Ok(ScoreFusionHead {
        param,
        model,
        val_auc,
        evaluated: grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let base = if l == 1 { 0.7 } else { 0.2 };
            x.push((0..5).map(|_| base + rng.random_range(0.0..0.1)).collect());
            y.push(l);
        }
        (x, y)
    }

    #[test]
    fn every_head_separates_separable_data() {
        let (x, y) = separable(40, 1);
        let (vx, vy) = separable(20, 2);
        for kind in ScoreHeadKind::ALL {
            let grid = default_grid(kind, 5);
            let mut log = TrainLog::default();
            let head = train_score_fusion(&x, &y, &vx, &vy, &grid, 3, &mut log).unwrap();
            assert_eq!(head.val_auc, 1.0, "{kind}");
            assert_eq!(head.evaluated, grid.len());
            assert_eq!(head.model.kind(), kind);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.1; 3]; 4];
        let err = train_score_fusion(
            &x,
            &[1; 4],
            &x,
            &[1; 4],
            &[HeadParam::Trees(3)],
            0,
            &mut TrainLog::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn svm_margin_on_two_points() {
        let x = vec![vec![0.0], vec![1.0]];
        let svm = Svm::train(&x, &[0, 1], 1000.0).unwrap();
        assert!(svm.decision(&[0.0]) < -0.9 && svm.decision(&[1.0]) > 0.9);
        assert!(svm.decision(&[0.5]).abs() < 1e-6);
        assert!(svm.predict(&[1.0]) > svm.predict(&[0.0]));
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(default_grid(ScoreHeadKind::SvmRbf, 9).len(), 9);
        assert_eq!(default_grid(ScoreHeadKind::RandomForest, 9).len(), 6);
        assert_eq!(default_grid(ScoreHeadKind::Mlp, 9)[2], HeadParam::MlpHidden(vec![9, 4]));
    }
}
