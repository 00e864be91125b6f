use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::{mann_whitney_auc, ScoredSample};
use crate::nn::{all_finite, EarlyStopping, Monitor, PlateauScheduler, WeightAverage};
use crate::preprocess::AugmentationPolicy;

use super::config::{StopMetric, TrainConfig};

/// Training example with a case or image id.
#[derive(Debug, Clone)]
pub struct Labeled<T> {
    pub id: String,
    pub input: T,
    pub label: usize,
}

/// A two-class network whose parameters are held by the caller.
pub trait Trainable {
    type Input;

    fn param_count(&self) -> usize;

    /// Augment, run forward and backward on one sample; accumulates into
    /// `grads` and returns the loss.
    fn train_sample(
        &self,
        params: &[f64],
        input: &Self::Input,
        label: usize,
        policy: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        grads: &mut [f64],
    ) -> f64;

    /// Class probabilities in evaluation mode.
    fn probabilities(&self, params: &[f64], input: &Self::Input) -> [f64; 2];
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub auc: Option<f64>,
    pub learning_rate: f64,
}

/// Per-epoch loss and AUC of every training stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["stage", "epoch", "split", "loss", "auc", "learning_rate"]);
        for r in &self.rows {
            let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
            let _ = w.write_record([
                r.stage.clone(),
                r.epoch.to_string(),
                r.split.to_string(),
                r.loss.to_string(),
                auc,
                r.learning_rate.to_string(),
            ]);
        }
        String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::evalkit::write_text(path, &self.to_csv())
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    pub fn rows_for<'a>(&'a self, stage: &'a str, split: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.stage == stage && r.split == split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auc: Option<f64>,
    /// Positive-class probability per sample.
    pub scores: Vec<f64>,
}

/// Mean cross-entropy, AUC and scores of `model` on `data`.
pub fn evaluate<M: Trainable>(model: &M, params: &[f64], data: &[Labeled<M::Input>]) -> Evaluation {
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(data.len());
    let mut samples = Vec::with_capacity(data.len());
    for d in data {
        let p = model.probabilities(params, &d.input);
        loss -= p[d.label].max(1e-300).ln();
        scores.push(p[1]);
        samples.push(ScoredSample::new(d.id.clone(), p[1], d.label == 1));
    }
    Evaluation {
        loss: loss / data.len().max(1) as f64,
        auc: mann_whitney_auc(&samples).ok(),
        scores,
    }
}

/// Draw-without-replacement queue that reshuffles when exhausted.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// Index batches covering one epoch of `labels.len()` draws. Balanced batches
/// alternate the two classes, oversampling the rarer one; otherwise a plain
/// shuffle is chunked.
pub fn make_batches(labels: &[usize], batch_size: usize, balanced: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = labels.len();
    let by_class: [Vec<usize>; 2] = [
        (0..n).filter(|&i| labels[i] == 0).collect(),
        (0..n).filter(|&i| labels[i] == 1).collect(),
    ];
    if !balanced || by_class.iter().any(|c| c.is_empty()) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        return idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    let mut cyclers = by_class.map(|items| Cycler {
        pos: items.len(),
        items,
    });
    let mut batches = Vec::new();
    let mut drawn = 0;
    while drawn < n {
        let size = batch_size.min(n - drawn);
        let offset = batches.len() % 2;
        let batch: Vec<usize> = (0..size).map(|j| cyclers[(j + offset) % 2].next(rng)).collect();
        drawn += size;
        batches.push(batch);
    }
    batches
}

/// Mini-batch training with optional plateau scheduling, early stopping and
/// weight averaging. Returns the averaged weights when averaging collected any
/// epoch, else the best weights under early stopping, else the last weights.
pub fn fit<M: Trainable>(
    model: &M,
    mut params: Vec<f64>,
    train: &[Labeled<M::Input>],
    val: &[Labeled<M::Input>],
    cfg: &TrainConfig,
    stage: &str,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("{stage}: empty training split")));
    }
    if params.len() != model.param_count() {
        return Err(Error::Contract(format!(
            "{stage}: {} parameters supplied, model has {}",
            params.len(),
            model.param_count()
        )));
    }
    let n = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build(cfg.learning_rate, n);
    let mut swa = WeightAverage::new(cfg.swa_start, n);
    let mut plateau = cfg.plateau.map(|(f, p)| PlateauScheduler::new(f, p));
    let mut early = cfg.early_stopping.map(|es| {
        let monitor = match es.metric {
            StopMetric::ValLoss => Monitor::Minimize,
            StopMetric::ValAuc => Monitor::Maximize,
        };
        (es.metric, EarlyStopping::new(monitor, es.patience, es.tolerance))
    });
    let mut best: Option<Vec<f64>> = None;
    let labels: Vec<usize> = train.iter().map(|t| t.label).collect();
    let mut grads = vec![0.0; n];
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in make_batches(&labels, cfg.batch_size, cfg.stratified, &mut rng) {
            grads.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in &batch {
                let s = &train[i];
                batch_loss += model.train_sample(&params, &s.input, s.label, &cfg.augmentation, &mut rng, &mut grads);
            }
            if !batch_loss.is_finite() || !all_finite(&grads) {
                return Err(Error::Training(format!(
                    "{stage}: non-finite loss {batch_loss} at epoch {epoch} (lr {})",
                    opt.learning_rate()
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            opt.step(&mut params, &grads);
            if !all_finite(&params) {
                return Err(Error::Training(format!(
                    "{stage}: non-finite parameters at epoch {epoch}"
                )));
            }
            total += batch_loss;
        }
        log.rows.push(LogRow {
            stage: stage.to_string(),
            epoch,
            split: "train",
            loss: total / train.len() as f64,
            auc: None,
            learning_rate: opt.learning_rate(),
        });
        let mut stop = false;
        if !val.is_empty() {
            let ev = evaluate(model, &params, val);
            log.rows.push(LogRow {
                stage: stage.to_string(),
                epoch,
                split: "validation",
                loss: ev.loss,
                auc: ev.auc,
                learning_rate: opt.learning_rate(),
            });
            if let Some(p) = plateau.as_mut() {
                if let Some(lr) = p.observe(ev.loss, opt.as_mut()) {
                    log::info!("{stage}: learning rate reduced to {lr:e} after epoch {epoch}");
                }
            }
            if let Some((metric, es)) = early.as_mut() {
                let value = match metric {
                    StopMetric::ValLoss => ev.loss,
                    StopMetric::ValAuc => ev.auc.unwrap_or(0.5),
                };
                let before = es.best();
                stop = es.observe(value);
                if es.best() != before {
                    best = Some(params.clone());
                }
            }
        }
        swa.observe(epoch, &params);
        if stop {
            log::info!("{stage}: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(if swa.count() > 0 {
        swa.finish(params)
    } else {
        best.unwrap_or(params)
    })
}

/// `fit` followed by the configured fine-tune pass.
pub fn fit_with_finetune<M: Trainable>(
    model: &M,
    params: Vec<f64>,
    train: &[Labeled<M::Input>],
    val: &[Labeled<M::Input>],
    cfg: &TrainConfig,
    stage: &str,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    let params = fit(model, params, train, val, cfg, stage, log)?;
    if cfg.finetune_epochs == 0 {
        return Ok(params);
    }
    fit(
        model,
        params,
        train,
        val,
        &cfg.finetune(),
        &format!("{stage}_finetune"),
        log,
    )
}
