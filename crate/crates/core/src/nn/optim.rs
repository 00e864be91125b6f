//! Optimizers, learning-rate scheduling, early stopping and stochastic weight
//! averaging over flat parameter vectors.

use std::fmt;
use std::str::FromStr;

pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grads: &[f64]);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

impl OptimizerKind {
    pub fn build(self, lr: f64, n_params: usize) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr, n_params)),
            OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(lr, 0.9, n_params)),
        }
    }
}

/// Adaptive-moment optimizer with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Classical momentum SGD: `v ← μv − lr·g; θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; n_params],
        }
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for i in 0..params.len() {
            self.velocity[i] = self.momentum * self.velocity[i] - self.lr * grads[i];
            params[i] += self.velocity[i];
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Uniform running average of weights (SWA), sampled once per epoch from
/// `start_epoch` on.
#[derive(Debug, Clone)]
pub struct WeightAverage {
    start_epoch: Option<usize>,
    average: Vec<f64>,
    count: usize,
}

impl WeightAverage {
    pub fn new(start_epoch: Option<usize>, n_params: usize) -> Self {
        Self {
            start_epoch,
            average: vec![0.0; n_params],
            count: 0,
        }
    }

    /// Record the weights at the end of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, params: &[f64]) {
        match self.start_epoch {
            Some(start) if epoch >= start => {
                self.count += 1;
                let k = self.count as f64;
                for (a, p) in self.average.iter_mut().zip(params) {
                    *a += (p - *a) / k;
                }
            }
            _ => {}
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Averaged weights, or the supplied fallback when no epoch was averaged.
    pub fn finish(self, last: Vec<f64>) -> Vec<f64> {
        if self.count == 0 {
            last
        } else {
            self.average
        }
    }
}

/// Direction in which a monitored quantity improves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    Minimize,
    Maximize,
}

impl Monitor {
    fn improved(self, value: f64, best: f64, tolerance: f64) -> bool {
        match self {
            Monitor::Minimize => value < best - tolerance,
            Monitor::Maximize => value > best + tolerance,
        }
    }

    fn worst(self) -> f64 {
        match self {
            Monitor::Minimize => f64::INFINITY,
            Monitor::Maximize => f64::NEG_INFINITY,
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of the validation loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns the new learning rate if it was reduced.
    pub fn observe(&mut self, val_loss: f64, opt: &mut dyn Optimizer) -> Option<f64> {
        if val_loss < self.best - 1e-4 {
            self.best = val_loss;
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            let lr = opt.learning_rate() * self.factor;
            opt.set_learning_rate(lr);
            return Some(lr);
        }
        None
    }
}

/// Stops training after `patience` epochs whose monitored value does not beat
/// the best value by more than `tolerance`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    monitor: Monitor,
    patience: usize,
    tolerance: f64,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(monitor: Monitor, patience: usize, tolerance: f64) -> Self {
        Self {
            monitor,
            patience,
            tolerance,
            best: monitor.worst(),
            wait: 0,
        }
    }

    /// Returns `true` when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.monitor.improved(value, self.best, self.tolerance) {
            self.best = value;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_fires_after_patience_non_improving_epochs() {
        let mut es = EarlyStopping::new(Monitor::Minimize, 10, 0.001);
        assert!(!es.observe(1.0));
        assert!(!es.observe(0.5));
        // improvements smaller than the tolerance do not count
        for i in 0..9 {
            assert!(!es.observe(0.4995 - i as f64 * 1e-5), "epoch {i}");
        }
        assert!(es.observe(0.4994));
    }

    #[test]
    fn early_stopping_on_maximized_metric() {
        let mut es = EarlyStopping::new(Monitor::Maximize, 2, 0.0);
        assert!(!es.observe(0.7));
        assert!(!es.observe(0.8));
        assert!(!es.observe(0.8));
        assert!(es.observe(0.75));
    }

    #[test]
    fn weight_average_is_uniform_mean_from_start_epoch() {
        let mut swa = WeightAverage::new(Some(2), 2);
        swa.observe(1, &[100.0, 100.0]);
        swa.observe(2, &[1.0, 2.0]);
        swa.observe(3, &[3.0, 4.0]);
        assert_eq!(swa.count(), 2);
        assert_eq!(swa.finish(vec![0.0, 0.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn weight_average_falls_back_when_window_empty() {
        let mut swa = WeightAverage::new(Some(30), 1);
        for e in 1..=25 {
            swa.observe(e, &[e as f64]);
        }
        assert_eq!(swa.finish(vec![25.0]), vec![25.0]);
    }

    #[test]
    fn plateau_reduces_learning_rate() {
        let mut opt = Adam::new(1e-3, 1);
        let mut sched = PlateauScheduler::new(0.2, 2);
        assert!(sched.observe(1.0, &mut opt).is_none());
        assert!(sched.observe(1.0, &mut opt).is_none());
        let lr = sched.observe(1.0, &mut opt).unwrap();
        assert!((lr - 2e-4).abs() < 1e-15);
        assert_eq!(opt.learning_rate(), lr);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(0.1, 2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_minimizes_quadratic() {
        let mut opt = SgdMomentum::new(0.05, 0.9, 1);
        let mut p = vec![5.0];
        for _ in 0..300 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3);
    }
}
