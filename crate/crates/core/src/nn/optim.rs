//! Optimizers, learning-rate schedules and the plain supervised training loop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::arch::MlpArchitecture;
use crate::nn::forward::{backward, evaluate, recalibrate_batchnorm, update_running_stats, LossAndAccuracy};
use crate::nn::params::{init_params, GradientTree, ModelParams};
use crate::nn::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    CosineToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::CosineToZero,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            let open = |b: f64| b > 0.0 && b < 1.0;
            if !open(beta1) || !open(beta2) || !(eps > 0.0) {
                return Err(Error::InvalidArgument("Adam betas must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total_steps` steps.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64, schedule: Schedule) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    Ok(match schedule {
        Schedule::Constant => lr0,
        Schedule::CosineToZero => {
            if total_steps == 0 {
                lr0
            } else {
                lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
            }
        }
    })
}

/// Per-parameter optimizer buffers: SGD velocity, or Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .trainable()
            .iter()
            .map(|f| vec![T::zero(); f.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One optimizer update at learning rate `lr`. `step_index` starts at 1
/// and drives Adam's bias correction.
///
/// SGD: `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
pub fn optimizer_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &GradientTree<T>,
    step_index: usize,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    grads.check_congruent(params)?;
    if step_index == 0 {
        return Err(Error::InvalidArgument("step_index starts at 1".into()));
    }
    if state.first.len() != grads.fields.len() {
        return Err(Error::dim("optimizer state", grads.fields.len(), state.first.len()));
    }
    let wd = config.weight_decay;
    match config.optimizer {
        OptimizerKind::Sgd => {
            let mu = config.momentum;
            for ((p, g), v) in params
                .trainable_mut()
                .into_iter()
                .zip(&grads.fields)
                .zip(state.first.iter_mut())
            {
                for i in 0..p.len() {
                    let d = g[i].as_f64() + wd * p[i].as_f64();
                    let vel = mu * v[i].as_f64() + d;
                    v[i] = T::of(vel);
                    p[i] = T::of(p[i].as_f64() - lr * vel);
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let k = step_index as i32;
            let c1 = 1.0 - beta1.powi(k);
            let c2 = 1.0 - beta2.powi(k);
            for (((p, g), m), v) in params
                .trainable_mut()
                .into_iter()
                .zip(&grads.fields)
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                for i in 0..p.len() {
                    let d = g[i].as_f64() + wd * p[i].as_f64();
                    let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * d;
                    let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * d * d;
                    m[i] = T::of(mi);
                    v[i] = T::of(vi);
                    let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    p[i] = T::of(p[i].as_f64() - update);
                }
            }
        }
    }
    Ok(())
}

/// Optimizer bound to a schedule of known length.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    config: TrainConfig,
    total_steps: usize,
    steps_taken: usize,
    state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(params: &ModelParams<T>, config: &TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            total_steps,
            steps_taken: 0,
            state: OptimizerState::new(params),
        })
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        let step = self.steps_taken.min(self.total_steps);
        lr_at(step, self.total_steps, self.config.learning_rate, self.config.schedule)
            .expect("step clamped to schedule")
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &GradientTree<T>) -> Result<()> {
        let lr = self.current_lr();
        self.steps_taken += 1;
        optimizer_step(params, grads, self.steps_taken, &mut self.state, &self.config, lr)
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_batch_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f32> {
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub final_train: LossAndAccuracy,
}

/// Number of optimizer steps one epoch produces. Batchnorm architectures
/// drop a trailing single-example batch.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize, batchnorm: bool) -> usize {
    let full = dataset_len / batch_size;
    let rem = dataset_len % batch_size;
    full + usize::from(rem > 1 || (rem == 1 && !batchnorm))
}

/// Trains a freshly initialized network (seeded by `config.seed`).
pub fn train<T: Real>(arch: &MlpArchitecture, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    let params = init_params(arch, config.seed)?;
    train_from(params, dataset, config)
}

/// SGD/Adam minimization of mean cross-entropy from a given starting point.
/// Batchnorm statistics are recalibrated on the full dataset at the end.
pub fn train_from<T: Real>(
    mut params: ModelParams<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bn = params.arch().use_batchnorm;
    let per_epoch = steps_per_epoch(dataset.len(), config.batch_size, bn);
    let mut opt = Optimizer::new(&params, config, per_epoch * config.epochs)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batches(dataset, config.batch_size, config.seed, epoch as u64) {
            if bn && batch.len() < 2 {
                continue;
            }
            let x = batch.inputs::<T>();
            let bp = backward(&params, &x, batch.labels())?;
            if !bp.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            if let Some(stats) = &bp.batch_stats {
                update_running_stats(&mut params, stats, batch.len());
            }
            opt.step(&mut params, &bp.grads)?;
            sum += bp.loss;
            count += 1;
        }
        history.push(EpochRecord {
            epoch,
            mean_batch_loss: sum / count.max(1) as f64,
        });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    let params = recalibrate_batchnorm(&params, dataset)?;
    let final_train = evaluate(&params, dataset)?;
    Ok(TrainOutcome {
        params,
        history,
        final_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model() -> (ModelParams<f64>, TrainConfig) {
        let arch = MlpArchitecture::new(1, vec![1], 2).unwrap();
        let p = ModelParams::<f64>::zeros(&arch).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        (p, cfg)
    }

    fn grad_on_first(p: &ModelParams<f64>, g0: f64) -> GradientTree<f64> {
        let mut g = GradientTree::zeros_like(p);
        g.fields[0][0] = g0;
        g
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut p, cfg) = scalar_model();
        p.layers_mut()[0].weight.set(0, 0, 0.7);
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let g = GradientTree::zeros_like(&p);
        optimizer_step(&mut p, &g, 1, &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_unit_gradient_moves_by_lr() {
        let (mut p, cfg) = scalar_model();
        p.layers_mut()[0].weight.set(0, 0, 1.0);
        let mut st = OptimizerState::new(&p);
        let g = grad_on_first(&p, 1.0);
        optimizer_step(&mut p, &g, 1, &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p.layers()[0].weight.get(0, 0), 1.0 - 0.1);
    }

    #[test]
    fn sgd_momentum_and_weight_decay() {
        let (mut p, mut cfg) = scalar_model();
        cfg.momentum = 0.9;
        cfg.weight_decay = 0.5;
        p.layers_mut()[0].weight.set(0, 0, 2.0);
        let mut st = OptimizerState::new(&p);
        let g = grad_on_first(&p, 1.0);
        // v1 = 1 + 0.5*2 = 2; theta = 2 - 0.1*2 = 1.8
        optimizer_step(&mut p, &g, 1, &mut st, &cfg, 0.1).unwrap();
        assert!((p.layers()[0].weight.get(0, 0) - 1.8).abs() < 1e-12);
        // v2 = 0.9*2 + 1 + 0.5*1.8 = 3.7; theta = 1.8 - 0.37 = 1.43
        optimizer_step(&mut p, &g, 2, &mut st, &cfg, 0.1).unwrap();
        assert!((p.layers()[0].weight.get(0, 0) - 1.43).abs() < 1e-12);
    }

    #[test]
    fn adam_three_steps_constant_gradient() {
        let (mut p, mut cfg) = scalar_model();
        cfg.optimizer = OptimizerKind::adam();
        let g0 = 0.3;
        let lr = 0.01;
        let mut st = OptimizerState::new(&p);
        let g = grad_on_first(&p, g0);

        // Hand iteration of the bias-corrected update.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=3 {
            m = b1 * m + (1.0 - b1) * g0;
            v = b2 * v + (1.0 - b2) * g0 * g0;
            let mh = m / (1.0 - b1.powi(k));
            let vh = v / (1.0 - b2.powi(k));
            theta -= lr * mh / (vh.sqrt() + eps);
            optimizer_step(&mut p, &g, k as usize, &mut st, &cfg, lr).unwrap();
            let got = p.layers()[0].weight.get(0, 0);
            assert!((got - theta).abs() < 1e-15, "step {k}: {got} vs {theta}");
        }
        // Constant gradients make every bias-corrected step equal to lr.
        assert!((theta + 3.0 * lr).abs() < 1e-8);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0, 100, 0.2, Schedule::CosineToZero).unwrap(), 0.2);
        assert!(lr_at(100, 100, 0.2, Schedule::CosineToZero).unwrap().abs() < 1e-12);
        assert!((lr_at(50, 100, 0.2, Schedule::CosineToZero).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(lr_at(70, 100, 0.2, Schedule::Constant).unwrap(), 0.2);
        assert!(lr_at(101, 100, 0.2, Schedule::Constant).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer = OptimizerKind::Adam {
            beta1: 1.0,
            beta2: 0.999,
            eps: 1e-8,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn steps_per_epoch_counts_partial_batches() {
        assert_eq!(steps_per_epoch(10, 4, false), 3);
        assert_eq!(steps_per_epoch(9, 4, true), 2);
        assert_eq!(steps_per_epoch(9, 4, false), 3);
        assert_eq!(steps_per_epoch(8, 4, true), 2);
    }
}
