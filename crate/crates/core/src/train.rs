//! Shared training-loop plumbing: optimizer settings, learning-rate schedule,
//! loss logs and observer hooks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_update, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::flow::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(iterations: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            iterations,
            batch_size,
            lr,
            lr_schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
        }
    }

    pub fn with_schedule(mut self, s: LrSchedule) -> Self {
        self.lr_schedule = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Learning rate for the update with zero-based index `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = iter as f64 / self.iterations.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Per-iteration training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Trailing moving average with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, &l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= w {
                acc -= self.losses[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// Hook invoked after every optimizer step.
pub trait TrainObserver {
    /// `iter` counts completed updates (1-based).
    fn on_step(&mut self, _iter: usize, _loss: f64, _student: &VelocityField) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl<F> TrainObserver for F
where
    F: FnMut(usize, f64, &VelocityField) -> Result<()>,
{
    fn on_step(&mut self, iter: usize, loss: f64, student: &VelocityField) -> Result<()> {
        self(iter, loss, student)
    }
}

/// Draws `n` items uniformly with replacement.
pub fn sample_batch<T: Copy, R: Rng + ?Sized>(data: &[T], n: usize, rng: &mut R) -> Result<Vec<T>> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok((0..n).map(|_| data[rng.random_range(0..data.len())]).collect())
}

/// Adam state bound to one field.
#[derive(Debug, Clone)]
pub struct Optimizer {
    state: AdamState,
    config: TrainConfig,
}

impl Optimizer {
    pub fn new(field: &VelocityField, config: TrainConfig) -> Self {
        Self {
            state: AdamState::new(field.params().len()),
            config,
        }
    }

    pub fn step(&mut self, field: &mut VelocityField, grad: &[f64], iter: usize) -> Result<()> {
        let lr = self.config.lr_at(iter);
        adam_update(field.params_mut(), grad, &mut self.state, lr, self.config.adam)
    }
}
