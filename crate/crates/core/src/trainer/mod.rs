//! Joint meta-training of the perturbation parameters across source tasks,
//! training of target networks with a frozen perturbation, and evaluation.

mod meta;
mod metrics;
mod step;
mod target;

pub use meta::{meta_step, meta_train, phi_gradient_aggregate, MetaState, StepReport, TaskState, TaskStepReport};
pub use metrics::{batch_accuracy, ece, EvalMetrics, MetricsLog, MetricsRow, Phase, Summary, ECE_BINS};
pub use step::{phi_gradient, theta_step, PhiGradient, ThetaStep};
pub use target::{evaluate, meta_test_train, TargetModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::PerturbConfig;
use crate::Rng;

/// Losses above this (or non-finite ones) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    /// Size of the per-task test batches used for the φ update.
    pub test_batch_size: usize,
    pub weight_decay: f64,
    pub test_fraction: f64,
    /// Random crop and flip on training batches.
    pub augment: bool,
    pub perturb: PerturbConfig,
    /// Threads used to step tasks; results do not depend on it.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            lr: 1e-3,
            lr_decay: 0.3,
            milestones: vec![800, 1400, 1800],
            batch_size: 64,
            test_batch_size: 64,
            weight_decay: 5e-4,
            test_fraction: 0.2,
            augment: true,
            perturb: PerturbConfig::default(),
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Milestones at 40%, 70% and 90% of `total_steps`, the proportions of the default schedule.
    pub fn scaled_milestones(total_steps: usize) -> Vec<usize> {
        let mut out: Vec<usize> = [0.4, 0.7, 0.9]
            .iter()
            .map(|f| (f * total_steps as f64).round() as usize)
            .filter(|&m| m > 0 && m < total_steps)
            .collect();
        out.dedup();
        out
    }

    /// Sets the run length and rescales the milestones to it.
    pub fn with_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self.milestones = Self::scaled_milestones(total_steps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_steps) {
            return bad(format!("milestones {:?} must be below total_steps {}", self.milestones, self.total_steps));
        }
        if self.batch_size < 2 || self.test_batch_size < 2 {
            return bad("batch sizes must be at least 2 (batch statistics)".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        self.perturb.validate()
    }

    /// `lr · decay^(milestones reached)`; a milestone applies from its own step on.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= step).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        self.perturb.anneal.beta(step, self.total_steps)
    }
}

/// Independent generator for one purpose of one task, derived from the run seed.
pub fn stream_rng(seed: u64, task: usize, stream: &str) -> Rng {
    crate::seeded_rng(crate::stable_hash64(format!("{seed}/{task}/{stream}").as_bytes()))
}
