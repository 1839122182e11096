use rayon::prelude::*;

use super::metrics::{MetricsLog, MetricsRow, Phase};
use super::step::{phi_gradient, theta_step};
use super::target::TargetModel;
use super::{stream_rng, TrainConfig};
use crate::data::{augment, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::models::{build_model, ModelSpec, ThetaParams};
use crate::perturbation::{PhiParams, RunningScales, PHI_SCALARS};
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::Rng;

/// One source task: private network, optimiser, scales, data and generators.
#[derive(Clone, Debug)]
pub struct TaskState {
    pub id: usize,
    pub spec: ModelSpec,
    pub theta: ThetaParams<f32>,
    pub adam: AdamState<f32>,
    pub scales: RunningScales<f32>,
    /// This worker's copy of φ; equal to the canonical φ between steps.
    pub phi: PhiParams<f32>,
    pub train: Dataset,
    pub test: Dataset,
    pub train_sampler: BatchSampler,
    pub test_sampler: BatchSampler,
    pub augment_rng: Rng,
    pub noise_rng: Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStepReport {
    pub task_id: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub phi_grad: PhiParams<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub beta: f64,
    pub tasks: Vec<TaskStepReport>,
    /// Mean φ-gradient that drove the update.
    pub phi_grad: PhiParams<f32>,
}

/// Shape and label compatibility; batch statistics need `min_len ≥ 2` for training sets.
pub(crate) fn check_data(spec: &ModelSpec, data: &Dataset, what: &str, min_len: usize) -> Result<()> {
    if data.shape() != spec.input {
        return Err(Error::Data(format!("{what} images are {:?}, the model expects {:?}", data.shape(), spec.input)));
    }
    if data.class_count() > spec.num_classes {
        return Err(Error::Data(format!(
            "{what} has {} classes, the model predicts {}",
            data.class_count(),
            spec.num_classes
        )));
    }
    if data.len() < min_len {
        return Err(Error::Data(format!("{what} needs at least {min_len} instances")));
    }
    Ok(())
}

impl TaskState {
    /// Fresh task; generators derive from `cfg.seed` and `id`. The φ replica
    /// is set when the task joins a [`MetaState`].
    pub fn new(id: usize, spec: ModelSpec, train: Dataset, test: Dataset, cfg: &TrainConfig) -> Result<Self> {
        check_data(&spec, &train, &format!("task {id} training set"), 2)?;
        check_data(&spec, &test, &format!("task {id} test set"), 2)?;
        let theta = build_model(&spec, &mut stream_rng(cfg.seed, id, "init"))?;
        Ok(Self {
            id,
            theta,
            adam: AdamState::new(AdamConfig::default()),
            scales: RunningScales::new(cfg.perturb.scale_momentum),
            phi: PhiParams::zeros(),
            train_sampler: BatchSampler::new(train.len(), cfg.batch_size, stream_rng(cfg.seed, id, "train_batches")),
            test_sampler: BatchSampler::new(test.len(), cfg.test_batch_size, stream_rng(cfg.seed, id, "test_batches")),
            augment_rng: stream_rng(cfg.seed, id, "augment"),
            noise_rng: stream_rng(cfg.seed, id, "noise"),
            spec,
            train,
            test,
        })
    }

    /// Next training batch, augmented when the config asks for it.
    pub fn next_train_batch(&mut self, cfg: &TrainConfig) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (idx, _) = self.train_sampler.next_batch();
        let (x, y) = self.train.batch(&idx)?;
        let x = if cfg.augment { augment(&x, &mut self.augment_rng)? } else { x };
        Ok((x, y))
    }

    pub fn next_test_batch(&mut self) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (idx, _) = self.test_sampler.next_batch();
        self.test.batch(&idx)
    }

    /// θ-step on a training batch, then the φ-gradient on a test batch,
    /// both against this task's φ replica.
    pub fn step(&mut self, step: usize, cfg: &TrainConfig) -> Result<TaskStepReport> {
        let beta = cfg.beta_at(step);
        let (x, y) = self.next_train_batch(cfg)?;
        let train = theta_step(
            &self.spec,
            &mut self.theta,
            &mut self.adam,
            &mut self.scales,
            &self.phi,
            &cfg.perturb,
            x,
            &y,
            beta,
            cfg.lr_at(step),
            cfg.weight_decay,
            &mut self.noise_rng,
            step,
        )?;
        let (x, y) = self.next_test_batch()?;
        let test = phi_gradient(
            &self.spec,
            &self.theta,
            &self.scales,
            &self.phi,
            &cfg.perturb,
            x,
            &y,
            beta,
            &mut self.noise_rng,
            step,
        )?;
        Ok(TaskStepReport {
            task_id: self.id,
            train_loss: train.loss,
            train_accuracy: train.accuracy,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            phi_grad: test.grad,
        })
    }

    /// This task's network with the given φ, ready for evaluation.
    pub fn target_model(&self, phi: &PhiParams<f32>, cfg: &TrainConfig) -> TargetModel {
        TargetModel {
            spec: self.spec.clone(),
            theta: self.theta.clone(),
            scales: self.scales.clone(),
            phi: *phi,
            perturb: cfg.perturb,
            beta: cfg.beta_at(cfg.total_steps),
            epoch_losses: Vec::new(),
        }
    }
}

/// The shared side of meta-training.
#[derive(Clone, Debug)]
pub struct MetaState {
    /// Canonical φ.
    pub phi: PhiParams<f32>,
    pub adam: AdamState<f32>,
    /// Global steps completed.
    pub step: usize,
    pub cfg: TrainConfig,
}

impl MetaState {
    /// φ drawn from its initialisation distribution with the run seed.
    pub fn new(cfg: TrainConfig) -> Self {
        let phi = PhiParams::init(&mut stream_rng(cfg.seed, 0, "phi"));
        Self::with_phi(phi, cfg)
    }

    pub fn with_phi(phi: PhiParams<f32>, cfg: TrainConfig) -> Self {
        Self { phi, adam: AdamState::new(AdamConfig::default()), step: 0, cfg }
    }

    pub fn broadcast(&self, tasks: &mut [TaskState]) {
        for t in tasks {
            t.phi = self.phi;
        }
    }
}

/// Element-wise mean of the per-task φ-gradients, summed in the given (task) order.
pub fn phi_gradient_aggregate(grads: &[PhiParams<f32>]) -> Result<PhiParams<f32>> {
    let Some(first) = grads.first() else {
        return Err(Error::Config("cannot aggregate zero φ-gradients".into()));
    };
    let mut acc = first.to_flat();
    for g in &grads[1..] {
        let flat = g.to_flat();
        if flat.len() != acc.len() {
            return Err(Error::Shape("φ-gradients differ in size".into()));
        }
        acc.iter_mut().zip(&flat).for_each(|(a, &b)| *a += b);
    }
    let n = grads.len() as f32;
    acc.iter_mut().for_each(|a| *a /= n);
    PhiParams::from_flat(&acc)
}

/// One synchronised global step: every task steps against its replica, the
/// φ-gradients are averaged in task order, the canonical φ takes one Adam
/// step and is copied back to every replica.
///
/// With a pool the tasks step concurrently; the result is the same either way.
pub fn meta_step(
    tasks: &mut [TaskState],
    meta: &mut MetaState,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepReport> {
    if tasks.is_empty() {
        return Err(Error::Config("meta-training needs at least one task".into()));
    }
    let step = meta.step;
    let cfg = &meta.cfg;
    let run = |t: &mut TaskState| t.step(step, cfg);
    let results: Vec<Result<TaskStepReport>> = match pool {
        Some(pool) => pool.install(|| tasks.par_iter_mut().map(run).collect()),
        None => tasks.iter_mut().map(run).collect(),
    };
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let grads: Vec<PhiParams<f32>> = reports.iter().map(|r| r.phi_grad).collect();
    let phi_grad = phi_gradient_aggregate(&grads)?;
    let lr = cfg.lr_at(step);
    let mut flat = Tensor::new(vec![PHI_SCALARS], meta.phi.to_flat())?;
    let grad = Tensor::new(vec![PHI_SCALARS], phi_grad.to_flat())?;
    meta.adam.step(&mut [&mut flat], &[&grad], &[false], lr as f32, 0.0)?;
    meta.phi = PhiParams::from_flat(flat.data())?;
    meta.broadcast(tasks);
    meta.step += 1;
    Ok(StepReport { step, lr, beta: cfg.beta_at(step), tasks: reports, phi_grad })
}

/// Runs the remaining global steps and returns the canonical φ. Every task
/// contributes one `meta_train` row per step to `log`.
pub fn meta_train(tasks: &mut [TaskState], meta: &mut MetaState, log: &mut MetricsLog) -> Result<PhiParams<f32>> {
    meta.cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("meta-training needs at least one task".into()));
    }
    let pool = if meta.cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(meta.cfg.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
        )
    } else {
        None
    };
    meta.broadcast(tasks);
    while meta.step < meta.cfg.total_steps {
        let report = meta_step(tasks, meta, pool.as_ref())?;
        for t in &report.tasks {
            log.push(MetricsRow {
                step: report.step,
                task_id: t.task_id,
                phase: Phase::MetaTrain,
                train_loss: Some(t.train_loss),
                test_loss: Some(t.test_loss),
                accuracy: Some(t.test_accuracy),
                lr: report.lr,
                beta: report.beta,
            });
        }
    }
    Ok(meta.phi)
}
