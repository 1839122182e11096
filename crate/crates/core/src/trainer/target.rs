use super::meta::check_data;
use super::metrics::{argmax, ece, EvalMetrics, MetricsLog, MetricsRow, Phase, ECE_BINS};
use super::step::theta_step;
use super::{stream_rng, TrainConfig};
use crate::data::{augment, BatchSampler, Dataset};
use crate::error::Result;
use crate::models::{build_model, forward, Forward, ModelSpec, PerturbCtx, ThetaParams};
use crate::perturbation::{mc_predict, PerturbConfig, PhiParams, RunningScales};
use crate::tensor::{AdamConfig, AdamState, Mode, NoiseSource, Tape};

/// A trained network together with the perturbation it was trained under.
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub spec: ModelSpec,
    pub theta: ThetaParams<f32>,
    pub scales: RunningScales<f32>,
    pub phi: PhiParams<f32>,
    pub perturb: PerturbConfig,
    /// Perturbation strength used at evaluation.
    pub beta: f64,
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a freshly initialised network on `train` with φ* frozen.
///
/// With `cfg.perturb` disabled this is plain training of the base model,
/// using the same initialisation, batches and augmentation as the perturbed
/// run with the same seed.
pub fn meta_test_train(
    train: &Dataset,
    phi_star: &PhiParams<f32>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TargetModel> {
    cfg.validate()?;
    check_data(spec, train, "target training set", 2)?;
    let mut theta = build_model(spec, &mut stream_rng(cfg.seed, 0, "init"))?;
    let mut adam = AdamState::new(AdamConfig::default());
    let mut scales = RunningScales::new(cfg.perturb.scale_momentum);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, stream_rng(cfg.seed, 0, "train_batches"));
    let mut augment_rng = stream_rng(cfg.seed, 0, "augment");
    let mut noise_rng = stream_rng(cfg.seed, 0, "noise");
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_batches = 0usize;
    for step in 0..cfg.total_steps {
        let (idx, epoch_end) = sampler.next_batch();
        let (x, y) = train.batch(&idx)?;
        let x = if cfg.augment { augment(&x, &mut augment_rng)? } else { x };
        let (beta, lr) = (cfg.beta_at(step), cfg.lr_at(step));
        let out = theta_step(
            spec,
            &mut theta,
            &mut adam,
            &mut scales,
            phi_star,
            &cfg.perturb,
            x,
            &y,
            beta,
            lr,
            cfg.weight_decay,
            &mut noise_rng,
            step,
        )?;
        log.push(MetricsRow {
            step,
            task_id: 0,
            phase: Phase::Train,
            train_loss: Some(out.loss),
            test_loss: None,
            accuracy: Some(out.accuracy),
            lr,
            beta,
        });
        epoch_sum += out.loss;
        epoch_batches += 1;
        if epoch_end {
            epoch_losses.push(epoch_sum / epoch_batches as f64);
            epoch_sum = 0.0;
            epoch_batches = 0;
        }
    }
    Ok(TargetModel {
        spec: spec.clone(),
        theta,
        scales,
        phi: *phi_star,
        perturb: cfg.perturb,
        beta: cfg.beta_at(cfg.total_steps),
        epoch_losses,
    })
}

/// Accuracy, NLL and ECE of the MC-averaged predictive distribution.
///
/// Batch norm and the channel scales use their running averages; noise is
/// drawn from a generator derived from `seed`, so results are deterministic.
pub fn evaluate(model: &TargetModel, test: &Dataset, batch_size: usize, seed: u64) -> Result<EvalMetrics> {
    check_data(&model.spec, test, "test set", 1)?;
    let noisy = model.perturb.enable_noise && model.beta > 0.0;
    let samples = if noisy { model.perturb.mc_samples } else { 1 };
    let mut rng = stream_rng(seed, 0, "eval");
    let mut bn = model.theta.bn.clone();
    let mut scales = model.scales.clone();
    let mut confidences = Vec::with_capacity(test.len());
    let mut correct = Vec::with_capacity(test.len());
    let mut nll = 0.0f64;
    let order: Vec<usize> = (0..test.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = test.batch(chunk)?;
        let probs = mc_predict(samples, || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let theta = model.theta.to_tape(&mut tape, false);
            let phi = model.phi.to_tape(&mut tape, false);
            let mut ctx = Forward {
                mode: Mode::Eval,
                update_bn: false,
                perturb: Some(PerturbCtx {
                    phi: &phi,
                    cfg: &model.perturb,
                    beta: model.beta as f32,
                    scales: &mut scales,
                    noise: NoiseSource::Gaussian(&mut rng),
                }),
            };
            let logits = forward(&mut tape, &model.spec, &theta, &mut bn, xv, &mut ctx)?;
            Ok(tape.value(logits).clone())
        })?;
        let k = probs.shape()[1];
        for (row, &label) in probs.data().chunks_exact(k).zip(&y) {
            let pred = argmax(row);
            confidences.push((row[pred] as f64).clamp(0.0, 1.0));
            correct.push(pred == label);
            nll -= (row[label] as f64).max(1e-12).ln();
        }
    }
    let n = test.len() as f64;
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / n;
    Ok(EvalMetrics { accuracy, nll: nll / n, ece: ece(&confidences, &correct, ECE_BINS)? })
}
