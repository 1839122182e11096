use super::metrics::batch_accuracy;
use super::DIVERGENCE_LIMIT;
use crate::error::{Error, Result};
use crate::models::{forward, Forward, ModelSpec, PerturbCtx, ThetaParams};
use crate::perturbation::{PerturbConfig, PhiParams, RunningScales};
use crate::tensor::{AdamState, Mode, NoiseSource, Tape, Tensor};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaStep {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiGradient {
    pub grad: PhiParams<f32>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Turns a non-finite op or an exploding loss into a divergence report.
fn guard<T>(step: usize, r: Result<T>) -> Result<T> {
    match r {
        Err(Error::NonFinite(_)) => Err(Error::Divergence { step, loss: f64::NAN }),
        other => other,
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// One optimisation step of θ on a training batch with φ held constant.
///
/// Batch norm and the running channel scales are updated from this batch.
#[allow(clippy::too_many_arguments)]
pub fn theta_step(
    spec: &ModelSpec,
    theta: &mut ThetaParams<f32>,
    adam: &mut AdamState<f32>,
    scales: &mut RunningScales<f32>,
    phi: &PhiParams<f32>,
    perturb: &PerturbConfig,
    x: Tensor<f32>,
    labels: &[usize],
    beta: f64,
    lr: f64,
    weight_decay: f64,
    noise: &mut Rng,
    step: usize,
) -> Result<ThetaStep> {
    if labels.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let theta_vars = theta.to_tape(&mut tape, true);
    let phi_vars = phi.to_tape(&mut tape, false);
    let mut ctx = Forward {
        mode: Mode::Train,
        update_bn: true,
        perturb: Some(PerturbCtx {
            phi: &phi_vars,
            cfg: perturb,
            beta: beta as f32,
            scales,
            noise: NoiseSource::Gaussian(noise),
        }),
    };
    let logits = guard(step, forward(&mut tape, spec, &theta_vars, &mut theta.bn, x, &mut ctx))?;
    let accuracy = batch_accuracy(tape.value(logits), labels)?;
    let loss = guard(step, tape.cross_entropy(logits, labels))?;
    let loss_value = tape.value(loss).data()[0] as f64;
    check_loss(step, loss_value)?;
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> =
        theta_vars.vars.iter().map(|&v| grads.take(v).expect("θ leaves require grad")).collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Divergence { step, loss: loss_value });
    }
    let decay: Vec<bool> = theta.params.iter().map(|p| p.decay).collect();
    let mut params: Vec<&mut Tensor<f32>> = theta.params.iter_mut().map(|p| &mut p.tensor).collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam.step(&mut params, &grad_refs, &decay, lr as f32, weight_decay as f32)?;
    Ok(ThetaStep { loss: loss_value, accuracy })
}

/// Gradient of the perturbed loss on a held-out batch with respect to φ only.
///
/// θ enters through a stop-gradient, so no second-order path exists. Neither
/// the batch-norm statistics nor the running scales are modified.
#[allow(clippy::too_many_arguments)]
pub fn phi_gradient(
    spec: &ModelSpec,
    theta: &ThetaParams<f32>,
    scales: &RunningScales<f32>,
    phi: &PhiParams<f32>,
    perturb: &PerturbConfig,
    x: Tensor<f32>,
    labels: &[usize],
    beta: f64,
    noise: &mut Rng,
    step: usize,
) -> Result<PhiGradient> {
    if labels.is_empty() {
        return Err(Error::Data("empty test batch".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let theta_vars = theta.to_tape(&mut tape, true).detached(&mut tape);
    let phi_vars = phi.to_tape(&mut tape, true);
    let mut bn = theta.bn.clone();
    let mut scratch = scales.clone();
    let mut ctx = Forward {
        mode: Mode::Train,
        update_bn: false,
        perturb: Some(PerturbCtx {
            phi: &phi_vars,
            cfg: perturb,
            beta: beta as f32,
            scales: &mut scratch,
            noise: NoiseSource::Gaussian(noise),
        }),
    };
    let logits = guard(step, forward(&mut tape, spec, &theta_vars, &mut bn, x, &mut ctx))?;
    let accuracy = batch_accuracy(tape.value(logits), labels)?;
    let loss = guard(step, tape.cross_entropy(logits, labels))?;
    let loss_value = tape.value(loss).data()[0] as f64;
    check_loss(step, loss_value)?;
    let grads = tape.backward(loss)?;
    let grad = PhiParams::from_gradients(&grads, &phi_vars);
    if grad.to_flat().iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss: loss_value });
    }
    Ok(PhiGradient { grad, loss: loss_value, accuracy })
}
