//! The perturbation function `g_φ(h) = s ∘ z`.
//!
//! `z` is softplus noise whose mean comes from a stack of two
//! channel-permutation-equivariant convolutions, so one set of kernels
//! applies to any channel count. `s` is a per-channel gate in (0, 1)
//! computed from batch statistics of a small per-channel descriptor; at
//! evaluation time the gate is replaced by its running average.

mod checkpoint;
mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_phi, read_phi_file, write_phi, write_phi_file, PHI_MAGIC, PHI_VERSION};
pub use params::{
    EquivariantLayerParams, NoiseGeneratorParams, PhiParams, PhiVars, ScalerParams, PHI_SCALARS,
};

use crate::error::{Error, Result};
use crate::tensor::{Mode, NoiseSource, Real, Tape, Tensor, Var};

/// Strength schedule β for blending perturbed and clean features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    /// β ramps linearly from 0 to 1 over `fraction` of training, then stays at 1.
    Linear { fraction: f64 },
    /// β held constant.
    Fixed(f64),
}

impl Anneal {
    pub fn beta(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            Anneal::Fixed(beta) => beta,
            Anneal::Linear { fraction } => {
                let ramp = fraction * total_steps as f64;
                if ramp <= 0.0 {
                    1.0
                } else {
                    (step as f64 / ramp).min(1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub enable_noise: bool,
    pub enable_scale: bool,
    pub anneal: Anneal,
    pub mc_samples: usize,
    pub scale_momentum: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            enable_noise: true,
            enable_scale: true,
            anneal: Anneal::Linear { fraction: 0.5 },
            mc_samples: 30,
            scale_momentum: 0.1,
        }
    }
}

impl PerturbConfig {
    /// The unperturbed base model.
    pub fn disabled() -> Self {
        Self { enable_noise: false, enable_scale: false, ..Self::default() }
    }

    pub fn is_active(&self) -> bool {
        self.enable_noise || self.enable_scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        if !(self.scale_momentum > 0.0 && self.scale_momentum < 1.0) {
            return Err(Error::Config("scale_momentum must lie in (0, 1)".into()));
        }
        match self.anneal {
            Anneal::Linear { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(Error::Config("anneal fraction must lie in [0, 1]".into()))
            }
            Anneal::Fixed(beta) if !(0.0..=1.0).contains(&beta) => {
                Err(Error::Config("fixed beta must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Exponential moving average of one insertion point's channel scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEma<T> {
    pub ema: Vec<T>,
    pub update_count: u64,
}

/// Evaluation-time channel scales, keyed by (insertion point, channel count).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningScales<T> {
    pub momentum: T,
    points: BTreeMap<(usize, usize), ScaleEma<T>>,
}

impl<T: Real> RunningScales<T> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum: T::lit(momentum), points: BTreeMap::new() }
    }

    /// Folds a fresh batch of scales in; the first update copies them.
    pub fn update(&mut self, point: usize, scales: &[T]) {
        let m = self.momentum;
        let entry = self
            .points
            .entry((point, scales.len()))
            .or_insert_with(|| ScaleEma { ema: scales.to_vec(), update_count: 0 });
        if entry.update_count > 0 {
            for (e, &s) in entry.ema.iter_mut().zip(scales) {
                *e = (T::one() - m) * *e + m * s;
            }
        }
        entry.update_count += 1;
    }

    pub fn get(&self, point: usize, channels: usize) -> Option<&ScaleEma<T>> {
        self.points.get(&(point, channels))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// C×C×3×3 weight with `λ + γ` on diagonal blocks and `γ` off the diagonal.
pub fn build_equivariant_weight<T: Real>(
    tape: &mut Tape<T>,
    layer: (Var, Var),
    channels: usize,
) -> Result<Var> {
    tape.equivariant_weight(layer.0, layer.1, channels)
}

/// Noise mean μ(h): two shape-preserving equivariant convolutions with a ReLU between.
pub fn mu<T: Real>(tape: &mut Tape<T>, h: Var, phi: &PhiVars) -> Result<Var> {
    let channels = tape.value(h).dims4()?.1;
    let w1 = build_equivariant_weight(tape, phi.layer1, channels)?;
    let a = tape.conv2d(h, w1, 1, 1)?;
    let a = tape.relu(a)?;
    let w2 = build_equivariant_weight(tape, phi.layer2, channels)?;
    tape.conv2d(a, w2, 1, 1)
}

/// `softplus(mean + ε)`.
pub fn noise_from_mean<T: Real>(tape: &mut Tape<T>, mean: Var, noise: &mut NoiseSource<'_>) -> Result<Var> {
    let a = tape.gaussian_sample(mean, noise)?;
    tape.softplus(a)
}

/// Multiplicative noise `z = softplus(a)`, `a ~ N(μ(h), I)`.
pub fn sample_noise<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    phi: &PhiVars,
    noise: &mut NoiseSource<'_>,
) -> Result<Var> {
    let mean = mu(tape, h, phi)?;
    noise_from_mean(tape, mean, noise)
}

/// Per-channel C×10 descriptor: batch mean and population variance of the
/// 4-d pooled descriptor features, then `[log2 C / 8, log2 W / 8]`.
pub fn channel_descriptor<T: Real>(tape: &mut Tape<T>, h: Var, descriptor_kernel: Var) -> Result<Var> {
    let (b, c, hh, w) = tape.value(h).dims4()?;
    if b < 2 {
        return Err(Error::Config("channel descriptor needs a batch of at least 2".into()));
    }
    let planes = tape.reshape(h, &[b * c, 1, hh, w])?;
    let feats = tape.conv2d(planes, descriptor_kernel, 1, 1)?;
    let pooled = tape.global_avg_pool(feats)?;
    let per_sample = tape.reshape(pooled, &[b, c * 4])?;
    let mean = tape.col_mean(per_sample)?;
    let neg_mean = tape.scale(mean, -T::one())?;
    let centered = tape.add_row(per_sample, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.col_mean(sq)?;
    let mean = tape.reshape(mean, &[c, 4])?;
    let var = tape.reshape(var, &[c, 4])?;
    let stats = tape.concat_cols(mean, var)?;
    let info = [T::lit((c as f64).log2() / 8.0), T::lit((w as f64).log2() / 8.0)];
    let info = tape.constant(Tensor::from_fn(vec![c, 2], |i| info[i % 2]));
    tape.concat_cols(stats, info)
}

/// Channel scales `s ∈ (0,1)^C`.
///
/// Train mode computes `sigmoid(descriptor · affine)` from the batch and folds
/// the result into `running` (outside the gradient graph). Eval mode returns
/// the running average as a constant and leaves `running` untouched.
pub fn compute_scales<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    phi: &PhiVars,
    mode: Mode,
    running: &mut RunningScales<T>,
    point: usize,
) -> Result<Var> {
    let c = tape.value(h).dims4()?.1;
    match mode {
        Mode::Train => {
            let desc = channel_descriptor(tape, h, phi.descriptor)?;
            let logits = tape.linear(desc, phi.affine)?;
            let s = tape.sigmoid(logits)?;
            let s = tape.reshape(s, &[c])?;
            running.update(point, tape.value(s).data());
            Ok(s)
        }
        Mode::Eval => {
            let ema = running.get(point, c).ok_or(Error::UninitializedScales(point))?;
            let value = Tensor::new(vec![c], ema.ema.clone())?;
            Ok(tape.constant(value))
        }
    }
}

/// Perturbs the feature map `h`: `(1 − β)·h + β·(h ∘ g)` with `g = s ∘ z`.
///
/// A disabled component is replaced by ones; with both disabled `h` is
/// returned as is.
#[allow(clippy::too_many_arguments)]
pub fn apply_perturbation<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    phi: &PhiVars,
    cfg: &PerturbConfig,
    mode: Mode,
    beta: T,
    running: &mut RunningScales<T>,
    point: usize,
    noise: &mut NoiseSource<'_>,
) -> Result<Var> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::Config(format!("perturbation strength {beta} outside [0, 1]")));
    }
    if !cfg.is_active() {
        return Ok(h);
    }
    let mut perturbed = h;
    if cfg.enable_noise {
        let z = sample_noise(tape, h, phi, noise)?;
        perturbed = tape.mul(perturbed, z)?;
    }
    if cfg.enable_scale {
        let s = compute_scales(tape, h, phi, mode, running, point)?;
        perturbed = tape.mul_channel(perturbed, s)?;
    }
    let clean = tape.scale(h, T::one() - beta)?;
    let perturbed = tape.scale(perturbed, beta)?;
    tape.add(clean, perturbed)
}

/// Row-wise softmax of a B×K matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    debug_assert_eq!(out.numel(), b * k);
    Ok(out)
}

/// Average of softmax(logits) over `samples` stochastic forward passes.
///
/// `forward` is called once per sample and must draw fresh noise itself.
pub fn mc_predict<T: Real>(
    samples: usize,
    mut forward: impl FnMut() -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if samples == 0 {
        return Err(Error::Config("MC prediction needs at least one sample".into()));
    }
    let mut acc = softmax_rows(&forward()?)?;
    for _ in 1..samples {
        let p = softmax_rows(&forward()?)?;
        if p.shape() != acc.shape() {
            return Err(Error::Shape("MC samples disagree in shape".into()));
        }
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, &b)| *a += b);
    }
    let inv = T::one() / T::lit(samples as f64);
    acc.data_mut().iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

#[cfg(test)]
mod tests;
