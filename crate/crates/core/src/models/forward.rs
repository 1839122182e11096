use super::{Block, ModelSpec, ThetaVars};
use crate::error::{shape_err, Error, Result};
use crate::perturbation::{apply_perturbation, PerturbConfig, PhiVars, RunningScales};
use crate::tensor::{BatchNormStats, Mode, NoiseSource, Real, Tape, Var};

/// Everything the perturbation needs at an insertion point.
pub struct PerturbCtx<'a, 'n, T> {
    pub phi: &'a PhiVars,
    pub cfg: &'a PerturbConfig,
    pub beta: T,
    pub scales: &'a mut RunningScales<T>,
    pub noise: NoiseSource<'n>,
}

pub struct Forward<'a, 'n, T> {
    pub mode: Mode,
    /// Whether train-mode batch norm moves its running statistics.
    pub update_bn: bool,
    /// `None` runs the plain network.
    pub perturb: Option<PerturbCtx<'a, 'n, T>>,
}

impl<T: Real> Forward<'_, '_, T> {
    pub fn plain(mode: Mode) -> Self {
        Self { mode, update_bn: mode == Mode::Train, perturb: None }
    }
}

/// Logits (B×classes) of the network described by `spec`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    theta: &ThetaVars,
    bn: &mut [BatchNormStats<T>],
    x: Var,
    ctx: &mut Forward<'_, '_, T>,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if [c, h, w] != spec.input {
        return shape_err(format!("model expects input {:?}, got {:?}", spec.input, [c, h, w]));
    }
    let points = spec.insertion_points();
    let mut params = theta.vars.iter().copied();
    let mut next = || params.next().ok_or_else(|| Error::Shape("θ has fewer tensors than the model needs".into()));
    let mut stats = bn.iter_mut();
    let mut next_stats = || stats.next().ok_or_else(|| Error::Shape("missing batch-norm statistics".into()));
    let (mode, update_bn) = (ctx.mode, ctx.update_bn);
    let mut h = x;
    for (i, block) in spec.blocks.iter().enumerate() {
        let pre_activation = match *block {
            Block::Conv { .. } => {
                let y = tape.conv2d(h, next()?, 1, 1)?;
                let (g, b) = (next()?, next()?);
                tape.batch_norm(y, g, b, next_stats()?, mode, update_bn)?
            }
            Block::Residual { stride, .. } => {
                let y = tape.conv2d(h, next()?, stride, 1)?;
                let (g, b) = (next()?, next()?);
                let y = tape.batch_norm(y, g, b, next_stats()?, mode, update_bn)?;
                let y = tape.relu(y)?;
                let y = tape.conv2d(y, next()?, 1, 1)?;
                let (g, b) = (next()?, next()?);
                let y = tape.batch_norm(y, g, b, next_stats()?, mode, update_bn)?;
                let in_c = tape.value(h).shape()[1];
                let out_c = tape.value(y).shape()[1];
                let skip = if stride != 1 || in_c != out_c { tape.conv2d(h, next()?, stride, 0)? } else { h };
                tape.add(y, skip)?
            }
        };
        let pre_activation = match ctx.perturb.as_mut() {
            Some(p) if points[i] => apply_perturbation(
                tape,
                pre_activation,
                p.phi,
                p.cfg,
                mode,
                p.beta,
                p.scales,
                i,
                &mut p.noise,
            )?,
            _ => pre_activation,
        };
        h = tape.relu(pre_activation)?;
        if let Block::Conv { pool: true, .. } = block {
            h = tape.max_pool2(h)?;
        }
    }
    let features = if spec.has_residual() {
        tape.global_avg_pool(h)?
    } else {
        let v = tape.value(h);
        let b = v.shape()[0];
        let d = v.numel() / b.max(1);
        tape.reshape(h, &[b, d])?
    };
    let logits = tape.linear(features, next()?)?;
    let logits = tape.add_row(logits, next()?)?;
    if next().is_ok() {
        return shape_err("θ has more tensors than the model uses");
    }
    Ok(logits)
}
