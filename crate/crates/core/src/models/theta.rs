use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Block, ModelSpec};
use crate::error::Result;
use crate::tensor::{BatchNormStats, Real, Tape, Tensor, Var};
use crate::Rng;

/// A named trainable tensor. `decay` marks it for weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: bool,
}

/// Task-network parameters θ plus batch-norm running statistics.
///
/// Parameters are stored in the order the forward pass consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams<T> {
    pub params: Vec<Param<T>>,
    pub bn: Vec<BatchNormStats<T>>,
}

/// θ recorded on a tape, aligned with [`ThetaParams::params`].
#[derive(Clone, Debug)]
pub struct ThetaVars {
    pub vars: Vec<Var>,
}

impl ThetaVars {
    /// Same values, but cut from the gradient graph.
    pub fn detached<T: Real>(&self, tape: &mut Tape<T>) -> Self {
        Self { vars: self.vars.iter().map(|&v| tape.stop_gradient(v)).collect() }
    }
}

impl<T: Real> ThetaParams<T> {
    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> ThetaVars {
        ThetaVars { vars: self.params.iter().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect() }
    }

    pub fn cast<U: Real>(&self) -> ThetaParams<U> {
        ThetaParams {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: Tensor::cast(&p.tensor), decay: p.decay })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormStats {
                    running_mean: s.running_mean.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    running_var: s.running_var.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    momentum: U::lit(s.momentum.to_f64_lossy()),
                })
                .collect(),
        }
    }
}

fn kaiming<T: Real>(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
    let std = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let e: f64 = rng.sample(StandardNormal);
        T::lit(e * std)
    })
}

/// Fresh θ for `spec`: fan-in normal initialisation for conv and classifier
/// weights, BN γ = 1 and β = 0, zero classifier bias.
pub fn build_model<T: Real>(spec: &ModelSpec, rng: &mut Rng) -> Result<ThetaParams<T>> {
    let shapes = spec.trace_shapes()?;
    let mut params = Vec::new();
    let mut bn = Vec::new();
    let mut push_bn = |params: &mut Vec<Param<T>>, prefix: &str, c: usize| {
        params.push(Param { name: format!("{prefix}.gamma"), tensor: Tensor::ones(vec![c]), decay: false });
        params.push(Param { name: format!("{prefix}.beta"), tensor: Tensor::zeros(vec![c]), decay: false });
        bn.push(BatchNormStats::new(c));
    };
    let mut cin = spec.input[0];
    for (i, (block, shape)) in spec.blocks.iter().zip(&shapes).enumerate() {
        let cout = shape[0];
        match *block {
            Block::Conv { .. } => {
                params.push(Param {
                    name: format!("block{i}.conv.weight"),
                    tensor: kaiming(rng, vec![cout, cin, 3, 3], cin * 9, 2.0),
                    decay: true,
                });
                push_bn(&mut params, &format!("block{i}.bn"), cout);
            }
            Block::Residual { stride, .. } => {
                params.push(Param {
                    name: format!("block{i}.conv1.weight"),
                    tensor: kaiming(rng, vec![cout, cin, 3, 3], cin * 9, 2.0),
                    decay: true,
                });
                push_bn(&mut params, &format!("block{i}.bn1"), cout);
                params.push(Param {
                    name: format!("block{i}.conv2.weight"),
                    tensor: kaiming(rng, vec![cout, cout, 3, 3], cout * 9, 2.0),
                    decay: true,
                });
                push_bn(&mut params, &format!("block{i}.bn2"), cout);
                if stride != 1 || cin != cout {
                    params.push(Param {
                        name: format!("block{i}.skip.weight"),
                        tensor: kaiming(rng, vec![cout, cin, 1, 1], cin, 2.0),
                        decay: true,
                    });
                }
            }
        }
        cin = cout;
    }
    let dim = spec.feature_dim()?;
    params.push(Param {
        name: "fc.weight".into(),
        tensor: kaiming(rng, vec![spec.num_classes, dim], dim, 1.0),
        decay: true,
    });
    params.push(Param { name: "fc.bias".into(), tensor: Tensor::zeros(vec![spec.num_classes]), decay: false });
    Ok(ThetaParams { params, bn })
}
