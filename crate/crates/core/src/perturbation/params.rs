use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};
use crate::Rng;

/// Number of scalars in [`PhiParams`].
pub const PHI_SCALARS: usize = 2 * (9 + 9) + 36 + 10;

/// One permutation-equivariant convolution: a self-to-self and an
/// all-to-self 3×3 kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivariantLayerParams<T> {
    pub lambda_kernel: [T; 9],
    pub gamma_kernel: [T; 9],
}

/// Two stacked equivariant layers with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseGeneratorParams<T> {
    pub layer1: EquivariantLayerParams<T>,
    pub layer2: EquivariantLayerParams<T>,
}

/// Channel scaler: a shared 1→4 descriptor convolution (applied to each
/// channel separately) and a bias-free 10→1 affine map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalerParams<T> {
    pub descriptor_kernel: [T; 36],
    pub affine_weights: [T; 10],
}

/// The full meta-parameter φ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiParams<T> {
    pub noise: NoiseGeneratorParams<T>,
    pub scaler: ScalerParams<T>,
}

/// φ recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PhiVars {
    pub layer1: (Var, Var),
    pub layer2: (Var, Var),
    pub descriptor: Var,
    pub affine: Var,
}

impl PhiVars {
    pub fn all(&self) -> [Var; 6] {
        [self.layer1.0, self.layer1.1, self.layer2.0, self.layer2.1, self.descriptor, self.affine]
    }
}

impl<T: Real> PhiParams<T> {
    pub fn zeros() -> Self {
        Self::from_flat(&[T::zero(); PHI_SCALARS]).expect("exact length")
    }

    /// Every scalar drawn from U(−0.1, 0.1).
    pub fn init(rng: &mut Rng) -> Self {
        let flat: Vec<T> = (0..PHI_SCALARS).map(|_| T::lit(rng.random_range(-0.1..0.1))).collect();
        Self::from_flat(&flat).expect("exact length")
    }

    pub fn param_count(&self) -> usize {
        PHI_SCALARS
    }

    /// Concatenation in checkpoint order: layer1 λ, layer1 γ, layer2 λ,
    /// layer2 γ, descriptor kernel, affine weights.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(PHI_SCALARS);
        for layer in [&self.noise.layer1, &self.noise.layer2] {
            out.extend_from_slice(&layer.lambda_kernel);
            out.extend_from_slice(&layer.gamma_kernel);
        }
        out.extend_from_slice(&self.scaler.descriptor_kernel);
        out.extend_from_slice(&self.scaler.affine_weights);
        out
    }

    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if flat.len() != PHI_SCALARS {
            return Err(Error::Format(format!(
                "perturbation parameters need {PHI_SCALARS} scalars, got {}",
                flat.len()
            )));
        }
        let take = |range: std::ops::Range<usize>| flat[range].to_vec();
        let arr9 = |r| -> [T; 9] { take(r).try_into().expect("9") };
        Ok(Self {
            noise: NoiseGeneratorParams {
                layer1: EquivariantLayerParams { lambda_kernel: arr9(0..9), gamma_kernel: arr9(9..18) },
                layer2: EquivariantLayerParams { lambda_kernel: arr9(18..27), gamma_kernel: arr9(27..36) },
            },
            scaler: ScalerParams {
                descriptor_kernel: take(36..72).try_into().expect("36"),
                affine_weights: take(72..82).try_into().expect("10"),
            },
        })
    }

    pub fn cast<U: Real>(&self) -> PhiParams<U> {
        let flat: Vec<U> = self.to_flat().into_iter().map(|v| U::lit(v.to_f64_lossy())).collect();
        PhiParams::from_flat(&flat).expect("exact length")
    }

    /// Records φ on `tape`; with `requires_grad = false` φ is a constant of the graph.
    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> PhiVars {
        let mut leaf = |shape: Vec<usize>, data: &[T]| {
            tape.leaf(Tensor::new(shape, data.to_vec()).expect("fixed shape"), requires_grad)
        };
        let l1 = &self.noise.layer1;
        let l2 = &self.noise.layer2;
        PhiVars {
            layer1: (leaf(vec![3, 3], &l1.lambda_kernel), leaf(vec![3, 3], &l1.gamma_kernel)),
            layer2: (leaf(vec![3, 3], &l2.lambda_kernel), leaf(vec![3, 3], &l2.gamma_kernel)),
            descriptor: leaf(vec![4, 1, 3, 3], &self.scaler.descriptor_kernel),
            affine: leaf(vec![1, 10], &self.scaler.affine_weights),
        }
    }

    /// Collects the gradient of every φ block; blocks without a gradient are zero.
    pub fn from_gradients(grads: &Gradients<T>, vars: &PhiVars) -> Self {
        let mut flat = Vec::with_capacity(PHI_SCALARS);
        for (var, n) in vars.all().into_iter().zip([9, 9, 9, 9, 36, 10]) {
            match grads.get(var) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(T::zero(), n)),
            }
        }
        Self::from_flat(&flat).expect("exact length")
    }
}
