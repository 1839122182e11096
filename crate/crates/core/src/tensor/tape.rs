use rand::Rng as _;
use rand_distr::StandardNormal;

use super::kernels::{conv2d_backward, conv2d_geom, ConvGeom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::Rng;

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch-statistics layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Linear(Var, Var),
    GlobalAvgPool(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    EquivariantWeight { lambda: Var, gamma: Var, channels: usize },
    MulChannel(Var, Var),
    Reshape(Var),
    ColMean(Var),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) | Linear(a, b) | MulChannel(a, b) | AddRow(a, b) | ConcatCols(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddConst(a) | Relu(a) | Softplus(a) | Sigmoid(a) | GlobalAvgPool(a)
            | Reshape(a) | ColMean(a) | Sum(a) | Mean(a) => vec![*a],
            Conv2d { input, weight, .. } => vec![*input, *weight],
            BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            MaxPool2 { input, .. } => vec![*input],
            CrossEntropy { logits, .. } => vec![*logits],
            EquivariantWeight { lambda, gamma, .. } => vec![*lambda, *gamma],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for one reverse sweep.
///
/// Values are owned by the tape; a [`Var`] indexes into it. Operations whose
/// inputs do not require gradients are recorded as constants, so a tape built
/// entirely from constants costs nothing extra to differentiate.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf recorded with `requires_grad`; `None` otherwise.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Adds `f`'s contribution into the gradient slot, allocating it on first use.
fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; gradients are reported for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + offset` where the offset is a constant (no gradient flows into it).
    pub fn add_constant(&mut self, x: Var, offset: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != offset.shape() {
            return shape_err(format!(
                "add_constant: shapes {:?} and {:?} differ",
                vx.shape(),
                offset.shape()
            ));
        }
        let data = vx.data().iter().zip(offset.data()).map(|(&a, &b)| a + b).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_constant", value, Op::AddConst(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `mean + ε` with ε standard normal (or zero), gradient flowing to `mean` only.
    pub fn gaussian_sample(&mut self, mean: Var, noise: &mut NoiseSource<'_>) -> Result<Var> {
        let shape = self.value(mean).shape().to_vec();
        let eps = noise.sample::<T>(shape);
        self.add_constant(mean, &eps)
    }

    /// Forward identity; nothing upstream of the result receives gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(weight), stride, padding)?;
        let value = conv2d_geom(self.value(input), self.value(weight), &geom);
        self.push("conv2d", value, Op::Conv2d { input, weight, geom })
    }

    /// `x · weightᵀ` for `x` B×D and `weight` O×D.
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (b, d) = self.value(x).dims2()?;
        let (o, wd) = self.value(weight).dims2()?;
        if d != wd {
            return shape_err(format!("linear: input width {d} but weight expects {wd}"));
        }
        let mut out = vec![T::zero(); b * o];
        T::gemm(b, d, o, self.value(x).data(), false, self.value(weight).data(), true, &mut out, false);
        self.push("linear", Tensor::new(vec![b, o], out)?, Op::Linear(x, weight))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![b, c], data)?, Op::GlobalAvgPool(x))
    }

    /// Batch normalisation over (B, H, W) per channel.
    ///
    /// In train mode the batch statistics are used (and differentiated
    /// through); when `update_running` is set the running statistics move by
    /// an exponential average with the stats' momentum. Eval mode reads the
    /// running statistics only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        update_running: bool,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return shape_err(format!("batch_norm {name} must have shape [{c}]"));
            }
        }
        if stats.running_mean.len() != c || stats.running_var.len() != c {
            return shape_err(format!("batch_norm running statistics must have {c} channels"));
        }
        if mode == Mode::Train && b < 2 {
            return Err(Error::Config("batch_norm in train mode needs a batch of at least 2".into()));
        }
        let hw = h * w;
        let n = b * hw;
        let eps = T::lit(BN_EPS);
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let planes = (0..b).map(|bi| (bi * c + ch) * hw);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = T::zero();
                    for off in planes.clone() {
                        sum += x[off..off + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / T::lit(n as f64);
                    let mut sq = T::zero();
                    for off in planes.clone() {
                        sq += x[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    let var = sq / T::lit(n as f64);
                    if update_running {
                        let m = stats.momentum;
                        let unbiased = sq / T::lit((n - 1) as f64);
                        stats.running_mean[ch] = (T::one() - m) * stats.running_mean[ch] + m * mean;
                        stats.running_var[ch] = (T::one() - m) * stats.running_var[ch] + m * unbiased;
                    }
                    (mean, var)
                }
                Mode::Eval => (stats.running_mean[ch], stats.running_var[ch]),
            };
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for off in planes {
                for i in off..off + hw {
                    let xh = (x[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        self.push("batch_norm", value, op)
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in row-major order.
    /// An odd trailing row or column is dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h < 2 || w < 2 {
            return shape_err(format!("max_pool2 needs spatial dims of at least 2, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        self.push("max_pool2", value, Op::MaxPool2 { input, argmax })
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return shape_err(format!("cross_entropy: {} labels for batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            total += lse - row[label];
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / T::lit(b as f64));
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", value, op)
    }

    /// Tiles two 3×3 kernels into a C×C×3×3 weight: `lambda + gamma` on the
    /// diagonal blocks, `gamma` everywhere else.
    pub fn equivariant_weight(&mut self, lambda: Var, gamma: Var, channels: usize) -> Result<Var> {
        if channels < 1 {
            return Err(Error::Config("equivariant weight needs at least one channel".into()));
        }
        let (l, g) = (self.value(lambda), self.value(gamma));
        if l.numel() != 9 || g.numel() != 9 {
            return shape_err("equivariant kernels must each hold 3×3 values");
        }
        let mut data = Vec::with_capacity(channels * channels * 9);
        for i in 0..channels {
            for j in 0..channels {
                if i == j {
                    data.extend(l.data().iter().zip(g.data()).map(|(&a, &b)| a + b));
                } else {
                    data.extend_from_slice(g.data());
                }
            }
        }
        let value = Tensor::new(vec![channels, channels, 3, 3], data)?;
        self.push("equivariant_weight", value, Op::EquivariantWeight { lambda, gamma, channels })
    }

    /// Multiplies every (b, c) plane of a B×C×H×W tensor by `scales[c]`.
    pub fn mul_channel(&mut self, x: Var, scales: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(scales).numel() != c {
            return shape_err(format!("mul_channel: need {c} scales, got {}", self.value(scales).numel()));
        }
        let hw = h * w;
        let s = self.value(scales).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(p, plane)| {
                let f = s[p % c];
                plane.iter().map(move |&v| v * f)
            })
            .collect();
        self.push("mul_channel", Tensor::new(vec![b, c, h, w], data)?, Op::MulChannel(x, scales))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Mean over the rows of a B×M matrix, giving a length-M vector.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (b, m) = self.value(x).dims2()?;
        if b == 0 {
            return shape_err("col_mean over zero rows");
        }
        let inv = T::one() / T::lit(b as f64);
        let data = self.value(x).data();
        let out = (0..m).map(|j| (0..b).map(|i| data[i * m + j]).sum::<T>() * inv).collect();
        self.push("col_mean", Tensor::new(vec![m], out)?, Op::ColMean(x))
    }

    /// Adds a length-M row to every row of a B×M matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, m) = self.value(x).dims2()?;
        if self.value(row).numel() != m {
            return shape_err(format!("add_row: row has {} elements, need {m}", self.value(row).numel()));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(m)
            .flat_map(|line| line.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        self.push("add_row", Tensor::new(vec![b, m], data)?, Op::AddRow(x, row))
    }

    /// Horizontal concatenation of N×p and N×q matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.value(a).dims2()?;
        let (nb, q) = self.value(b).dims2()?;
        if n != nb {
            return shape_err(format!("concat_cols: {n} rows vs {nb} rows"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push("concat_cols", Tensor::new(vec![n, p + q], data)?, Op::ConcatCols(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf recorded with `requires_grad` (zeros
    /// when no path reaches it). Values stay readable afterwards, but the
    /// tape accepts no further ops and a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, node, &g, &mut grads);
        }
        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor { shape, data },
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let len = |v: Var| nodes[v.0].value.numel();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(v) {
                    accumulate(&mut grads[v.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if wants(v) {
                    let o = val(other).data();
                    accumulate(&mut grads[v.0], g.len(), |d| {
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(o) {
                            *d += g * o;
                        }
                    });
                }
            }
        }
        Op::Scale(a, c) => {
            accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c));
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(&mut grads[a.0], g.len(), |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            });
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            accumulate(&mut grads[a.0], g.len(), |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d += g * sigmoid(x);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(&mut grads[a.0], g.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (T::one() - y);
                }
            });
        }
        Op::Conv2d { input, weight, geom } => {
            let (dx, dw) = conv2d_backward(val(*input), val(*weight), g, geom, wants(*input), wants(*weight));
            for (v, delta) in [(*input, dx), (*weight, dw)] {
                if let Some(delta) = delta {
                    accumulate(&mut grads[v.0], delta.len(), |d| {
                        d.iter_mut().zip(&delta).for_each(|(d, &x)| *d += x)
                    });
                }
            }
        }
        Op::Linear(x, w) => {
            let (b, dim) = (val(*x).shape()[0], val(*x).shape()[1]);
            let o = val(*w).shape()[0];
            if wants(*x) {
                let wd = val(*w).data();
                accumulate(&mut grads[x.0], b * dim, |d| T::gemm(b, o, dim, g, false, wd, false, d, true));
            }
            if wants(*w) {
                let xd = val(*x).data();
                accumulate(&mut grads[w.0], o * dim, |d| T::gemm(o, b, dim, g, true, xd, false, d, true));
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let hw = s[2] * s[3];
            let inv = T::one() / T::lit(hw as f64);
            accumulate(&mut grads[x.0], len(*x), |d| {
                for (plane, &g) in d.chunks_exact_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|d| *d += g * inv);
                }
            });
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
            let s = val(*input).shape();
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gm = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for p in 0..b * c {
                let ch = p % c;
                for i in p * hw..(p + 1) * hw {
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
            if wants(*input) {
                let n = T::lit((b * hw) as f64);
                accumulate(&mut grads[input.0], b * c * hw, |d| {
                    for p in 0..b * c {
                        let ch = p % c;
                        let k = gm[ch] * inv_std[ch];
                        for i in p * hw..(p + 1) * hw {
                            if *batch_stats {
                                // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                                d[i] += k / n * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            } else {
                                d[i] += k * g[i];
                            }
                        }
                    }
                });
            }
            if wants(*gamma) {
                accumulate(&mut grads[gamma.0], c, |d| d.iter_mut().zip(&dgamma).for_each(|(d, &x)| *d += x));
            }
            if wants(*beta) {
                accumulate(&mut grads[beta.0], c, |d| d.iter_mut().zip(&dbeta).for_each(|(d, &x)| *d += x));
            }
        }
        Op::MaxPool2 { input, argmax } => {
            accumulate(&mut grads[input.0], len(*input), |d| {
                for (&idx, &g) in argmax.iter().zip(g) {
                    d[idx] += g;
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = val(*logits).shape()[1];
            let scale = g[0] / T::lit(labels.len() as f64);
            accumulate(&mut grads[logits.0], probs.len(), |d| {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { T::one() } else { T::zero() };
                        d[i * k + j] += scale * (probs[i * k + j] - target);
                    }
                }
            });
        }
        Op::EquivariantWeight { lambda, gamma, channels } => {
            let c = *channels;
            if wants(*lambda) {
                accumulate(&mut grads[lambda.0], 9, |d| {
                    for i in 0..c {
                        let blk = &g[(i * c + i) * 9..(i * c + i + 1) * 9];
                        d.iter_mut().zip(blk).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            if wants(*gamma) {
                accumulate(&mut grads[gamma.0], 9, |d| {
                    for blk in g.chunks_exact(9) {
                        d.iter_mut().zip(blk).for_each(|(d, &x)| *d += x);
                    }
                });
            }
        }
        Op::MulChannel(x, s) => {
            let shape = val(*x).shape();
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            let sv = val(*s).data();
            if wants(*x) {
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for (p, (dp, gp)) in d.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).enumerate() {
                        let f = sv[p % c];
                        dp.iter_mut().zip(gp).for_each(|(d, &g)| *d += g * f);
                    }
                });
            }
            if wants(*s) {
                let xv = val(*x).data();
                accumulate(&mut grads[s.0], c, |d| {
                    for (p, (xp, gp)) in xv.chunks_exact(hw).zip(g.chunks_exact(hw)).enumerate() {
                        d[p % c] += xp.iter().zip(gp).map(|(&x, &g)| x * g).sum::<T>();
                    }
                });
            }
        }
        Op::ColMean(x) => {
            let (b, m) = (val(*x).shape()[0], val(*x).shape()[1]);
            let inv = T::one() / T::lit(b as f64);
            accumulate(&mut grads[x.0], b * m, |d| {
                for row in d.chunks_exact_mut(m) {
                    row.iter_mut().zip(g).for_each(|(d, &g)| *d += g * inv);
                }
            });
        }
        Op::AddRow(x, r) => {
            let m = val(*r).numel();
            if wants(*x) {
                accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            if wants(*r) {
                accumulate(&mut grads[r.0], m, |d| {
                    for row in g.chunks_exact(m) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                });
            }
        }
        Op::ConcatCols(a, b) => {
            let (n, p) = (val(*a).shape()[0], val(*a).shape()[1]);
            let q = val(*b).shape()[1];
            if wants(*a) {
                accumulate(&mut grads[a.0], n * p, |d| {
                    for i in 0..n {
                        for j in 0..p {
                            d[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[b.0], n * q, |d| {
                    for i in 0..n {
                        for j in 0..q {
                            d[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                });
            }
        }
        Op::Sum(x) => {
            accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(x) => {
            let inv = g[0] / T::lit(len(*x) as f64);
            accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().for_each(|d| *d += inv));
        }
    }
}

/// Source of the standard-normal perturbation ε in reparameterised sampling.
pub enum NoiseSource<'a> {
    Gaussian(&'a mut Rng),
    /// ε ≡ 0; makes sampling deterministic for tests.
    Zero,
}

impl NoiseSource<'_> {
    pub fn sample<T: Real>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        match self {
            NoiseSource::Gaussian(rng) => Tensor::from_fn(shape, |_| {
                let e: f64 = rng.sample(StandardNormal);
                T::lit(e)
            }),
            NoiseSource::Zero => Tensor::zeros(shape),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, NoiseSource::Gaussian(_))
    }
}
