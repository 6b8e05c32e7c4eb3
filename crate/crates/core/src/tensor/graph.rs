use super::conv::{self, ConvGeom};
use super::ops;
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Indices follow creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2x(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    ConcatChannels(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    SliceBatch {
        input: Var,
        index: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulChannelBroadcast {
        input: Var,
        gate: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Tape of tensor operations.
///
/// Nodes are appended in creation order, which is a valid topological order;
/// [`Graph::backward`] walks it in reverse and visits every node once.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) kink_hash: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fingerprint of every piecewise-linear branch taken so far (ReLU signs,
    /// max-pool winners). Two evaluations with equal fingerprints lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub(crate) fn mix_kinks(&mut self, word: u64) {
        let mut h = self.kink_hash ^ word;
        h = h.wrapping_mul(0x100_0000_01b3);
        h ^= h >> 29;
        self.kink_hash = h;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut p = vec![input, weight];
                p.extend(bias);
                p
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Upsample2x(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::MaxPool2x2 { input, .. }
            | Op::Dropout { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::SliceBatch { input, .. } => vec![input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::ConcatChannels(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![a, b],
            Op::MulChannelBroadcast { input, gate } => vec![input, gate],
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
            if !dy.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            grads[idx] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (batch, ..) = self.nodes[input.0].value.dims4()?;
                let need = (wants(*input), wants(*weight), bias.is_some_and(wants));
                let g = conv::backward(val(*input), batch, val(*weight), dy, geom, need);
                if let Some(dx) = g.input {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = g.weight {
                    accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = val(*a)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| g * ops::sigmoid_scalar(x))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut d = vec![T::zero(); self.nodes[input.0].value.len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    d[src as usize] = d[src as usize] + g;
                }
                accumulate(grads, *input, d);
            }
            Op::Upsample2x(a) => {
                let d = ops::upsample2x_backward(self.nodes[a.0].value.shape(), dy)?;
                accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let g = ops::batch_norm_backward(shape, val(*gamma), xhat, inv_std, *batch_stats, dy)?;
                if wants(*input) {
                    accumulate(grads, *input, g.input);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, g.gamma);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, g.beta);
                }
            }
            Op::Dropout { input, mask } => {
                let d = mask.iter().zip(dy).map(|(&m, &g)| m * g).collect();
                accumulate(grads, *input, d);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4()?;
                let (_, cb, _, _) = self.nodes[b.0].value.dims4()?;
                let (plane_a, plane_b) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * plane_a);
                let mut db = Vec::with_capacity(n * plane_b);
                for chunk in dy.chunks(plane_a + plane_b) {
                    da.extend_from_slice(&chunk[..plane_a]);
                    db.extend_from_slice(&chunk[plane_a..]);
                }
                if wants(*a) {
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
                let (_, co, _, _) = node.value.dims4()?;
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * co * plane;
                    d[dst..dst + co * plane].copy_from_slice(&dy[src..src + co * plane]);
                }
                accumulate(grads, *input, d);
            }
            Op::SliceBatch { input, index } => {
                let total = self.nodes[input.0].value.len();
                let mut d = vec![T::zero(); total];
                let stride = dy.len();
                d[index * stride..(index + 1) * stride].copy_from_slice(dy);
                accumulate(grads, *input, d);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = val(*b).iter().zip(dy).map(|(&y, &g)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = val(*a).iter().zip(dy).map(|(&x, &g)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let d = val(*b).iter().zip(dy).map(|(&y, &g)| g / y).collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = val(*a)
                        .iter()
                        .zip(val(*b))
                        .zip(dy)
                        .map(|((&x, &y), &g)| -g * x / (y * y))
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::MulChannelBroadcast { input, gate } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
                let plane = h * w;
                let x = val(*input);
                let gv = val(*gate);
                if wants(*input) {
                    let mut d = Vec::with_capacity(x.len());
                    for b in 0..n {
                        let gp = &gv[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            d.extend(dy[off..off + plane].iter().zip(gp).map(|(&g, &s)| g * s));
                        }
                    }
                    accumulate(grads, *input, d);
                }
                if wants(*gate) {
                    let mut d = vec![0.0f64; n * plane];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                d[b * plane + p] += (dy[off + p] * x[off + p]).as_f64();
                            }
                        }
                    }
                    accumulate(grads, *gate, d.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Scale(a, c) => {
                let c = T::from_f64(*c);
                accumulate(grads, *a, dy.iter().map(|&g| g * c).collect());
            }
            Op::AddScalar(a) => accumulate(grads, *a, dy.to_vec()),
            Op::Powf(a, e) => {
                let e = T::from_f64(*e);
                let d = val(*a)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| g * e * x.powf(e - T::one()))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(grads, *a, vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let g = T::from_f64(dy[0].as_f64() / n as f64);
                accumulate(grads, *a, vec![g; n]);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
