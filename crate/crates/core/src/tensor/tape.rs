//! Recording tape and reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value; `backpropagate`
//! walks the nodes in reverse. Outputs are checked for NaN/Inf as they are
//! produced.

use super::kernels::{col2im, dot, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, im2col, ConvGeom};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-feature batch statistics produced by training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch has a single row).
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        out_ch: usize,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    WeightedPool {
        x: Var,
        norm_weights: Vec<f64>,
        totals: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
    },
    PairwiseSqDist(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so the list is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that does not receive a gradient (images, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, None, false)
    }

    /// Unnamed differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, None, true)
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push_leaf(t, Some(name.to_string()), true)
    }

    /// Named parameters recorded on this tape, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_deref().map(|name| (name, Var(i))))
    }

    fn push_leaf(&mut self, t: Tensor, name: Option<String>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            name,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            name: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution. `x`: N×C×H×W, `w`: O×C×k×k, `b`: O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let out_ch = ws[0];
        if self.shape(b) != [out_ch] {
            return Err(Error::Shape(format!(
                "conv2d bias {:?} for {out_ch} channels",
                self.shape(b)
            )));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {} stride {stride} on {xs:?}", ws[2])))?;
        let (n, hw) = (xs[0], geom.col_cols());
        let in_size = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; n * out_ch * hw];
        let mut cols = vec![0.0; geom.col_rows() * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                im2col(&xv[s * in_size..(s + 1) * in_size], &geom, &mut cols);
                let o = &mut out[s * out_ch * hw..(s + 1) * out_ch * hw];
                for (c, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(bv[c]);
                }
                gemm_acc(wv, &cols, o, out_ch, geom.col_rows(), hw);
            }
        }
        let value = Tensor::new(vec![n, out_ch, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom, out_ch }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Relu(x), "relu")
    }

    /// N×C×H×W → N×C mean over the spatial grid.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool on {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = hw as f64;
        let data = t
            .data()
            .chunks(hw)
            .map(|cell| {
                let mut acc = 0.0;
                for &v in cell {
                    acc += v;
                }
                acc / count
            })
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push(value, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// N×C×H×W feature maps pooled with per-sample N×H×W weights:
    /// `Σ_i w_i F[:, i] / Σ_i w_i`.
    ///
    /// Weights are first divided by their per-sample maximum. Pooling is
    /// invariant to that rescaling, and it makes any constant weight grid
    /// evaluate to exactly the same floating point operations as
    /// [`Tape::global_avg_pool`].
    pub fn weighted_pool(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 4 || weights.shape() != [s[0], s[2], s[3]] {
            return Err(Error::Shape(format!(
                "weighted_pool features {s:?} weights {:?}",
                weights.shape()
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut norm_weights = Vec::with_capacity(n * hw);
        let mut totals = Vec::with_capacity(n);
        for w in weights.data().chunks(hw) {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::DegenerateWeights("negative or non-finite weight".into()));
            }
            let max = w.iter().cloned().fold(0.0, f64::max);
            if max <= 0.0 {
                return Err(Error::DegenerateWeights("weights sum to zero".into()));
            }
            let start = norm_weights.len();
            norm_weights.extend(w.iter().map(|v| v / max));
            let mut total = 0.0;
            for &v in &norm_weights[start..] {
                total += v;
            }
            totals.push(total);
        }
        let mut data = Vec::with_capacity(n * c);
        for (k, cell) in t.data().chunks(hw).enumerate() {
            let sample = k / c;
            let w = &norm_weights[sample * hw..(sample + 1) * hw];
            let mut acc = 0.0;
            for (f, wi) in cell.iter().zip(w) {
                acc += wi * f;
            }
            data.push(acc / totals[sample]);
        }
        let value = Tensor::new(vec![n, c], data)?;
        self.push(
            value,
            Op::WeightedPool {
                x,
                norm_weights,
                totals,
            },
            "weighted_pool",
        )
    }

    /// Batch norm over the rows of an N×C matrix using batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c) = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                mean[j] += xv[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                let d = xv[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let unbiased = if n > 1 {
            var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
        } else {
            var
        };
        let out = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batchnorm",
        )?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed (running) statistics: a per-feature affine map.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batchnorm running statistics length".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std)?;
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batchnorm",
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::Shape(format!("batchnorm on {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        let t = self.value(x);
        let c = t.shape()[1];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xhat: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let data = xhat.iter().enumerate().map(|(i, h)| g[i % c] * h + b[i % c]).collect();
        Ok((Tensor::new(t.shape().to_vec(), data)?, xhat))
    }

    /// `x`: N×I, `w`: O×I, `b`: O → N×O.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * o_dim);
        for r in 0..n {
            let row = &xv[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                out.push(dot(row, &wv[o * i_dim..(o + 1) * i_dim]) + bv[o]);
            }
        }
        let value = Tensor::new(vec![n, o_dim], out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let (arg, max) =
                row.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) },
                );
            let mut rest = 0.0;
            for (i, &v) in row.iter().enumerate() {
                if i != arg {
                    rest += (v - max).exp();
                }
            }
            let denom = 1.0 + rest;
            for &v in row {
                probs.push((v - max).exp() / denom);
            }
            total += max - row[label] + rest.ln_1p();
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean over all elements of binary cross entropy on `sigmoid(logits)`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(Error::Shape(format!(
                "bce logits {:?} with {} targets",
                z.shape(),
                targets.len()
            )));
        }
        let targets: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let mut total = 0.0;
        for (&v, &t) in z.data().iter().zip(&targets) {
            total += v.max(0.0) - v * t + (-v.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push(value, Op::SigmoidBce { logits, targets }, "sigmoid_bce")
    }

    /// N×C → N×N squared Euclidean distances between rows.
    pub fn pairwise_sq_distances(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("pairwise distances on {s:?}")));
        }
        let n = s[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut acc = 0.0;
                for (a, b) in t.row(i).iter().zip(t.row(j)) {
                    let d = a - b;
                    acc += d * d;
                }
                out[i * n + j] = acc;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        self.push(value, Op::PairwiseSqDist(x), "pairwise_sq_distances")
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of negative value".into()));
        }
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.sqrt()).collect())?;
        self.push(value, Op::Sqrt(x), "sqrt")
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "max", |x, y| if x >= y { x } else { y })?;
        self.push(v, Op::Max(a, b), "max")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push(v, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let mut acc = 0.0;
        for &v in t.data() {
            acc += v;
        }
        let v = Tensor::scalar(acc / t.len() as f64);
        self.push(v, Op::Mean(x), "mean")
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", t.len())));
        }
        let v = Tensor::from_vec(idx.iter().map(|&i| t.data()[i]).collect());
        self.push(v, Op::Gather { x, idx: idx.to_vec() }, "gather")
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Op::Relu(x)
        | Op::GlobalAvgPool(x)
        | Op::PairwiseSqDist(x)
        | Op::Sqrt(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![*x],
        Op::WeightedPool { x, .. } | Op::Gather { x, .. } => vec![*x],
        Op::SoftmaxCe { logits, .. } | Op::SigmoidBce { logits, .. } => vec![*logits],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Max(a, b) => vec![*a, *b],
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    names: Vec<Option<String>>,
}

impl Gradients {
    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for every named parameter, in recording order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|name| (name.clone(), self.wrt(Var(i)))))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass from a scalar `loss`.
pub fn backpropagate(tape: &Tape, loss: Var) -> Result<Gradients> {
    let loss_len = tape.value(loss).len();
    if loss_len != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[loss.0] = Some(vec![1.0]);

    for idx in (0..=loss.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &tape.nodes[idx];
        if !node.requires_grad {
            grads[idx] = Some(g);
            continue;
        }
        let needs = |v: Var| tape.nodes[v.0].requires_grad;
        let len_of = |v: Var| tape.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, out_ch } => {
                let xv = tape.value(*x).data();
                let wv = tape.value(*w).data();
                let batch = tape.value(*x).shape()[0];
                let hw = geom.col_cols();
                let rows = geom.col_rows();
                let in_size = geom.in_ch * geom.in_h * geom.in_w;
                let mut cols = vec![0.0; rows * hw];
                let mut dcols = vec![0.0; rows * hw];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; *out_ch];
                let mut dx = if needs(*x) { vec![0.0; xv.len()] } else { Vec::new() };
                for s in 0..batch {
                    let gy = &g[s * out_ch * hw..(s + 1) * out_ch * hw];
                    if needs(*w) {
                        im2col(&xv[s * in_size..(s + 1) * in_size], geom, &mut cols);
                        gemm_a_bt_acc(gy, &cols, &mut dw, *out_ch, hw, rows);
                    }
                    for (c, chunk) in gy.chunks(hw).enumerate() {
                        let mut acc = 0.0;
                        for &v in chunk {
                            acc += v;
                        }
                        db[c] += acc;
                    }
                    if needs(*x) {
                        dcols.fill(0.0);
                        gemm_at_b_acc(wv, gy, &mut dcols, *out_ch, rows, hw);
                        col2im(&dcols, geom, &mut dx[s * in_size..(s + 1) * in_size]);
                    }
                }
                add_into(&mut grads, *w, &dw, needs(*w));
                add_into(&mut grads, *b, &db, needs(*b));
                add_into(&mut grads, *x, &dx, needs(*x));
            }
            Op::Relu(x) => {
                let xv = tape.value(*x).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::GlobalAvgPool(x) => {
                let s = tape.value(*x).shape();
                let hw = s[2] * s[3];
                let mut d = vec![0.0; len_of(*x)];
                for (k, cell) in d.chunks_mut(hw).enumerate() {
                    cell.fill(g[k] / hw as f64);
                }
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::WeightedPool {
                x,
                norm_weights,
                totals,
            } => {
                let s = tape.value(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut d = vec![0.0; len_of(*x)];
                for (k, cell) in d.chunks_mut(hw).enumerate() {
                    let sample = k / c;
                    let w = &norm_weights[sample * hw..(sample + 1) * hw];
                    for (dv, wi) in cell.iter_mut().zip(w) {
                        *dv = g[k] * wi / totals[sample];
                    }
                }
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = tape.value(*x).shape();
                let (rows, c) = (s[0], s[1]);
                let gam = tape.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        dgamma[j] += g[i] * xhat[i];
                        dbeta[j] += g[i];
                        let dxh = g[i] * gam[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[i];
                    }
                }
                let nf = rows as f64;
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        let dxh = g[i] * gam[j];
                        dx[i] = inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xhat[i] * sum_dxhat_xhat[j]);
                    }
                }
                add_into(&mut grads, *gamma, &dgamma, needs(*gamma));
                add_into(&mut grads, *beta, &dbeta, needs(*beta));
                add_into(&mut grads, *x, &dx, needs(*x));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = tape.value(*x).shape()[1];
                let gam = tape.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = i % c;
                    dgamma[j] += gi * xhat[i];
                    dbeta[j] += gi;
                    dx[i] = gi * gam[j] * inv_std[j];
                }
                add_into(&mut grads, *gamma, &dgamma, needs(*gamma));
                add_into(&mut grads, *beta, &dbeta, needs(*beta));
                add_into(&mut grads, *x, &dx, needs(*x));
            }
            Op::Linear { x, w, b } => {
                let xs = tape.value(*x).shape();
                let (rows, i_dim) = (xs[0], xs[1]);
                let o_dim = tape.value(*w).shape()[0];
                if needs(*x) {
                    let mut dx = vec![0.0; rows * i_dim];
                    gemm_acc(&g, tape.value(*w).data(), &mut dx, rows, o_dim, i_dim);
                    add_into(&mut grads, *x, &dx, true);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; o_dim * i_dim];
                    gemm_at_b_acc(&g, tape.value(*x).data(), &mut dw, rows, o_dim, i_dim);
                    add_into(&mut grads, *w, &dw, true);
                }
                let mut db = vec![0.0; o_dim];
                for r in 0..rows {
                    for o in 0..o_dim {
                        db[o] += g[r * o_dim + o];
                    }
                }
                add_into(&mut grads, *b, &db, needs(*b));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let rows = labels.len();
                let k = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                add_into(&mut grads, *logits, &d, needs(*logits));
            }
            Op::SigmoidBce { logits, targets } => {
                let z = tape.value(*logits).data();
                let scale = g[0] / targets.len() as f64;
                let d: Vec<f64> = z.iter().zip(targets).map(|(&v, &t)| (sigmoid(v) - t) * scale).collect();
                add_into(&mut grads, *logits, &d, needs(*logits));
            }
            Op::PairwiseSqDist(x) => {
                let t = tape.value(*x);
                let (rows, c) = (t.shape()[0], t.shape()[1]);
                let mut d = vec![0.0; rows * c];
                for i in 0..rows {
                    for j in 0..rows {
                        if i == j {
                            continue;
                        }
                        let coef = 2.0 * (g[i * rows + j] + g[j * rows + i]);
                        if coef == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            d[i * c + k] += coef * (t.data()[i * c + k] - t.data()[j * c + k]);
                        }
                    }
                }
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| if yi > 0.0 { gi * 0.5 / yi } else { 0.0 })
                    .collect();
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::Add(a, b) => {
                add_into(&mut grads, *a, &g, needs(*a));
                add_into(&mut grads, *b, &g, needs(*b));
            }
            Op::Sub(a, b) => {
                add_into(&mut grads, *a, &g, needs(*a));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(&mut grads, *b, &neg, needs(*b));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
                let da: Vec<f64> = g.iter().zip(bv).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                add_into(&mut grads, *a, &da, needs(*a));
                add_into(&mut grads, *b, &db, needs(*b));
            }
            Op::Max(a, b) => {
                let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                add_into(&mut grads, *a, &da, needs(*a));
                add_into(&mut grads, *b, &db, needs(*b));
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::AddScalar(x) => add_into(&mut grads, *x, &g, needs(*x)),
            Op::Sum(x) => {
                let d = vec![g[0]; len_of(*x)];
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                let d = vec![g[0] / n as f64; n];
                add_into(&mut grads, *x, &d, needs(*x));
            }
            Op::Gather { x, idx } => {
                if needs(*x) {
                    let n = len_of(*x);
                    let acc = accumulate(&mut grads, *x, n);
                    for (k, &i) in idx.iter().enumerate() {
                        acc[i] += g[k];
                    }
                }
            }
        }
        grads[idx] = Some(g);
    }

    // Only leaves that require gradients are reported; interior values
    // stay available through `wrt` for inspection.
    Ok(Gradients {
        grads,
        shapes: tape.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        names: tape.nodes.iter().map(|n| n.name.clone()).collect(),
    })
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64], wanted: bool) {
    if !wanted {
        return;
    }
    let acc = accumulate(grads, v, d.len());
    for (a, x) in acc.iter_mut().zip(d) {
        *a += x;
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
