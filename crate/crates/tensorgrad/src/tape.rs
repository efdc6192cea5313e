//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are only ever appended after their
//! inputs, so index order is a topological order and [`Tape::backward`] can
//! walk the tape once in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{invalid, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::param::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
        area: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        coef: Vec<f64>,
        log_probs: Vec<f64>,
    },
    Entropy {
        logits: Var,
        coef: Vec<f64>,
        log_probs: Vec<f64>,
        row_entropy: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: F,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[cfg(test)]
thread_local! {
    /// Negative-control hook: halves every ReLU backward contribution.
    pub(crate) static CORRUPT_RELU_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Records a forward computation for later differentiation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Non-parameter leaf whose gradient is still tracked (for probing).
    pub fn watch(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant, true)
    }

    /// Snapshot of a parameter's current value; gradients flow back to `id`.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    /// Cross-correlation of an NCHW input with an `O×C×KH×KW` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return invalid(format!("conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ws));
        }
        if xs[1] != ws[1] {
            return invalid(format!("conv2d channel mismatch: input {:?}, kernel {:?}", xs, ws));
        }
        if stride == 0 {
            return invalid("conv2d stride must be positive");
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > hp || ws[3] > wp {
            return invalid(format!("conv2d kernel {:?} larger than padded input {:?}", ws, xs));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ws[0]] {
                return invalid(format!("conv2d bias shape {:?}, expected [{}]", self.value(b).shape(), ws[0]));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            oh: (hp - ws[2]) / stride + 1,
            ow: (wp - ws[3]) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(input).shape();
        if xs.len() != 4 {
            return invalid(format!("maxpool2d expects NCHW input, got {:?}", xs));
        }
        if window == 0 || stride == 0 {
            return invalid("maxpool2d window and stride must be positive");
        }
        if window > xs[2] || window > xs[3] {
            return invalid(format!("pool window {} larger than input {:?}", window, xs));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            window,
            stride,
            oh: (xs[2] - window) / stride + 1,
            ow: (xs[3] - window) / stride + 1,
        };
        let shape = vec![xs[0], xs[1], geom.oh, geom.ow];
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(input).data());
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg)
    }

    /// `input·weight + bias` for a `B×D` input, `D×K` weight and length-`K` bias.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return invalid(format!(
                "affine shape mismatch: input {:?}, weight {:?}, bias {:?}",
                xs, ws, bs
            ));
        }
        let (b, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(b * k);
        for _ in 0..b {
            out.extend_from_slice(self.value(bias).data());
        }
        F::gemm(
            b,
            d,
            k,
            F::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (k as isize, 1),
            F::one(),
            &mut out,
            (k as isize, 1),
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![b, k], out)?, Op::Affine { input, weight, bias }, rg))
    }

    /// Spatial mean per channel: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        if xs.len() != 4 {
            return invalid(format!("global_avg_pool expects NCHW input, got {:?}", xs));
        }
        let (n, c, area) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = kernels::gap_forward(n * c, area, self.value(input).data());
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { input, area }, rg))
    }

    /// Mask-weighted mean cross-entropy over the rows whose mask is positive.
    ///
    /// Rows with mask 0 contribute neither to the value nor to the gradient;
    /// an all-zero mask yields a loss of exactly 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[f64]) -> Result<Var> {
        let zs = self.value(logits).shape();
        if zs.len() != 2 {
            return invalid(format!("cross-entropy expects B×K logits, got {:?}", zs));
        }
        let (b, k) = (zs[0], zs[1]);
        if labels.len() != b || mask.len() != b {
            return invalid(format!(
                "cross-entropy: {} rows but {} labels and {} mask entries",
                b,
                labels.len(),
                mask.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return invalid(format!("label {} out of range for {} classes", bad, k));
        }
        let coef = mask_coefficients(mask)?;
        let log_probs = kernels::log_softmax_rows(self.value(logits).data(), k);
        let loss: f64 = (0..b)
            .filter(|&i| coef[i] != 0.0)
            .map(|i| -coef[i] * log_probs[i * k + labels[i]])
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(F::from_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                coef,
                log_probs,
            },
            rg,
        ))
    }

    /// Mean Shannon entropy of the row softmax distributions.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let b = self.value(logits).shape().first().copied().unwrap_or(0);
        self.masked_entropy(logits, &vec![1.0; b])
    }

    /// Mask-weighted mean entropy over the rows whose mask is positive.
    pub fn masked_entropy(&mut self, logits: Var, mask: &[f64]) -> Result<Var> {
        let zs = self.value(logits).shape();
        if zs.len() != 2 || zs[0] == 0 {
            return invalid(format!("entropy expects non-empty B×K logits, got {:?}", zs));
        }
        let (b, k) = (zs[0], zs[1]);
        if mask.len() != b {
            return invalid(format!("entropy: {} rows but {} mask entries", b, mask.len()));
        }
        let coef = mask_coefficients(mask)?;
        let log_probs = kernels::log_softmax_rows(self.value(logits).data(), k);
        let row_entropy: Vec<f64> = log_probs
            .chunks(k)
            .map(|row| -row.iter().map(|&lq| lq.exp() * lq).sum::<f64>())
            .collect();
        let value: f64 = row_entropy.iter().zip(&coef).map(|(h, c)| h * c).sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(F::from_f64(value)),
            Op::Entropy {
                logits,
                coef,
                log_probs,
                row_entropy,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return invalid(format!("add shape mismatch: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(F::from_f64(total)), Op::Sum { input }, rg)
    }

    /// Same data, new shape (e.g. flattening `N×C×H×W` to `N×CHW`).
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU
    /// signs, max-pool winners). Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.value(*input).data() {
                        (*v > F::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients of every reached parameter are *added* to `params`; the
    /// per-node gradients are returned for inspection.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<F>) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            if let Op::Param(id) = node.op {
                let p = params.get_mut(id);
                if p.grad.numel() != g.len() {
                    return invalid(format!("parameter {:?} changed shape during the tape", p.name));
                }
                p.grad.data_mut().iter_mut().zip(&g).for_each(|(acc, &v)| *acc += v);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let need = (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b)));
                let out = kernels::conv_backward(geom, cols, self.value(*weight).data(), g, need);
                if let Some(dx) = out.dx {
                    accumulate(grads, *input, &dx);
                }
                if let Some(dw) = out.dw {
                    accumulate(grads, *weight, &dw);
                }
                if let (Some(db), Some(b)) = (out.db, bias) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::MaxPool { input, argmax } => {
                let slot = slot(grads, *input, self.value(*input).numel());
                for (&src, &gv) in argmax.iter().zip(g) {
                    slot[src] += gv;
                }
            }
            Op::Relu { input } => {
                #[allow(unused_mut)]
                let mut pass = F::one();
                #[cfg(test)]
                if CORRUPT_RELU_BACKWARD.with(|c| c.get()) {
                    pass = F::from_f64(0.5);
                }
                let x = self.value(*input).data();
                let slot = slot(grads, *input, x.len());
                for ((acc, &xv), &gv) in slot.iter_mut().zip(x).zip(g) {
                    if xv > F::zero() {
                        *acc += gv * pass;
                    }
                }
            }
            Op::Affine { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (b, d) = (xs[0], xs[1]);
                let k = self.value(*weight).shape()[1];
                if self.rg(*input) {
                    let slot = slot(grads, *input, b * d);
                    F::gemm(
                        b,
                        k,
                        d,
                        F::one(),
                        g,
                        (k as isize, 1),
                        self.value(*weight).data(),
                        (1, k as isize),
                        F::one(),
                        slot,
                        (d as isize, 1),
                    );
                }
                if self.rg(*weight) {
                    let slot = slot(grads, *weight, d * k);
                    F::gemm(
                        d,
                        b,
                        k,
                        F::one(),
                        self.value(*input).data(),
                        (1, d as isize),
                        g,
                        (k as isize, 1),
                        F::one(),
                        slot,
                        (k as isize, 1),
                    );
                }
                if self.rg(*bias) {
                    let db: Vec<F> = (0..k)
                        .map(|j| F::from_f64((0..b).map(|i| g[i * k + j].as_f64()).sum()))
                        .collect();
                    accumulate(grads, *bias, &db);
                }
            }
            Op::GlobalAvgPool { input, area } => {
                let inv = F::from_f64(1.0 / *area as f64);
                let slot = slot(grads, *input, g.len() * area);
                for (p, &gv) in g.iter().enumerate() {
                    slot[p * area..(p + 1) * area].iter_mut().for_each(|v| *v += gv * inv);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                coef,
                log_probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let g0 = g[0].as_f64();
                let slot = slot(grads, *logits, log_probs.len());
                for (i, &c) in coef.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let p = log_probs[i * k + j].exp();
                        let t = if j == labels[i] { 1.0 } else { 0.0 };
                        slot[i * k + j] += F::from_f64(g0 * c * (p - t));
                    }
                }
            }
            Op::Entropy {
                logits,
                coef,
                log_probs,
                row_entropy,
            } => {
                let k = self.value(*logits).shape()[1];
                let g0 = g[0].as_f64();
                let slot = slot(grads, *logits, log_probs.len());
                for (i, &c) in coef.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let lq = log_probs[i * k + j];
                        let d = -lq.exp() * (lq + row_entropy[i]);
                        slot[i * k + j] += F::from_f64(g0 * c * d);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale { input, factor } => {
                let scaled: Vec<F> = g.iter().map(|&v| v * *factor).collect();
                accumulate(grads, *input, &scaled);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                let slot = slot(grads, *input, n);
                slot.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Reshape { input } => accumulate(grads, *input, g),
        }
    }
}

fn mask_coefficients(mask: &[f64]) -> Result<Vec<f64>> {
    if mask.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
        return invalid("mask entries must be finite and non-negative");
    }
    let active = mask.iter().filter(|&&m| m > 0.0).count();
    if active == 0 {
        return Ok(vec![0.0; mask.len()]);
    }
    Ok(mask.iter().map(|&m| m / active as f64).collect())
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, g: &[F]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        empty => *empty = Some(g.to_vec()),
    }
}

/// Per-node gradients from one [`Tape::backward`] sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
