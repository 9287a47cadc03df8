//! Reverse-mode gradient propagation over a recorded sequence of tensor ops.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! leaves copied from a [`ParamStore`]; constant inputs enter through
//! [`Tape::input`]. After the forward pass, [`Tape::backward`] walks the
//! recorded nodes in reverse and returns a gradient for every node, which
//! can then be accumulated into the store's gradient buffers.

use super::dense::{dot, log_sum_exp, softmax_in_place};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MeanRows(Var),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    CosineDistance {
        a: Var,
        b: Var,
        dot: f64,
        norm_a: f64,
        norm_b: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients of one scalar with respect to the leaves (inputs and
/// parameters) of a tape. Interior gradients are released during the sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Records a parameter leaf; repeated calls for the same id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.push(value, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        self.push(value, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        self.push(value, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        self.push(value, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        self.push(value, Op::SoftmaxRows(a), "softmax")
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != n || b.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), g.shape()));
        }
        let mut normed = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                normed.set(r, c, xh);
                out.set(r, c, xh * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), "gelu")
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        self.push(value, Op::MeanRows(a), "mean_rows")
    }

    /// Stacks `count` copies of the `1 x n` row `a`.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let row = self.value(a);
        if row.rows() != 1 || count == 0 {
            return Err(Error::dim("repeat_rows", row.shape(), &[count]));
        }
        let parts = vec![row; count];
        let value = Tensor::concat_rows(&parts)?;
        self.push(value, Op::RepeatRows(a), "repeat_rows")
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(ids)?;
        self.push(value, Op::Gather(table, ids.to_vec()), "gather")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    /// `-log softmax(logits)[target]` for a `1 x n` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.cols() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[target]));
        }
        let row = lv.data();
        let loss = log_sum_exp(row) - row[target];
        let mut probs = row.to_vec();
        softmax_in_place(&mut probs);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            "cross_entropy",
        )
    }

    /// `‖a/‖a‖ − b/‖b‖‖² = 2 − 2·cos(a, b)` over the flattened tensors.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("cosine_distance", av.shape(), bv.shape()));
        }
        let norm_a = av.frobenius_norm();
        let norm_b = bv.frobenius_norm();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(Error::Undefined("normalisation of a zero-norm feature"));
        }
        let d = dot(av.data(), bv.data());
        let value = 2.0 - 2.0 * d / (norm_a * norm_b);
        self.push(
            Tensor::scalar(value),
            Op::CosineDistance {
                a,
                b,
                dot: d,
                norm_a,
                norm_b,
            },
            "cosine_distance",
        )
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", self.value(output).shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::AddRow(a, bias) => {
                    let gb = g.mean_rows()?.scale(g.rows() as f64);
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor))?,
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).rows();
                        accumulate(&mut grads, *p, g.slice_rows(start, len)?)?;
                        start += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let n = src.cols();
                    ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(start, len)?)?;
                        start += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let len = g.cols();
                    for r in 0..src.rows() {
                        ga.row_slice_mut(r)[*start..start + len].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let inner = dot(yr, gr);
                        for (o, (&yv, &gv)) in ga.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (m, n) = (normed.rows(), normed.cols());
                    let gv = self.value(*gain).data();
                    let mut gx = Tensor::zeros(m, n);
                    let mut ggain = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let (xh, gr) = (normed.row_slice(r), g.row_slice(r));
                        for c in 0..n {
                            ggain[c] += gr[c] * xh[c];
                            gbias[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for (c, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    let gain_shape = self.value(*gain).shape().to_vec();
                    let bias_shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gain, Tensor::new(gain_shape, ggain)?)?;
                    accumulate(&mut grads, *bias, Tensor::new(bias_shape, gbias)?)?;
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(xv.data()) {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *o *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let m = src.rows();
                    let row = g.scale(1.0 / m as f64);
                    let parts = vec![&row; m];
                    accumulate(&mut grads, *a, Tensor::concat_rows(&parts)?)?;
                }
                Op::RepeatRows(a) => {
                    let ga = g.mean_rows()?.scale(g.rows() as f64);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Gather(table, ids) => {
                    let src = self.value(*table);
                    let mut gt = Tensor::new(src.shape().to_vec(), vec![0.0; src.len()])?;
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let ga = Tensor::new(src.shape().to_vec(), vec![g.item(); src.len()])?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut d = probs.clone();
                    d[*target] -= 1.0;
                    let scale = g.item();
                    d.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, Tensor::row(d))?;
                }
                Op::CosineDistance {
                    a,
                    b,
                    dot: d,
                    norm_a,
                    norm_b,
                } => {
                    let s = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let nab = norm_a * norm_b;
                    let ga = bv
                        .scale(-2.0 * s / nab)
                        .add(&av.scale(2.0 * s * d / (norm_a * norm_a * nab)))?;
                    let gb = av
                        .scale(-2.0 * s / nab)
                        .add(&bv.scale(2.0 * s * d / (norm_b * norm_b * nab)))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Adds `scale · ∂output/∂θ` into the gradient buffer of every trainable
    /// parameter that appears on the tape.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore, scale: f64) -> Result<()> {
        for &(id, var) in &self.param_vars {
            if !store.get(id).trainable {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                store.accumulate_grad(id, g, scale)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
