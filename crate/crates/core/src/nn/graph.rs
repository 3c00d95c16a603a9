//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Ops evaluate eagerly and append a node holding their output and whatever
//! the backward pass needs. Only the coarse ops this architecture uses
//! exist, each with a hand-written adjoint. A graph built with
//! [`Graph::inference`] records no intermediates.

use super::kernels::{add_col_sums, add_row_bias, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are floored at this value before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
        len_in: usize,
        len_out: usize,
        pad: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// batch statistics (train) or fixed running statistics (eval)
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    TimeStep {
        x: usize,
        len: usize,
        step: usize,
    },
    GruCell {
        x: usize,
        h: usize,
        w_ih: usize,
        w_hh: usize,
        b_ih: usize,
        b_hh: usize,
        r: Vec<T>,
        z: Vec<T>,
        n: Vec<T>,
        hn: Vec<T>,
    },
    DotConst {
        x: usize,
        weights: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimator used for running statistics.
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A graph that only evaluates.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`. `None` for
    /// nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// `y = x w^T + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                "x [N, I], w [O, I], b [O]",
                format!("{xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * o];
        gemm(false, true, n, i, o, self.data(x), self.data(w), T::zero(), &mut y);
        add_row_bias(&mut y, self.data(b));
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(vec![n, o], y)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            needs,
        ))
    }

    /// Cross-correlation along time with stride 1 and symmetric zero padding.
    /// `x: [B, L, C_in]`, `w: [C_out, C_in, K]`, `b: [C_out]`, output
    /// `[B, L + 2 pad - K + 1, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "conv1d",
                "x [B, L, C_in], w [C_out, C_in, K], b [C_out]",
                format!("{xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (batch, len_in, c_in) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if len_in + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("length >= {}", k - 2 * pad), len_in));
        }
        let len_out = len_in + 2 * pad - k + 1;
        let cols = im2col(self.data(x), batch, len_in, len_out, c_in, k, pad);
        let rows = batch * len_out;
        let mut y = vec![T::zero(); rows * c_out];
        gemm(false, true, rows, c_in * k, c_out, &cols, self.data(w), T::zero(), &mut y);
        add_row_bias(&mut y, self.data(b));
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        let keep_cols = needs && self.grad_enabled && self.needs(w.0);
        Ok(self.push(
            Tensor::new(vec![batch, len_out, c_out], y)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                batch,
                len_in,
                len_out,
                pad,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            needs,
        ))
    }

    /// Batch normalization over every axis but the last, using the batch's
    /// own statistics. Returns the output and the batch mean / unbiased
    /// variance for updating running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let c = self.check_bn_shapes(x, gamma, beta)?;
        let data = self.data(x);
        let rows = data.len() / c;
        if rows == 0 {
            return Err(Error::shape("batch_norm", "at least one row", 0));
        }
        let rows_t = T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); c];
        add_col_sums(&mut mean, data);
        mean.iter_mut().for_each(|m| *m /= rows_t);
        let mut var = vec![T::zero(); c];
        for row in data.chunks_exact(c) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = *x - *m;
                *v += d * d;
            }
        }
        let unbiased_div = if rows > 1 { rows_t - T::one() } else { T::one() };
        let unbiased: Vec<T> = var.iter().map(|v| *v / unbiased_div).collect();
        var.iter_mut().for_each(|v| *v /= rows_t);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_bn_shapes(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", c, running_mean.len()));
        }
        let inv_std = running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn check_bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let xs = self.shape(x);
        let c = *xs.last().unwrap_or(&0);
        if xs.len() < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("scale/shift of length {c}"),
                format!("{:?}, {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(c)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let c = mean.len();
        let data = self.data(x);
        let mut xhat = Vec::with_capacity(data.len());
        for row in data.chunks_exact(c) {
            for ((v, m), s) in row.iter().zip(mean).zip(&inv_std) {
                xhat.push((*v - *m) * *s);
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * *g + *b;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        let keep = needs && self.grad_enabled;
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: if keep { xhat } else { Vec::new() },
                inv_std: if keep { inv_std } else { Vec::new() },
                batch_stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(T::zero())).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x.0);
        Ok(self.push(out, Op::Relu { x: x.0 }, needs))
    }

    /// Slice `[B, L, C] -> [B, C]` at time `step`.
    pub fn time_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || step >= xs[1] {
            return Err(Error::shape("time_step", format!("[B, L > {step}, C]"), format!("{xs:?}")));
        }
        let (batch, len, c) = (xs[0], xs[1], xs[2]);
        let data = self.data(x);
        let mut out = Vec::with_capacity(batch * c);
        for b in 0..batch {
            let off = (b * len + step) * c;
            out.extend_from_slice(&data[off..off + c]);
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(vec![batch, c], out)?,
            Op::TimeStep { x: x.0, len, step },
            needs,
        ))
    }

    /// One GRU step with gates stacked `[reset, update, candidate]`:
    ///
    /// ```text
    /// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    /// z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    /// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// `x: [B, I]`, `h: [B, H]`, `w_ih: [3H, I]`, `w_hh: [3H, H]`,
    /// `b_ih, b_hh: [3H]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var> {
        let (xs, hs) = (self.shape(x), self.shape(h));
        let (wis, whs) = (self.shape(w_ih), self.shape(w_hh));
        let ok = xs.len() == 2
            && hs.len() == 2
            && xs[0] == hs[0]
            && wis.len() == 2
            && whs.len() == 2
            && wis[0] == 3 * hs[1]
            && wis[1] == xs[1]
            && whs[0] == 3 * hs[1]
            && whs[1] == hs[1]
            && self.shape(b_ih) == [3 * hs[1]]
            && self.shape(b_hh) == [3 * hs[1]];
        if !ok {
            return Err(Error::shape(
                "gru_cell",
                "x [B, I], h [B, H], w_ih [3H, I], w_hh [3H, H], biases [3H]",
                format!("{xs:?}, {hs:?}, {wis:?}, {whs:?}"),
            ));
        }
        let (batch, input, hidden) = (xs[0], xs[1], hs[1]);
        let g3 = 3 * hidden;
        let mut gi = vec![T::zero(); batch * g3];
        gemm(false, true, batch, input, g3, self.data(x), self.data(w_ih), T::zero(), &mut gi);
        add_row_bias(&mut gi, self.data(b_ih));
        let mut gh = vec![T::zero(); batch * g3];
        gemm(false, true, batch, hidden, g3, self.data(h), self.data(w_hh), T::zero(), &mut gh);
        add_row_bias(&mut gh, self.data(b_hh));

        let hd = self.data(h);
        let n_el = batch * hidden;
        let (mut r, mut z, mut n, mut hn) = (
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
        );
        let mut out = Vec::with_capacity(n_el);
        for b in 0..batch {
            let gi_row = &gi[b * g3..(b + 1) * g3];
            let gh_row = &gh[b * g3..(b + 1) * g3];
            for j in 0..hidden {
                let rj = sigmoid(gi_row[j] + gh_row[j]);
                let zj = sigmoid(gi_row[hidden + j] + gh_row[hidden + j]);
                let hnj = gh_row[2 * hidden + j];
                let nj = (gi_row[2 * hidden + j] + rj * hnj).tanh();
                out.push((T::one() - zj) * nj + zj * hd[b * hidden + j]);
                r.push(rj);
                z.push(zj);
                n.push(nj);
                hn.push(hnj);
            }
        }
        let needs = [x, h, w_ih, w_hh, b_ih, b_hh].iter().any(|v| self.needs(v.0));
        let keep = needs && self.grad_enabled;
        let drop_if = |v: Vec<T>| if keep { v } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![batch, hidden], out)?,
            Op::GruCell {
                x: x.0,
                h: h.0,
                w_ih: w_ih.0,
                w_hh: w_hh.0,
                b_ih: b_ih.0,
                b_hh: b_hh.0,
                r: drop_if(r),
                z: drop_if(z),
                n: drop_if(n),
                hn: drop_if(hn),
            },
            needs,
        ))
    }

    /// Scalar `sum_i x_i * weights_i` for fixed weights; a way to probe
    /// gradients of non-scalar nodes.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.nodes[x.0].value.len() {
            return Err(Error::shape("dot_const", self.nodes[x.0].value.len(), weights.len()));
        }
        let v = self.data(x).iter().zip(&weights).fold(T::zero(), |a, (x, w)| a + *x * *w);
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x: x.0, weights }, needs))
    }

    /// Mean over the batch of `-ln(max(softmax(logits)[label], floor))`.
    /// `logits: [B, M]`, one label per row. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", format!("[{}, M]", labels.len()), format!("{ls:?}")));
        }
        let m = ls[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::shape("softmax_cross_entropy", format!("labels < {m}"), bad));
        }
        let probs = softmax_rows(self.data(logits), m);
        let floor = T::lit(PROB_FLOOR);
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_exact(m).zip(labels) {
            loss -= row[l].max(floor).ln();
        }
        loss /= T::from_usize(labels.len()).unwrap();
        let needs = self.needs(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs: if needs && self.grad_enabled { probs } else { Vec::new() },
            },
            needs,
        ))
    }

    /// Propagate gradients of the scalar `loss` to every node that needs
    /// them. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::InvalidConfig("backward on an inference graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "scalar loss", self.nodes[loss.0].value.len()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].needs_grad;
        let len_of = |i: usize| nodes[i].value.len();
        let add_into = |grads: &mut [Option<Vec<T>>], i: usize, v: &[T]| {
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); len_of(i)]);
            for (a, b) in buf.iter_mut().zip(v) {
                *a += *b;
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &i in [a, b] {
                    if needs(i) {
                        add_into(grads, i, g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (nodes[*x].value.shape(), nodes[*w].value.shape());
                let (n, i_dim, o) = (xs[0], xs[1], ws[0]);
                if needs(*x) {
                    let buf = grads[*x].get_or_insert_with(|| vec![T::zero(); n * i_dim]);
                    gemm(false, false, n, o, i_dim, g, nodes[*w].value.data(), T::one(), buf);
                }
                if needs(*w) {
                    let buf = grads[*w].get_or_insert_with(|| vec![T::zero(); o * i_dim]);
                    gemm(true, false, o, n, i_dim, g, nodes[*x].value.data(), T::one(), buf);
                }
                if needs(*b) {
                    let buf = grads[*b].get_or_insert_with(|| vec![T::zero(); o]);
                    add_col_sums(buf, g);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len_in,
                len_out,
                pad,
                cols,
            } => {
                let ws = nodes[*w].value.shape();
                let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
                let rows = batch * len_out;
                if needs(*w) {
                    let buf = grads[*w].get_or_insert_with(|| vec![T::zero(); c_out * c_in * k]);
                    gemm(true, false, c_out, rows, c_in * k, g, cols, T::one(), buf);
                }
                if needs(*b) {
                    let buf = grads[*b].get_or_insert_with(|| vec![T::zero(); c_out]);
                    add_col_sums(buf, g);
                }
                if needs(*x) {
                    let mut dcols = vec![T::zero(); rows * c_in * k];
                    gemm(false, false, rows, c_out, c_in * k, g, nodes[*w].value.data(), T::zero(), &mut dcols);
                    let dx = grads[*x].get_or_insert_with(|| vec![T::zero(); len_of(*x)]);
                    col2im_add(&dcols, dx, *batch, *len_in, *len_out, c_in, k, *pad);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gam = nodes[*gamma].value.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] += grow[j];
                        sum_dy_xhat[j] += grow[j] * xrow[j];
                    }
                }
                if needs(*gamma) {
                    add_into(grads, *gamma, &sum_dy_xhat);
                }
                if needs(*beta) {
                    add_into(grads, *beta, &sum_dy);
                }
                if needs(*x) {
                    let rows_t = T::from_usize(rows).unwrap();
                    let buf = grads[*x].get_or_insert_with(|| vec![T::zero(); rows * c]);
                    for ((brow, grow), xrow) in buf
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let scale = gam[j] * inv_std[j];
                            brow[j] += if *batch_stats {
                                scale * (grow[j] - sum_dy[j] / rows_t - xrow[j] * sum_dy_xhat[j] / rows_t)
                            } else {
                                scale * grow[j]
                            };
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let y = nodes[idx].value.data();
                    let buf = grads[*x].get_or_insert_with(|| vec![T::zero(); y.len()]);
                    for ((a, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        if *yv > T::zero() {
                            *a += *gv;
                        }
                    }
                }
            }
            Op::TimeStep { x, len, step } => {
                if needs(*x) {
                    let c = nodes[idx].value.shape()[1];
                    let batch = nodes[idx].value.shape()[0];
                    let buf = grads[*x].get_or_insert_with(|| vec![T::zero(); batch * len * c]);
                    for bi in 0..batch {
                        let off = (bi * len + step) * c;
                        for j in 0..c {
                            buf[off + j] += g[bi * c + j];
                        }
                    }
                }
            }
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                r,
                z,
                n,
                hn,
            } => {
                let hs = nodes[*h].value.shape();
                let (batch, hidden) = (hs[0], hs[1]);
                let input = nodes[*x].value.shape()[1];
                let g3 = 3 * hidden;
                let hd = nodes[*h].value.data();
                let mut dgi = vec![T::zero(); batch * g3];
                let mut dgh = vec![T::zero(); batch * g3];
                let mut dh_direct = vec![T::zero(); batch * hidden];
                for bi in 0..batch {
                    for j in 0..hidden {
                        let e = bi * hidden + j;
                        let (rj, zj, nj) = (r[e], z[e], n[e]);
                        let dz = g[e] * (hd[e] - nj);
                        let dn = g[e] * (T::one() - zj);
                        dh_direct[e] = g[e] * zj;
                        let dn_pre = dn * (T::one() - nj * nj);
                        let dr_pre = dn_pre * hn[e] * rj * (T::one() - rj);
                        let dz_pre = dz * zj * (T::one() - zj);
                        let row = bi * g3;
                        dgi[row + j] = dr_pre;
                        dgi[row + hidden + j] = dz_pre;
                        dgi[row + 2 * hidden + j] = dn_pre;
                        dgh[row + j] = dr_pre;
                        dgh[row + hidden + j] = dz_pre;
                        dgh[row + 2 * hidden + j] = dn_pre * rj;
                    }
                }
                if needs(*x) {
                    let buf = grads[*x].get_or_insert_with(|| vec![T::zero(); batch * input]);
                    gemm(false, false, batch, g3, input, &dgi, nodes[*w_ih].value.data(), T::one(), buf);
                }
                if needs(*w_ih) {
                    let buf = grads[*w_ih].get_or_insert_with(|| vec![T::zero(); g3 * input]);
                    gemm(true, false, g3, batch, input, &dgi, nodes[*x].value.data(), T::one(), buf);
                }
                if needs(*b_ih) {
                    let buf = grads[*b_ih].get_or_insert_with(|| vec![T::zero(); g3]);
                    add_col_sums(buf, &dgi);
                }
                if needs(*h) {
                    let buf = grads[*h].get_or_insert_with(|| vec![T::zero(); batch * hidden]);
                    for (a, d) in buf.iter_mut().zip(&dh_direct) {
                        *a += *d;
                    }
                    gemm(false, false, batch, g3, hidden, &dgh, nodes[*w_hh].value.data(), T::one(), buf);
                }
                if needs(*w_hh) {
                    let buf = grads[*w_hh].get_or_insert_with(|| vec![T::zero(); g3 * hidden]);
                    gemm(true, false, g3, batch, hidden, &dgh, hd, T::one(), buf);
                }
                if needs(*b_hh) {
                    let buf = grads[*b_hh].get_or_insert_with(|| vec![T::zero(); g3]);
                    add_col_sums(buf, &dgh);
                }
            }
            Op::DotConst { x, weights } => {
                if needs(*x) {
                    let scaled: Vec<T> = weights.iter().map(|w| *w * g[0]).collect();
                    add_into(grads, *x, &scaled);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let m = nodes[*logits].value.shape()[1];
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let floor = T::lit(PROB_FLOOR);
                    let buf = grads[*logits].get_or_insert_with(|| vec![T::zero(); probs.len()]);
                    for ((brow, prow), &l) in buf.chunks_exact_mut(m).zip(probs.chunks_exact(m)).zip(labels) {
                        // inside the floor the loss is flat in the logits
                        if prow[l] < floor {
                            continue;
                        }
                        for j in 0..m {
                            let target = if j == l { T::one() } else { T::zero() };
                            brow[j] += scale * (prow[j] - target);
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(m) {
        let max = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        let start = out.len();
        let mut sum = T::zero();
        for v in row {
            let e = (*v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    k: usize,
    pad: usize,
) -> Vec<T> {
    let width = c_in * k;
    let mut cols = vec![T::zero(); batch * len_out * width];
    for b in 0..batch {
        for t in 0..len_out {
            let row = &mut cols[(b * len_out + t) * width..(b * len_out + t + 1) * width];
            for kk in 0..k {
                let src = t + kk;
                if src < pad || src - pad >= len_in {
                    continue;
                }
                let xrow = &x[(b * len_in + src - pad) * c_in..(b * len_in + src - pad + 1) * c_in];
                for (c, v) in xrow.iter().enumerate() {
                    row[c * k + kk] = *v;
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dcols: &[T],
    dx: &mut [T],
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    k: usize,
    pad: usize,
) {
    let width = c_in * k;
    for b in 0..batch {
        for t in 0..len_out {
            let row = &dcols[(b * len_out + t) * width..(b * len_out + t + 1) * width];
            for kk in 0..k {
                let src = t + kk;
                if src < pad || src - pad >= len_in {
                    continue;
                }
                let off = (b * len_in + src - pad) * c_in;
                for c in 0..c_in {
                    dx[off + c] += row[c * k + kk];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Compare tape gradients against central differences on up to `per`
    /// random coordinates of every input. `f` maps the input vars to a
    /// scalar loss.
    fn check(
        inputs: Vec<Tensor<f64>>,
        per: usize,
        seed: u64,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| g.grad(*v).map_or(vec![0.0; t.len()], |x| x.to_vec()))
            .collect();
        let eval = |ts: &[Tensor<f64>]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let l = f(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for (ti, t) in inputs.iter().enumerate() {
            for _ in 0..per.min(t.len()) {
                let j = rng.random_range(0..t.len());
                let mut plus = inputs.clone();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = grads[ti][j];
                let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sigmoid_chain_matches_closed_form() {
        // one-unit GRU whose only nonzero weight feeds the update gate: h' = sigmoid(w x) * h
        let (w, x) = (0.7f64, -1.3f64);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let wi = g.param(Tensor::new(vec![3, 1], vec![0.0, w, 0.0]).unwrap());
        let wh = g.param(Tensor::zeros(vec![3, 1]));
        let bi = g.param(Tensor::zeros(vec![3]));
        let bh = g.param(Tensor::zeros(vec![3]));
        let y = g.gru_cell(xv, h, wi, wh, bi, bh).unwrap();
        let s = 1.0 / (1.0 + (-w * x).exp());
        assert!((g.value(y).item() - s).abs() < 1e-15);
        let l = g.dot_const(y, vec![1.0]).unwrap();
        g.backward(l).unwrap();
        let dw = g.grad(wi).unwrap()[1];
        assert!((dw - s * (1.0 - s) * x).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::filled(vec![2], 1.5));
        let b = g.param(Tensor::filled(vec![2], 2.0));
        let l = g.dot_const(a, vec![1.0, 3.0]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 3.0]);
        assert!(g.grad(b).is_none());
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let a = g.param(Tensor::<f64>::filled(vec![1], 1.0));
        let l = g.dot_const(a, vec![2.0]).unwrap();
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn gradcheck_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            rand_tensor(vec![3, 4], &mut rng),
            rand_tensor(vec![5, 4], &mut rng),
            rand_tensor(vec![5], &mut rng),
        ];
        let p = probe(&mut rng, 15);
        let err = check(inputs, 20, 1, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            g.dot_const(y, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_conv1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(vec![2, 6, 3], &mut rng),
            rand_tensor(vec![4, 3, 3], &mut rng),
            rand_tensor(vec![4], &mut rng),
        ];
        let p = probe(&mut rng, 2 * 6 * 4);
        let err = check(inputs, 20, 2, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 1).unwrap();
            g.dot_const(y, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(vec![2, 5, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        ];
        let p = probe(&mut rng, 30);
        let err = check(inputs.clone(), 20, 3, |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            g.dot_const(y, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
        let err = check(inputs, 20, 4, |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5).unwrap();
            g.dot_const(y, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_relu_and_time_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep values away from the kink
        let x = Tensor::from_fn(vec![2, 4, 3], |i| if i % 2 == 0 { 0.5 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
        let p = probe(&mut rng, 6);
        let err = check(vec![x], 24, 5, |g, v| {
            let y = g.relu(v[0]).unwrap();
            let s = g.time_step(y, 2).unwrap();
            g.dot_const(s, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_gru_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![
            rand_tensor(vec![2, 3], &mut rng),
            rand_tensor(vec![2, 4], &mut rng),
            rand_tensor(vec![12, 3], &mut rng),
            rand_tensor(vec![12, 4], &mut rng),
            rand_tensor(vec![12], &mut rng),
            rand_tensor(vec![12], &mut rng),
        ];
        let p = probe(&mut rng, 8);
        let err = check(inputs, 20, 6, |g, v| {
            // two steps so the recurrent path is exercised
            let h = g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
            let h = g.gru_cell(v[0], h, v[2], v[3], v[4], v[5]).unwrap();
            g.dot_const(h, p.clone()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_softmax_cross_entropy_and_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![rand_tensor(vec![3, 5], &mut rng), rand_tensor(vec![3, 5], &mut rng)];
        let err = check(inputs, 15, 7, |g, v| {
            let a = g.softmax_cross_entropy(v[0], &[0, 4, 2]).unwrap();
            let s = g.add(v[0], v[1]).unwrap();
            let b = g.softmax_cross_entropy(s, &[1, 1, 3]).unwrap();
            g.add(a, b).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap());
        let l = g.softmax_cross_entropy(logits, &[2]).unwrap();
        g.backward(l).unwrap();
        let p = softmax_rows(&[1.0f64, 2.0, 0.5], 3);
        let want = [p[0], p[1], p[2] - 1.0];
        for (a, b) in g.grad(logits).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_large_logits() {
        let p = softmax_rows(&[1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let w = g.param(Tensor::zeros(vec![4, 5]));
        let b = g.param(Tensor::zeros(vec![4]));
        assert!(matches!(g.linear(x, w, b), Err(Error::ShapeMismatch { .. })));
        assert!(g.time_step(x, 0).is_err());
        assert!(g.softmax_cross_entropy(x, &[0]).is_err());
        assert!(g.softmax_cross_entropy(x, &[0, 3]).is_err());
    }
}
