//! Recording graph for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Parameters live
//! in a [`ParamTape`]; the graph only remembers their ids and writes
//! gradients back into the tape.

use super::ops::{gemm, linear_into, log_sum_exp, sigmoid_scalar, softmax_in_place, softplus, MatRef};
use super::{NumError, ParamId, ParamTape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    /// `out[i, :] = x[i, :] + W[:, labels[i]]`, i.e. a linear map of a one-hot code.
    AddColumns {
        x: NodeId,
        w: ParamId,
        labels: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    ConcatCols(NodeId, NodeId),
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    SigmoidBce {
        logits: NodeId,
        target: Tensor,
    },
    GaussianKl {
        mu: NodeId,
        log_var: NodeId,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    tape_version: Option<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn note_tape(&mut self, tape: &ParamTape) -> Result<(), NumError> {
        match self.tape_version {
            None => {
                self.tape_version = Some(tape.version());
                Ok(())
            }
            Some(v) if v == tape.version() => Ok(()),
            Some(_) => Err(NumError::Usage(
                "parameters changed while the graph was being recorded".into(),
            )),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, NumError> {
        self.push(Op::Input, value, false, "input")
    }

    /// A parameter used directly as a node value (copied from the tape).
    pub fn param(&mut self, tape: &ParamTape, id: ParamId) -> Result<NodeId, NumError> {
        self.note_tape(tape)?;
        self.push(Op::Param(id), tape.param(id).clone(), true, "param")
    }

    /// `x·Wᵀ + b` with `W` and `b` read from the tape.
    pub fn linear(
        &mut self,
        tape: &ParamTape,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<NodeId, NumError> {
        self.note_tape(tape)?;
        let wt = tape.param(w);
        let (out_dim, in_dim) = wt.dims2()?;
        let xv = self.value(x);
        let (batch, x_cols) = xv.dims2()?;
        if x_cols != in_dim {
            return Err(NumError::Shape {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let bias = match b {
            Some(b) => {
                let bt = tape.param(b);
                if bt.len() != out_dim {
                    return Err(NumError::Shape {
                        op: "linear (bias)",
                        left: wt.shape().to_vec(),
                        right: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut y = Tensor::zeros(&[batch, out_dim]);
        linear_into(wt.data(), bias, xv.data(), batch, in_dim, out_dim, y.data_mut());
        self.push(Op::Linear { x, w, b }, y, true, "linear")
    }

    /// Adds column `labels[i]` of `W` (shape `width × classes`) to row `i` of `x`.
    pub fn add_columns(
        &mut self,
        tape: &ParamTape,
        x: NodeId,
        w: ParamId,
        labels: &[usize],
    ) -> Result<NodeId, NumError> {
        self.note_tape(tape)?;
        let wt = tape.param(w);
        let (width, classes) = wt.dims2()?;
        let xv = self.value(x);
        let (batch, cols) = xv.dims2()?;
        if cols != width || labels.len() != batch {
            return Err(NumError::Shape {
                op: "add_columns",
                left: xv.shape().to_vec(),
                right: vec![width, classes, labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NumError::Label { label, classes });
        }
        let mut y = xv.clone();
        let wd = wt.data();
        for (row, &c) in y.data_mut().chunks_exact_mut(width).zip(labels) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += wd[j * classes + c];
            }
        }
        self.push(
            Op::AddColumns {
                x,
                w,
                labels: labels.to_vec(),
            },
            y,
            true,
            "add_columns",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        for (v, w) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += w;
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), y, rg, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.same_shape("mul", a, b)?;
        let mut y = self.value(a).clone();
        for (v, w) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), y, rg, "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumError> {
        let y = self.value(a).map(|v| v * factor);
        let rg = self.needs(a);
        self.push(Op::Scale(a, factor), y, rg, "scale")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let y = self.value(a).map(f64::exp);
        let rg = self.needs(a);
        self.push(Op::Exp(a), y, rg, "exp")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let y = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(a);
        self.push(Op::Relu(a), y, rg, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let y = self.value(a).map(sigmoid_scalar);
        let rg = self.needs(a);
        self.push(Op::Sigmoid(a), y, rg, "sigmoid")
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, NumError> {
        let y = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.needs(a);
        self.push(Op::Clamp { x: a, lo, hi }, y, rg, "clamp")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(NumError::Shape {
                op: "concat_cols",
                left: vec![ra, ca],
                right: vec![rb, cb],
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let y = Tensor::new(vec![ra, ca + cb], data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), y, rg, "concat_cols")
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let (_, cols) = self.value(a).dims2()?;
        let mut y = self.value(a).clone();
        if cols > 0 {
            for row in y.data_mut().chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
        }
        let rg = self.needs(a);
        self.push(Op::Softmax(a), y, rg, "softmax")
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NumError> {
        let lv = self.value(logits);
        let (batch, classes) = lv.dims2()?;
        if labels.len() != batch {
            return Err(NumError::Shape {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NumError::Label { label, classes });
        }
        if batch == 0 {
            return Err(NumError::Usage("cross-entropy over an empty batch".into()));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let row = lv.row(i);
                log_sum_exp(row) - row[c]
            })
            .sum();
        let y = Tensor::scalar(total / batch as f64);
        let rg = self.needs(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            y,
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Mean over rows of the summed binary cross-entropy between `target`
    /// and `sigmoid(logits)`, evaluated in logit space.
    pub fn sigmoid_bce(&mut self, logits: NodeId, target: Tensor) -> Result<NodeId, NumError> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(NumError::Shape {
                op: "sigmoid_bce",
                left: lv.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let batch = lv.rows();
        if batch == 0 {
            return Err(NumError::Usage("reconstruction loss over an empty batch".into()));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| softplus(l) - t * l)
            .sum();
        let y = Tensor::scalar(total / batch as f64);
        let rg = self.needs(logits);
        self.push(Op::SigmoidBce { logits, target }, y, rg, "sigmoid_bce")
    }

    /// Mean over rows of `KL(N(mu, exp(log_var)) ‖ N(0, I))`.
    pub fn gaussian_kl(&mut self, mu: NodeId, log_var: NodeId) -> Result<NodeId, NumError> {
        self.same_shape("gaussian_kl", mu, log_var)?;
        let batch = self.value(mu).rows();
        if batch == 0 {
            return Err(NumError::Usage("KL divergence over an empty batch".into()));
        }
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();
        let y = Tensor::scalar(total / batch as f64);
        let rg = self.needs(mu) || self.needs(log_var);
        self.push(Op::GaussianKl { mu, log_var }, y, rg, "gaussian_kl")
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let y = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(Op::Sum(a), y, rg, "sum")
    }

    /// `Σ weight·term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, NumError> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(NumError::Shape {
                    op: "weighted_sum",
                    left: vec![1],
                    right: v.shape().to_vec(),
                });
            }
            total += w * v.data()[0];
        }
        let rg = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(total), rg, "weighted_sum")
    }

    /// Accumulates `∂loss/∂param` into the tape's gradient buffers.
    ///
    /// Gradients add onto whatever the buffers already hold; zero them first
    /// for a fresh step.
    pub fn backward(&self, loss: NodeId, tape: &mut ParamTape) -> Result<(), NumError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NumError::Usage("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(v) = self.tape_version {
            if v != tape.version() {
                return Err(NumError::Usage(
                    "parameters changed between forward and backward".into(),
                ));
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => add_into(tape.grad_mut(*pid), &g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let (batch, in_dim) = xv.dims2()?;
                    let out_dim = g.cols();
                    let gm = MatRef::row_major(g.data(), batch, out_dim);
                    {
                        let (_, gw) = tape.param_and_grad_mut(*w);
                        gemm(1.0, gm.t(), MatRef::row_major(xv.data(), batch, in_dim), 1.0, gw.data_mut());
                    }
                    if let Some(b) = b {
                        let gb = tape.grad_mut(*b).data_mut();
                        for row in g.data().chunks_exact(out_dim) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(&[batch, in_dim]);
                        let wv = tape.param(*w);
                        gemm(1.0, gm, MatRef::row_major(wv.data(), out_dim, in_dim), 0.0, dx.data_mut());
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::AddColumns { x, w, labels } => {
                    let gw = tape.grad_mut(*w);
                    let classes = gw.shape()[1];
                    let width = g.cols();
                    let gwd = gw.data_mut();
                    for (row, &c) in g.data().chunks_exact(width).zip(labels) {
                        for (j, v) in row.iter().enumerate() {
                            gwd[j * classes + c] += v;
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, self.value(*b), |g, v| g * v));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, zip_map(&g, self.value(*a), |g, v| g * v));
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Exp(a) => accumulate(&mut grads, *a, zip_map(&g, &node.value, |g, y| g * y)),
                Op::Relu(a) => accumulate(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Sigmoid(a) => accumulate(
                    &mut grads,
                    *a,
                    zip_map(&g, &node.value, |g, y| g * y * (1.0 - y)),
                ),
                Op::Clamp { x, lo, hi } => accumulate(
                    &mut grads,
                    *x,
                    zip_map(&g, self.value(*x), |g, v| if v >= *lo && v <= *hi { g } else { 0.0 }),
                ),
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = g.rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for row in g.data().chunks_exact(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, Tensor::new(vec![rows, ca], ga)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, Tensor::new(vec![rows, cb], gb)?);
                    }
                }
                Op::Softmax(a) => {
                    let cols = g.cols();
                    let mut dx = g.clone();
                    if cols > 0 {
                        for (drow, srow) in dx.data_mut().chunks_exact_mut(cols).zip(node.value.data().chunks_exact(cols)) {
                            let dot: f64 = drow.iter().zip(srow).map(|(g, s)| g * s).sum();
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d = s * (*d - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let upstream = g.data()[0];
                    let lv = self.value(*logits);
                    let cols = lv.cols();
                    let scale = upstream / labels.len() as f64;
                    let mut dx = lv.clone();
                    for (row, &c) in dx.data_mut().chunks_exact_mut(cols).zip(labels) {
                        softmax_in_place(row);
                        row[c] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::SigmoidBce { logits, target } => {
                    let upstream = g.data()[0];
                    let lv = self.value(*logits);
                    let scale = upstream / lv.rows() as f64;
                    let dx = zip_map(lv, target, |l, t| (sigmoid_scalar(l) - t) * scale);
                    accumulate(&mut grads, *logits, dx);
                }
                Op::GaussianKl { mu, log_var } => {
                    let upstream = g.data()[0];
                    let scale = upstream / self.value(*mu).rows() as f64;
                    if self.needs(*mu) {
                        accumulate(&mut grads, *mu, self.value(*mu).map(|m| m * scale));
                    }
                    if self.needs(*log_var) {
                        accumulate(
                            &mut grads,
                            *log_var,
                            self.value(*log_var).map(|lv| 0.5 * (lv.exp() - 1.0) * scale),
                        );
                    }
                }
                Op::Sum(a) => {
                    let upstream = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), upstream));
                }
                Op::WeightedSum(terms) => {
                    let upstream = g.data()[0];
                    for &(id, w) in terms {
                        if self.needs(id) {
                            accumulate(&mut grads, id, Tensor::scalar(upstream * w));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map over equal shapes")
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}
