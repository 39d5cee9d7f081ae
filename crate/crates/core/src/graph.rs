//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! the eagerly computed value plus the identities of its parents. Because
//! nodes only reference earlier nodes the tape is acyclic by construction,
//! and a single reverse sweep in insertion order propagates gradients
//! deterministically.
//!
//! Each op validates its output for NaN/Inf so divergence surfaces at the
//! boundary where it is produced rather than three layers downstream.

use crate::error::{Error, Result};
use crate::matrix::{
    apply_activation, gelu_derivative, layer_norm, relu, softmax_rows, ActivationKind, Matrix,
    Scalar,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    Activation(NodeId, ActivationKind),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SelectCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ZeroRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// Broadcast a `1 x c` vector into the listed rows of an otherwise zero
    /// `out_rows x c` matrix.
    ScatterRowVec {
        v: NodeId,
        rows: Vec<usize>,
    },
    /// Place row `i` of the input at `rows[i]` of an otherwise zero
    /// `out_rows x c` matrix.
    PlaceRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// Mean squared error against a constant target, all entries weighted
    /// equally. Output is 1x1.
    MseLoss {
        pred: NodeId,
        target: Matrix<S>,
    },
    /// Softmax cross-entropy of a `1 x C` logit row against a class index.
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Append-only computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, context: &str, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> Result<NodeId> {
        value.ensure_finite(context)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Matrix<S>) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Registers a non-differentiable leaf (data, targets).
    pub fn constant(&mut self, value: Matrix<S>) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push("transpose", value, Op::Transpose(a), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), needs)
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let value = self.value(a).add_row_vec(self.value(v))?;
        let needs = self.needs(a) || self.needs(v);
        self.push("add_row_vec", value, Op::AddRowVec(a, v), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).scale(S::from_f64(c));
        let needs = self.needs(a);
        self.push("scale", value, Op::Scale(a, c), needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax_rows(self.value(a))?;
        let needs = self.needs(a);
        self.push("softmax_rows", value, Op::SoftmaxRows(a), needs)
    }

    pub fn activation(&mut self, a: NodeId, kind: ActivationKind) -> Result<NodeId> {
        let value = apply_activation(self.value(a), kind);
        let needs = self.needs(a);
        self.push("activation", value, Op::Activation(a, kind), needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(
                "layer_norm on the tape requires eps > 0".into(),
            ));
        }
        let value = layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        )
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let value = self.value(x).select_rows(rows)?;
        let needs = self.needs(x);
        self.push(
            "select_rows",
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn select_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        if start + len > src.cols() {
            return Err(Error::ShapeMismatch {
                op: "select_cols",
                details: format!("cols [{start}, {}) of {}", start + len, src.cols()),
            });
        }
        let mut value = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        let needs = self.needs(x);
        self.push("select_cols", value, Op::SelectCols { x, start, len }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("{} rows vs {}", m.rows(), rows),
                });
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Mean of the listed rows as a `1 x c` matrix.
    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("mean_rows over no rows".into()));
        }
        let selected = self.value(x).select_rows(rows)?;
        let value = selected.sum_rows().scale(S::from_f64(1.0 / rows.len() as f64));
        let needs = self.needs(x);
        self.push(
            "mean_rows",
            value,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn zero_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let mut value = self.value(x).clone();
        for &r in rows {
            if r >= value.rows() {
                return Err(Error::InvalidArgument(format!(
                    "zero_rows index {r} out of range"
                )));
            }
            for v in value.row_mut(r) {
                *v = S::zero();
            }
        }
        let needs = self.needs(x);
        self.push(
            "zero_rows",
            value,
            Op::ZeroRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn scatter_row_vec(&mut self, v: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let src = self.value(v);
        if src.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scatter_row_vec",
                details: format!("expected 1 x c vector, got {:?}", src.shape()),
            });
        }
        let mut value = Matrix::zeros(out_rows, src.cols());
        for &r in rows {
            if r >= out_rows {
                return Err(Error::InvalidArgument(format!(
                    "scatter_row_vec index {r} out of range"
                )));
            }
            value.row_mut(r).copy_from_slice(src.row(0));
        }
        let needs = self.needs(v);
        self.push(
            "scatter_row_vec",
            value,
            Op::ScatterRowVec {
                v,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn place_rows(&mut self, x: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let src = self.value(x);
        if rows.len() != src.rows() {
            return Err(Error::ShapeMismatch {
                op: "place_rows",
                details: format!("{} targets for {} rows", rows.len(), src.rows()),
            });
        }
        let mut value = Matrix::zeros(out_rows, src.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= out_rows {
                return Err(Error::InvalidArgument(format!(
                    "place_rows index {r} out of range"
                )));
            }
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        let needs = self.needs(x);
        self.push(
            "place_rows",
            value,
            Op::PlaceRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: Matrix<S>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                details: format!("{:?} vs {:?}", p.shape(), target.shape()),
            });
        }
        if p.is_empty() {
            return Err(Error::InvalidArgument("mse_loss over empty matrices".into()));
        }
        let mut acc = S::zero();
        for (a, b) in p.data().iter().zip(target.data().iter()) {
            let d = *a - *b;
            acc += d * d;
        }
        let value = Matrix::from_vec(1, 1, vec![acc / S::from_f64(p.len() as f64)])?;
        let needs = self.needs(pred);
        self.push("mse_loss", value, Op::MseLoss { pred, target }, needs)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                details: format!("expected 1 x C logits, got {:?}", l.shape()),
            });
        }
        if label >= l.cols() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                l.cols()
            )));
        }
        let probs = softmax_rows(l)?;
        // -log p[label], computed via the stable log-sum-exp route.
        let row = l.row(0);
        let max = row
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut lse = S::zero();
        for &v in row {
            lse += (v - max).exp();
        }
        let loss = lse.ln() + max - row[label];
        drop(probs);
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        let needs = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy { logits, label },
            needs,
        )
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per node
    /// that participates in the loss; leaves keep theirs for the optimizer.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                details: format!("loss must be 1x1, got {:?}", loss_value.shape()),
            });
        }
        loss_value.ensure_finite("backward loss")?;

        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, S::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        id: usize,
        g: &Matrix<S>,
        grads: &mut [Option<Matrix<S>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    accumulate(&mut grads[a.0], ga)?;
                }
                if self.needs(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    accumulate(&mut grads[b.0], gb)?;
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.transpose())?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone())?;
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone())?;
                }
            }
            Op::AddRowVec(a, v) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone())?;
                }
                if self.needs(*v) {
                    accumulate(&mut grads[v.0], g.sum_rows())?;
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.scale(S::from_f64(*c)))?;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                            dot += yv * gv;
                        }
                        for (o, (&yv, &gv)) in
                            ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter()))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga)?;
                }
            }
            Op::Activation(a, kind) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    match kind {
                        ActivationKind::Relu => {
                            for (o, &xv) in ga.data_mut().iter_mut().zip(x.data().iter()) {
                                if relu(xv) == S::zero() {
                                    *o = S::zero();
                                }
                            }
                        }
                        ActivationKind::Gelu => {
                            for (o, &xv) in ga.data_mut().iter_mut().zip(x.data().iter()) {
                                *o *= gelu_derivative(xv);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga)?;
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(g, *x, *gain, *bias, *eps, grads)?;
            }
            Op::SelectRows { x, rows } => {
                if self.needs(*x) {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(i).iter()) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
            Op::SelectCols { x, start, len } => {
                if self.needs(*x) {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        gx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads[p.0], gp)?;
                    }
                    offset += w;
                }
            }
            Op::MeanRows { x, rows } => {
                if self.needs(*x) {
                    let src = self.value(*x);
                    let w = S::from_f64(1.0 / rows.len() as f64);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for &r in rows {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(0).iter()) {
                            *o += gv * w;
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
            Op::ZeroRows { x, rows } => {
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for &r in rows {
                        for v in gx.row_mut(r) {
                            *v = S::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
            Op::ScatterRowVec { v, rows, .. } => {
                if self.needs(*v) {
                    let mut gv = Matrix::zeros(1, g.cols());
                    for &r in rows {
                        for (o, &gval) in gv.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *o += gval;
                        }
                    }
                    accumulate(&mut grads[v.0], gv)?;
                }
            }
            Op::PlaceRows { x, rows, .. } => {
                if self.needs(*x) {
                    let mut gx = Matrix::zeros(rows.len(), g.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        gx.row_mut(i).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
            }
            Op::MseLoss { pred, target } => {
                if self.needs(*pred) {
                    let p = self.value(*pred);
                    let upstream = g.get(0, 0);
                    let coeff = S::from_f64(2.0 / p.len() as f64) * upstream;
                    let mut gp = Matrix::zeros(p.rows(), p.cols());
                    for ((o, &pv), &tv) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(p.data().iter())
                        .zip(target.data().iter())
                    {
                        *o = coeff * (pv - tv);
                    }
                    accumulate(&mut grads[pred.0], gp)?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                if self.needs(*logits) {
                    let probs = softmax_rows(self.value(*logits))?;
                    let upstream = g.get(0, 0);
                    let mut gl = probs;
                    let corrected = gl.get(0, *label) - S::one();
                    gl.set(0, *label, corrected);
                    let gl = gl.scale(upstream);
                    accumulate(&mut grads[logits.0], gl)?;
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        g: &Matrix<S>,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
        grads: &mut [Option<Matrix<S>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.cols();
        let inv_d = S::from_f64(1.0 / d as f64);
        let epss = S::from_f64(eps);

        let mut gx = Matrix::zeros(xv.rows(), xv.cols());
        let mut ggain = Matrix::zeros(1, d);
        let mut gbias = Matrix::zeros(1, d);

        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let inv_sigma = S::one() / (var + epss).sqrt();

            let grow = g.row(r);
            // gy = upstream * gain; two row-reductions feed the input grad.
            let mut mean_gy = S::zero();
            let mut mean_gy_y = S::zero();
            for c in 0..d {
                let y = (row[c] - mean) * inv_sigma;
                let gy = grow[c] * gv.get(0, c);
                mean_gy += gy;
                mean_gy_y += gy * y;
            }
            mean_gy *= inv_d;
            mean_gy_y *= inv_d;

            for c in 0..d {
                let y = (row[c] - mean) * inv_sigma;
                let gy = grow[c] * gv.get(0, c);
                gx.set(r, c, inv_sigma * (gy - mean_gy - y * mean_gy_y));
                ggain.set(0, c, ggain.get(0, c) + grow[c] * y);
                gbias.set(0, c, gbias.get(0, c) + grow[c]);
            }
        }

        if self.needs(x) {
            accumulate(&mut grads[x.index()], gx)?;
        }
        if self.needs(gain) {
            accumulate(&mut grads[gain.index()], ggain)?;
        }
        if self.needs(bias) {
            accumulate(&mut grads[bias.index()], gbias)?;
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Matrix<S>>, delta: Matrix<S>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&delta),
        None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
