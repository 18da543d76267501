//! Expression graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every evaluation. Each kernel computes its
//! forward value immediately and records its inputs; [`Graph::backward`]
//! then walks the nodes in reverse creation order, which is a valid
//! topological order because a node can only reference earlier nodes.

use crate::error::{Error, Result};

use super::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Cosine similarity of two non-zero vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateGeometry(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    /// Mean that collapses the given axis.
    Mean(NodeId, Axis),
    SumAll(NodeId),
    MeanAll(NodeId),
    NormalizeRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        tau: f64,
    },
    Mse(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &str) -> Result<NodeId> {
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|&i| self.value(i).is_finite())
        {
            return Err(Error::NonFinite(format!("forward of {name}")));
        }
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b), &[a, b], "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape(format!(
                "add_row: {}x{} plus {}x{}",
                va.rows(),
                va.cols(),
                vr.rows(),
                vr.cols()
            )));
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a), &[a], "add_const")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a], "exp")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a], "square")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a], "gelu")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    /// Mean over rows gives `1 × cols`; mean over cols gives `rows × 1`.
    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let v = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(va.row_slice(i)) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)?
            }
            Axis::Cols => {
                let out = (0..r)
                    .map(|i| va.row_slice(i).iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, out)?
            }
        };
        self.push(v, Op::Mean(a, axis), &[a], "mean")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::SumAll(a), &[a], "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let v = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        self.push(v, Op::MeanAll(a), &[a], "mean_all")
    }

    /// L2-normalizes every row.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).normalized_rows()?;
        self.push(v, Op::NormalizeRows(a), &[a], "normalize_rows")
    }

    /// Pairwise cosine similarity between the rows of `a` (n × d) and the
    /// rows of `b` (m × d), giving an n × m matrix.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.matmul_t(na, nb)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Shape(format!(
                "concat_cols: {} rows vs {} rows",
                va.rows(),
                vb.rows()
            )));
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        let v = Tensor::matrix(r, ca + cb, data)?;
        self.push(v, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// Mean over rows of `−log softmax(logits / tau)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        tau: f64,
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        if labels.len() != vl.rows() {
            return Err(Error::Shape(format!(
                "cross entropy: {} labels for {} rows",
                labels.len(),
                vl.rows()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let c = vl.cols();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
            }
            let z: Vec<f64> = vl.row_slice(i).iter().map(|x| x / tau).collect();
            total += log_sum_exp(&z) - z[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                tau,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / va.len() as f64);
        self.push(v, Op::Mse(a, b), &[a, b], "mse")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul_t(self.value(b))?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).t_matmul(g)?);
                }
            }
            &Op::MatMulT(a, b) => {
                // out = a bᵀ: d/da = g b, d/db = gᵀ a
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b))?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.t_matmul(self.value(a))?);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(row) {
                    let mut acc = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (o, x) in acc.iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, row, Tensor::matrix(1, g.cols(), acc)?);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::AddConst(a) => self.accumulate(grads, a, g.clone()),
            &Op::Exp(a) => self.accumulate(grads, a, g.zip_map(&node.value, |x, y| x * y)),
            &Op::Square(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |x, y| 2.0 * x * y))
            }
            &Op::Gelu(a) => self.accumulate(
                grads,
                a,
                g.zip_map(self.value(a), |x, y| x * gelu_derivative(y)),
            ),
            &Op::Relu(a) => self.accumulate(
                grads,
                a,
                g.zip_map(self.value(a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            &Op::Mean(a, axis) => {
                let va = self.value(a);
                let (r, c) = (va.rows(), va.cols());
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[i * c + j] = match axis {
                            Axis::Rows => g.data()[j] / r as f64,
                            Axis::Cols => g.data()[i] / c as f64,
                        };
                    }
                }
                self.accumulate(grads, a, out);
            }
            &Op::SumAll(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, Tensor::filled(va.rows(), va.cols(), g.item()));
            }
            &Op::MeanAll(a) => {
                let va = self.value(a);
                let s = g.item() / va.len() as f64;
                self.accumulate(grads, a, Tensor::filled(va.rows(), va.cols(), s));
            }
            &Op::NormalizeRows(a) => {
                let va = self.value(a);
                let y = &node.value;
                let mut out = Tensor::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let norm = va.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in out.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * proj) / norm;
                    }
                }
                self.accumulate(grads, a, out);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let r = g.rows();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row_slice(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, Tensor::matrix(r, ca, ga)?);
                self.accumulate(grads, b, Tensor::matrix(r, cb, gb)?);
            }
            Op::SoftmaxCrossEntropy { logits, labels, tau } => {
                let vl = self.value(*logits);
                let n = labels.len() as f64;
                let scale = g.item() / (tau * n);
                let mut out = Tensor::zeros(vl.rows(), vl.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let z: Vec<f64> = vl.row_slice(i).iter().map(|x| x / tau).collect();
                    let lse = log_sum_exp(&z);
                    for (j, (o, zj)) in out.row_slice_mut(i).iter_mut().zip(&z).enumerate() {
                        let p = (zj - lse).exp();
                        *o = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, out);
            }
            &Op::Mse(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let s = 2.0 * g.item() / va.len() as f64;
                let d = va.zip_map(vb, |x, y| s * (x - y));
                if self.needs(b) {
                    self.accumulate(grads, b, d.map(|x| -x));
                }
                self.accumulate(grads, a, d);
            }
        }
        Ok(())
    }
}
