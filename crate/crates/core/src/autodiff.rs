//! Minimal reverse-mode differentiation on an arena tape.
//!
//! Values are eagerly computed matrices; every operation appends a node
//! recording its inputs, so one backward sweep per tape yields exact
//! gradients for all parameter leaves. The op vocabulary is deliberately
//! closed: composite losses are built from these primitives rather than by
//! adding bespoke nodes.
//!
//! Shape mismatches and domain violations (ln of a nonpositive entry, a
//! zero row fed to row normalization) are programmer errors and panic; the
//! objective layer validates data-dependent hazards before building graphs.

use thiserror::Error;

use crate::mat::Mat;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("backward already consumed this tape")]
    Consumed,
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("output does not depend on any gradient-tracked leaf")]
    NoGradPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    MatMulTN(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNormRows(NodeId),
    MulRowVec(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    AddColVec(NodeId, NodeId),
    L2NormalizeRows(NodeId),
    SimplexNorm(NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherEntries(NodeId, Vec<(usize, usize)>),
    ConcatRows(NodeId, NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints for every node after a backward sweep; leaves that do not track
/// gradients (and nodes off the path to the output) stay `None`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf that was expected to receive one.
    pub fn expect(&self, id: NodeId) -> &Mat {
        self.get(id).expect("no gradient accumulated for this node")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf whose gradient will be accumulated.
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant; backward never visits it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Copy of a node's current value with the gradient link severed.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, input: NodeId, value: Mat) -> NodeId {
        let ng = self.needs_grad(input);
        self.push(op, value, ng)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, value: Mat) -> NodeId {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.binary(Op::Add(a, b), a, b, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.binary(Op::Mul(a, b), a, b, value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.unary(Op::AddConst(a), a, value)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.unary(Op::MulConst(a, c), a, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.binary(Op::MatMul(a, b), a, b, value)
    }

    /// a * b^T.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_nt(self.value(b));
        self.binary(Op::MatMulNT(a, b), a, b, value)
    }

    /// a^T * b.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_tn(self.value(b));
        self.binary(Op::MatMulTN(a, b), a, b, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.unary(Op::Transpose(a), a, value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_into(x.row(r), value.row_mut(r));
        }
        self.unary(Op::SoftmaxRows(a), a, value)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let lse = logsumexp(x.row(r));
            for (out, &v) in value.row_mut(r).iter_mut().zip(x.row(r)) {
                *out = v - lse;
            }
        }
        self.unary(Op::LogSoftmaxRows(a), a, value)
    }

    /// Column vector of per-row log-sum-exp values.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = Mat::from_fn(x.rows(), 1, |r, _| logsumexp(x.row(r)));
        self.unary(Op::LogSumExpRows(a), a, value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.unary(Op::Exp(a), a, value)
    }

    /// Requires strictly positive entries.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| {
            assert!(v > 0.0, "ln of nonpositive entry {v}");
            v.ln()
        });
        self.unary(Op::Ln(a), a, value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.unary(Op::Tanh(a), a, value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        self.unary(Op::Gelu(a), a, value)
    }

    /// Rows normalized to zero mean and unit variance (no learned affine;
    /// compose with mul_rowvec / add_rowvec for gain and bias).
    pub fn layernorm_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (mu, sd) = row_moments(x.row(r));
            for (out, &v) in value.row_mut(r).iter_mut().zip(x.row(r)) {
                *out = (v - mu) / sd;
            }
        }
        self.unary(Op::LayerNormRows(a), a, value)
    }

    /// Broadcast multiply by a 1 x cols vector.
    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (x, w) = (self.value(a), self.value(v));
        assert_eq!(w.rows(), 1, "row vector expected");
        assert_eq!(w.cols(), x.cols(), "row vector width mismatch");
        let value = Mat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * w.get(0, c));
        self.binary(Op::MulRowVec(a, v), a, v, value)
    }

    /// Broadcast add of a 1 x cols vector.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (x, w) = (self.value(a), self.value(v));
        assert_eq!(w.rows(), 1, "row vector expected");
        assert_eq!(w.cols(), x.cols(), "row vector width mismatch");
        let value = Mat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + w.get(0, c));
        self.binary(Op::AddRowVec(a, v), a, v, value)
    }

    /// Broadcast add of a rows x 1 vector.
    pub fn add_colvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (x, w) = (self.value(a), self.value(v));
        assert_eq!(w.cols(), 1, "column vector expected");
        assert_eq!(w.rows(), x.rows(), "column vector height mismatch");
        let value = Mat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + w.get(r, 0));
        self.binary(Op::AddColVec(a, v), a, v, value)
    }

    /// Rows scaled to unit l2 norm. Requires every row norm above the shared
    /// floor used by the cosine losses.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let n = row_norm(x.row(r));
            assert!(n >= crate::losses::NORM_FLOOR, "zero-norm row {r}");
            for (out, &v) in value.row_mut(r).iter_mut().zip(x.row(r)) {
                *out = v / n;
            }
        }
        self.unary(Op::L2NormalizeRows(a), a, value)
    }

    /// Entries divided by their total. Requires a strictly positive total;
    /// individual zeros are fine (truncated weights rely on that).
    pub fn simplex_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let s = x.sum();
        assert!(s > 0.0, "simplex_norm needs positive total mass, got {s}");
        let value = x.map(|v| v / s);
        self.unary(Op::SimplexNorm(a), a, value)
    }

    /// Select rows by index; duplicates are allowed and their gradients
    /// accumulate (token embedding lookup depends on this).
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let x = self.value(a);
        assert!(!idx.is_empty(), "empty row gather");
        for &i in &idx {
            assert!(i < x.rows(), "row index {i} out of bounds for {} rows", x.rows());
        }
        let value = Mat::from_fn(idx.len(), x.cols(), |r, c| x.get(idx[r], c));
        self.unary(Op::GatherRows(a, idx), a, value)
    }

    /// Select scattered entries into a 1 x k row.
    pub fn gather_entries(&mut self, a: NodeId, entries: Vec<(usize, usize)>) -> NodeId {
        let x = self.value(a);
        assert!(!entries.is_empty(), "empty entry gather");
        for &(r, c) in &entries {
            assert!(r < x.rows() && c < x.cols(), "entry ({r}, {c}) out of bounds");
        }
        let value = Mat::from_fn(1, entries.len(), |_, k| {
            let (r, c) = entries[k];
            x.get(r, c)
        });
        self.unary(Op::GatherEntries(a, entries), a, value)
    }

    /// Vertical stack: rows of `a` then rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "column mismatch in row concat");
        let value = Mat::from_fn(x.rows() + y.rows(), x.cols(), |r, c| {
            if r < x.rows() {
                x.get(r, c)
            } else {
                y.get(r - x.rows(), c)
            }
        });
        self.binary(Op::ConcatRows(a, b), a, b, value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = Mat::scalar(x.sum() / x.len() as f64);
        self.unary(Op::MeanAll(a), a, value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Mat::scalar(self.value(a).sum());
        self.unary(Op::SumAll(a), a, value)
    }

    /// Reverse sweep from a scalar output. The tape is single-shot: values
    /// remain readable afterwards but a second backward is refused.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients, TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            let (rows, cols) = out.value.shape();
            return Err(TapeError::NotScalar { rows, cols });
        }
        if !out.needs_grad {
            return Err(TapeError::NoGradPath);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));

        for id in (0..=output.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: NodeId, delta: Mat) {
        if !self.needs_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.hadamard(self.value(*b)));
                self.accumulate(grads, *b, g.hadamard(self.value(*a)));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                self.accumulate(grads, *a, g.matmul(self.value(*b)));
                self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
            }
            Op::MatMulTN(a, b) => {
                self.accumulate(grads, *a, self.value(*b).matmul_nt(g));
                self.accumulate(grads, *b, self.value(*a).matmul(g));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for ((out, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *out = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((out, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *out = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let mut p = vec![0.0; x.cols()];
                    softmax_into(x.row(r), &mut p);
                    let gr = g.get(r, 0);
                    for (out, pv) in dx.row_mut(r).iter_mut().zip(p) {
                        *out = gr * pv;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&self.nodes[id].value)),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| gv / xv));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let n = x.cols() as f64;
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (_, sd) = row_moments(x.row(r));
                    let gmean: f64 = g.row(r).iter().sum::<f64>() / n;
                    let gymean: f64 =
                        g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum::<f64>() / n;
                    for ((out, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *out = (gv - gmean - yv * gymean) / sd;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::MulRowVec(a, v) => {
                let (x, w) = (self.value(*a), self.value(*v));
                let dx = Mat::from_fn(x.rows(), x.cols(), |r, c| g.get(r, c) * w.get(0, c));
                let dv = Mat::from_fn(1, x.cols(), |_, c| {
                    (0..x.rows()).map(|r| g.get(r, c) * x.get(r, c)).sum()
                });
                self.accumulate(grads, *a, dx);
                self.accumulate(grads, *v, dv);
            }
            Op::AddRowVec(a, v) => {
                let dv = Mat::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *v, dv);
            }
            Op::AddColVec(a, v) => {
                let dv = Mat::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *v, dv);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = row_norm(x.row(r));
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for ((out, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *out = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SimplexNorm(a) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let s = x.sum();
                let dot: f64 = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).sum();
                let dx = g.map(|gv| (gv - dot) / s);
                self.accumulate(grads, *a, dx);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (out, &gv) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *out += gv;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::GatherEntries(a, entries) => {
                let x = self.value(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    dx.set(r, c, dx.get(r, c) + g.get(0, k));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(a, b) => {
                let top = self.value(*a).rows();
                let da = Mat::from_fn(top, g.cols(), |r, c| g.get(r, c));
                let db = Mat::from_fn(g.rows() - top, g.cols(), |r, c| g.get(top + r, c));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let gv = g.get(0, 0) / x.len() as f64;
                self.accumulate(grads, *a, Mat::filled(x.rows(), x.cols(), gv));
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Mat::filled(x.rows(), x.cols(), g.get(0, 0)));
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + LAYERNORM_EPS).sqrt())
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form gelu; the derivative below matches this exact expression, which
/// is what the finite-difference suites check against.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central differences on every coordinate of every input against the
    /// tape gradient of a scalar-valued builder.
    fn fd_check<F>(inputs: &[Mat], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();

        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.expect(ids[which]);
            for k in 0..input.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let mut m = m.clone();
                            if i == which {
                                m.data_mut()[k] += delta;
                            }
                            tape.param(m)
                        })
                        .collect();
                    let out = build(&mut tape, &ids);
                    tape.value(out).get(0, 0)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < tol,
                    "input {which} coord {k}: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn add_mul_const_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        fd_check(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let s = t.mul_const(s, 1.7);
            let s = t.add_const(s, -0.3);
            let s = t.mul(s, ids[0]);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        fd_check(&[a.clone(), b.clone()], |t, ids| {
            let p = t.matmul(ids[0], ids[1]);
            t.sum_all(p)
        }, 1e-6);

        let bt = rand_mat(&mut rng, 2, 4);
        fd_check(&[a.clone(), bt], |t, ids| {
            let p = t.matmul_nt(ids[0], ids[1]);
            t.sum_all(p)
        }, 1e-6);

        let at = rand_mat(&mut rng, 3, 2);
        fd_check(&[a, at], |t, ids| {
            let p = t.matmul_tn(ids[1], ids[0]);
            t.sum_all(p)
        }, 1e-6);
    }

    #[test]
    fn transpose_roundtrip_value_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 2, 5);
        fd_check(&[a], |t, ids| {
            let x = t.transpose(ids[0]);
            let y = t.mul(x, x);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn softmax_rows_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 3, 5);
        fd_check(&[a, w], |t, ids| {
            let p = t.softmax_rows(ids[0]);
            let weighted = t.mul(p, ids[1]);
            t.sum_all(weighted)
        }, 1e-5);
    }

    #[test]
    fn log_softmax_and_lse_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 6);

        let mut tape = Tape::new();
        let x = tape.param(a.clone());
        let lsm = tape.log_softmax_rows(x);
        let lse = tape.logsumexp_rows(x);
        for r in 0..4 {
            for c in 0..6 {
                let direct = a.get(r, c) - tape.value(lse).get(r, 0);
                assert!((tape.value(lsm).get(r, c) - direct).abs() < 1e-12);
            }
        }

        let w = rand_mat(&mut rng, 4, 6);
        fd_check(&[a.clone(), w], |t, ids| {
            let p = t.log_softmax_rows(ids[0]);
            let weighted = t.mul(p, ids[1]);
            t.sum_all(weighted)
        }, 1e-5);
        fd_check(&[a], |t, ids| {
            let l = t.logsumexp_rows(ids[0]);
            t.sum_all(l)
        }, 1e-6);
    }

    #[test]
    fn elementwise_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 3, 3);
        fd_check(&[a.clone()], |t, ids| {
            let y = t.tanh(ids[0]);
            t.sum_all(y)
        }, 1e-6);
        fd_check(&[a.clone()], |t, ids| {
            let y = t.gelu(ids[0]);
            t.sum_all(y)
        }, 1e-6);
        fd_check(&[a.clone()], |t, ids| {
            let y = t.exp(ids[0]);
            t.sum_all(y)
        }, 1e-6);
        let pos = a.map(|v| v.abs() + 0.5);
        fd_check(&[pos], |t, ids| {
            let y = t.ln(ids[0]);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn layernorm_rows_grad_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 8);
        let mut tape = Tape::new();
        let x = tape.param(a.clone());
        let y = tape.layernorm_rows(x);
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "unit variance up to the eps floor");
        }
        let w = rand_mat(&mut rng, 3, 8);
        fd_check(&[a, w], |t, ids| {
            let y = t.layernorm_rows(ids[0]);
            let v = t.mul(y, ids[1]);
            t.sum_all(v)
        }, 1e-5);
    }

    #[test]
    fn broadcast_vector_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 4, 3);
        let rv = rand_mat(&mut rng, 1, 3);
        let cv = rand_mat(&mut rng, 4, 1);
        fd_check(&[x.clone(), rv.clone()], |t, ids| {
            let y = t.mul_rowvec(ids[0], ids[1]);
            t.sum_all(y)
        }, 1e-6);
        fd_check(&[x.clone(), rv], |t, ids| {
            let y = t.add_rowvec(ids[0], ids[1]);
            let y = t.mul(y, y);
            t.sum_all(y)
        }, 1e-6);
        fd_check(&[x, cv], |t, ids| {
            let y = t.add_colvec(ids[0], ids[1]);
            let y = t.mul(y, y);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn row_normalization_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 3, 4).map(|v| v + 2.5);
        let w = rand_mat(&mut rng, 3, 4);
        fd_check(&[a, w], |t, ids| {
            let y = t.l2_normalize_rows(ids[0]);
            let v = t.mul(y, ids[1]);
            t.sum_all(v)
        }, 1e-5);

        let pos = rand_mat(&mut rng, 1, 5).map(|v| v.abs() + 0.1);
        let w2 = rand_mat(&mut rng, 1, 5);
        fd_check(&[pos, w2], |t, ids| {
            let y = t.simplex_norm(ids[0]);
            let v = t.mul(y, ids[1]);
            t.sum_all(v)
        }, 1e-5);
    }

    #[test]
    fn simplex_norm_with_masked_zeros() {
        // Straight-through truncation multiplies by a 0/1 constant mask and
        // renormalizes what survives; gradients must flow through the kept
        // entries only.
        let x = Mat::from_vec(1, 4, vec![0.4, 0.3, 0.2, 0.1]);
        let mask = Mat::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]);
        let coef = Mat::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        fd_check(&[x], |t, ids| {
            let m = t.constant(mask.clone());
            let kept = t.mul(ids[0], m);
            let y = t.simplex_norm(kept);
            let c = t.constant(coef.clone());
            let v = t.mul(y, c);
            t.sum_all(v)
        }, 1e-5);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let a = tape.param(x);
        let y = tape.gather_rows(a, vec![0, 0, 2]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let dx = grads.expect(a);
        assert_eq!(dx.row(0), &[2.0, 2.0]);
        assert_eq!(dx.row(1), &[0.0, 0.0]);
        assert_eq!(dx.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn gather_entries_and_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_mat(&mut rng, 3, 3);
        let b = rand_mat(&mut rng, 2, 3);
        fd_check(&[a, b], |t, ids| {
            let z = t.concat_rows(ids[0], ids[1]);
            let picked = t.gather_entries(z, vec![(0, 1), (4, 2), (0, 1)]);
            let sq = t.mul(picked, picked);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn mean_all_matches_sum_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_mat(&mut rng, 4, 5);
        fd_check(&[a], |t, ids| t.mean_all(ids[0]), 1e-6);
    }

    #[test]
    fn composite_attention_like_graph() {
        // A miniature of the real forward: projection, scaled scores,
        // softmax, weighted values, normalization, pooled cosine.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = rand_mat(&mut rng, 2, 4);
        let k = rand_mat(&mut rng, 3, 4);
        let v = rand_mat(&mut rng, 3, 4);
        let tgt = rand_mat(&mut rng, 2, 4).map(|x| x + 1.5);
        fd_check(&[q, k, v, tgt], |t, ids| {
            let scores = t.matmul_nt(ids[0], ids[1]);
            let scaled = t.mul_const(scores, 0.5);
            let p = t.softmax_rows(scaled);
            let ctx = t.matmul(p, ids[2]);
            let cn = t.l2_normalize_rows(ctx);
            let tn = t.l2_normalize_rows(ids[3]);
            let cos = t.mul(cn, tn);
            let s = t.sum_all(cos);
            let neg = t.mul_const(s, -0.5);
            t.add_const(neg, 1.0)
        }, 1e-5);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::filled(2, 2, 1.0));
        let c = tape.constant(Mat::filled(2, 2, 3.0));
        let y = tape.mul(a, c);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.expect(a).data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_refused() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::scalar(2.0));
        let s = tape.sum_all(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TapeError::Consumed);
    }

    #[test]
    fn backward_rejects_nonscalar_and_constant_outputs() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::filled(2, 3, 1.0));
        assert_eq!(tape.backward(a).unwrap_err(), TapeError::NotScalar { rows: 2, cols: 3 });

        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(4.0));
        let s = tape.sum_all(c);
        assert_eq!(tape.backward(s).unwrap_err(), TapeError::NoGradPath);
    }

    #[test]
    #[should_panic(expected = "ln of nonpositive entry")]
    fn ln_rejects_nonpositive() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::from_vec(1, 2, vec![1.0, -0.5]));
        tape.ln(a);
    }

    #[test]
    #[should_panic(expected = "zero-norm row")]
    fn l2_normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::zeros(2, 2));
        tape.l2_normalize_rows(a);
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::zeros(2, 2));
        let b = tape.param(Mat::zeros(2, 3));
        tape.add(a, b);
    }

    #[test]
    fn values_survive_backward() {
        let mut tape = Tape::new();
        let a = tape.param(Mat::scalar(3.0));
        let y = tape.mul(a, a);
        let s = tape.sum_all(y);
        let _ = tape.backward(s).unwrap();
        assert_eq!(tape.value(y).get(0, 0), 9.0);
    }
}
