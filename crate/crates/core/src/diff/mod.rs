//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only list of nodes; node order is a topological
//! order, so [`Graph::backward`] is a single reverse sweep. Geometry, layer and
//! loss primitives are registered as fused ops with hand-derived adjoints, each
//! covered by the finite-difference harness in [`gradcheck`].

pub mod gradcheck;
mod tensor;

pub use gradcheck::{grad_check, Domain, GradCheckReport};
pub use tensor::Tensor;

use crate::error::{invalid, Result};
use crate::geometry::{
    acosh1p, artanh_ratio, clamp_in_place, distance_arg, dot, mobius_add_into, norm, tanh_ratio,
    MAX_NORM,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    /// Squared Poincaré-ball distance.
    Hyperbolic,
    /// Squared Euclidean distance.
    Euclidean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Artanh(Var),
    Acosh1p(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Exp0 { v: Var, clamped: Vec<bool> },
    Log0(Var),
    MobiusAdd { x: Var, y: Var, clamped: Vec<bool> },
    Project { v: Var, clamped: Vec<bool> },
    RowDistance(Var, Var),
    PairwiseSqDist { p: Var, z: Var, kind: DistanceKind },
    MlrLogits { x: Var, p: Var, a: Var },
    LogSumExpRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    adjoint: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Owner of a differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accum<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let adjoint = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            adjoint,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives an adjoint.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated adjoint of `v` over all backward passes since the last reset.
    pub fn adjoint(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].adjoint
    }

    pub fn zero_adjoints(&mut self) {
        for n in &mut self.nodes {
            n.adjoint.fill(0.0);
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * s).collect(),
        )
        .expect("shape preserved");
        self.push(out, Op::Scale(a, s), self.rg(&[a]))
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(invalid(format!(
                "add_row: row of shape {:?} against {:?}",
                tr.shape(),
                ta.shape()
            )));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), self.rg(&[a, row])))
    }

    /// Affine map `x Wᵀ + b` with `W` of shape `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tw.cols() != tx.cols() {
            return Err(invalid(format!(
                "linear: weight {:?} cannot act on input {:?}",
                tw.shape(),
                tx.shape()
            )));
        }
        let (m, n_in, n_out) = (tx.rows(), tx.cols(), tw.rows());
        let mut out = vec![0.0; m * n_out];
        for i in 0..m {
            let xi = tx.row(i);
            for o in 0..n_out {
                out[i * n_out + o] = dot(xi, tw.row(o));
            }
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n_out {
                return Err(invalid(format!(
                    "linear: bias of length {} for {} outputs",
                    tb.len(),
                    n_out
                )));
            }
            for i in 0..m {
                for o in 0..n_out {
                    out[i * n_out + o] += tb.data()[o];
                }
            }
        }
        debug_assert_eq!(n_in, tw.cols());
        let out = Tensor::matrix(m, n_out, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Matrix product of `m × k` and `k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(invalid(format!(
                "matmul: {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * tb.data()[p * n + j];
                }
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn artanh(&mut self, a: Var) -> Var {
        self.map(a, f64::atanh, Op::Artanh(a))
    }

    /// `acosh(1 + u)` in its cancellation-free form.
    pub fn acosh1p(&mut self, a: Var) -> Var {
        self.map(a, acosh1p, Op::Acosh1p(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or_else(|| invalid("concat_cols of nothing"))?;
        if parts.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(invalid("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in parts {
                out.extend_from_slice(self.value(*v).row(i));
            }
        }
        let out = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or_else(|| invalid("concat_rows of nothing"))?;
        if parts.iter().any(|v| self.value(*v).cols() != cols) {
            return Err(invalid("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        for v in parts {
            out.extend_from_slice(self.value(*v).data());
        }
        let rows = out.len() / cols.max(1);
        let out = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rows = ta.rows();
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid(format!("select_rows: index {bad} of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            out.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), ta.cols(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), rg))
    }

    /// Row-wise exponential map at the origin, clamped into the ball.
    pub fn exp0(&mut self, v: Var) -> Var {
        let mut out = self.value(v).clone();
        let mut clamped = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let s = tanh_ratio(norm(row));
            row.iter_mut().for_each(|c| *c *= s);
            clamped.push(clamp_in_place(row));
        }
        let rg = self.rg(&[v]);
        self.push(out, Op::Exp0 { v, clamped }, rg)
    }

    /// Row-wise logarithmic map at the origin.
    pub fn log0(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let s = artanh_ratio(norm(row));
            row.iter_mut().for_each(|c| *c *= s);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Log0(x), rg)
    }

    /// Row-wise Möbius sum; `y` may be a single row broadcast over `x`.
    pub fn mobius_add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if ty.cols() != tx.cols() || (ty.rows() != tx.rows() && ty.rows() != 1) {
            return Err(invalid(format!(
                "mobius_add: {:?} ⊕ {:?}",
                tx.shape(),
                ty.shape()
            )));
        }
        let broadcast = ty.rows() == 1;
        let mut out = tx.clone();
        let mut clamped = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            let yi = if broadcast { ty.row(0) } else { ty.row(i) };
            let o = out.row_mut(i);
            mobius_add_into(tx.row(i), yi, o);
            clamped.push(clamp_in_place(o));
        }
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, Op::MobiusAdd { x, y, clamped }, rg))
    }

    /// Row-wise clamp onto the admissible ball.
    pub fn project(&mut self, v: Var) -> Var {
        let mut out = self.value(v).clone();
        let clamped = (0..out.rows())
            .map(|i| clamp_in_place(out.row_mut(i)))
            .collect();
        let rg = self.rg(&[v]);
        self.push(out, Op::Project { v, clamped }, rg)
    }

    /// Row-wise Poincaré distance, as an `m × 1` column.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "row_distance")?;
        let d = (0..ta.rows())
            .map(|i| acosh1p(distance_arg(ta.row(i), tb.row(i))))
            .collect::<Vec<_>>();
        let out = Tensor::matrix(ta.rows(), 1, d)?;
        Ok(self.push(out, Op::RowDistance(a, b), self.rg(&[a, b])))
    }

    /// All-pairs squared distances between rows of `p` (`m × n`) and `z` (`k × n`).
    pub fn pairwise_sq_dist(&mut self, p: Var, z: Var, kind: DistanceKind) -> Result<Var> {
        let (tp, tz) = (self.value(p), self.value(z));
        if tp.cols() != tz.cols() {
            return Err(invalid("pairwise_sq_dist: dimensions differ"));
        }
        let (m, k) = (tp.rows(), tz.rows());
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let pi = tp.row(i);
            for j in 0..k {
                out[i * k + j] = match kind {
                    DistanceKind::Hyperbolic => acosh1p(distance_arg(pi, tz.row(j))).powi(2),
                    DistanceKind::Euclidean => pi
                        .iter()
                        .zip(tz.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum(),
                };
            }
        }
        let out = Tensor::matrix(m, k, out)?;
        Ok(self.push(out, Op::PairwiseSqDist { p, z, kind }, self.rg(&[p, z])))
    }

    /// Hyperbolic multiclass logistic regression logits.
    ///
    /// `p` holds one prototype per row (on the ball), `a` the matching normals.
    pub fn mlr_logits(&mut self, x: Var, p: Var, a: Var) -> Result<Var> {
        let (tx, tp, ta) = (self.value(x), self.value(p), self.value(a));
        same_shape(tp, ta, "mlr_logits")?;
        if tx.cols() != tp.cols() {
            return Err(invalid("mlr_logits: input and prototype dimensions differ"));
        }
        let (m, k) = (tx.rows(), tp.rows());
        let mut out = vec![0.0; m * k];
        for c in 0..k {
            let pc = tp.row(c);
            if norm(ta.row(c)) == 0.0 {
                return Err(crate::Error::DegenerateClass(c));
            }
            let neg_p: Vec<f64> = pc.iter().map(|v| -v).collect();
            for i in 0..m {
                out[i * k + c] = mlr_forward(&neg_p, tx.row(i), ta.row(c)).logit;
            }
        }
        let out = Tensor::matrix(m, k, out)?;
        Ok(self.push(out, Op::MlrLogits { x, p, a }, self.rg(&[x, p, a])))
    }

    /// Row-wise log-sum-exp, as an `m × 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let vals = (0..ta.rows()).map(|i| lse(ta.row(i))).collect();
        let out = Tensor::matrix(ta.rows(), 1, vals).expect("column");
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSumExpRows(a), rg)
    }

    /// Mean softmax cross-entropy of logit rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() || tl.rows() == 0 {
            return Err(invalid(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                tl.rows()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(invalid(format!(
                "cross_entropy: class {bad} of {}",
                tl.cols()
            )));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = tl.row(i);
                lse(row) - row[t]
            })
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `Σ wᵢ aᵢ` over all elements.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if weights.len() != t.len() {
            return Err(invalid("weighted_sum: weight count mismatch"));
        }
        let s = dot(t.data(), &weights);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    /// Accumulates `∂output/∂node` into every node's adjoint.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(invalid(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            self.nodes[idx].adjoint.add_assign(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accum(grads, v, g).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accum(grads, *a, g).add_assign(g);
                }
                if wants(*b) {
                    let gb = accum(grads, *b, g);
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let ov = val(other).data().to_vec();
                        let gv = accum(grads, v, g);
                        for ((o, x), y) in gv.data_mut().iter_mut().zip(g.data()).zip(&ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = accum(grads, *a, g);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * x;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    accum(grads, *a, g).add_assign(g);
                }
                if wants(*r) {
                    let gr = accum(grads, *r, val(*r));
                    for i in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, n_in, n_out) = (tx.rows(), tx.cols(), tw.rows());
                if wants(*x) {
                    let gx = accum(grads, *x, tx);
                    for i in 0..m {
                        let gi = g.row(i);
                        let row = gx.row_mut(i);
                        for (o, go) in gi.iter().enumerate() {
                            let wo = tw.row(o);
                            for (r, wv) in row.iter_mut().zip(wo) {
                                *r += go * wv;
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = accum(grads, *w, tw);
                    for i in 0..m {
                        let xi = tx.row(i);
                        for o in 0..n_out {
                            let go = g.data()[i * n_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let row = &mut gw.data_mut()[o * n_in..(o + 1) * n_in];
                            for (r, xv) in row.iter_mut().zip(xi) {
                                *r += go * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = accum(grads, *b, val(*b));
                        for i in 0..m {
                            for (o, x) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let ga = accum(grads, *a, ta);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            ga.data_mut()[i * k + p] += s;
                        }
                    }
                }
                if wants(*b) {
                    let gb = accum(grads, *b, tb);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                gb.data_mut()[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Tanh(a) => self.unary_back(*a, g, grads, |_, y| 1.0 - y * y, &node.value),
            Op::Sigmoid(a) => self.unary_back(*a, g, grads, |_, y| y * (1.0 - y), &node.value),
            Op::Artanh(a) => self.unary_back(*a, g, grads, |x, _| 1.0 / (1.0 - x * x), &node.value),
            Op::Acosh1p(a) => self.unary_back(
                *a,
                g,
                grads,
                |u, _| {
                    if u > 0.0 {
                        1.0 / (u * (u + 2.0)).sqrt()
                    } else {
                        0.0
                    }
                },
                &node.value,
            ),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for v in parts {
                    let c = val(*v).cols();
                    if wants(*v) {
                        let gv = accum(grads, *v, val(*v));
                        for i in 0..g.rows() {
                            let src = &g.row(i)[offset..offset + c];
                            for (o, x) in gv.row_mut(i).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let len = val(*v).len();
                    if wants(*v) {
                        let gv = accum(grads, *v, val(*v));
                        for (o, x) in gv
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *o += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::SelectRows(a, idx) => {
                if wants(*a) {
                    let ga = accum(grads, *a, val(*a));
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Exp0 { v, clamped } => {
                if wants(*v) {
                    let tv = val(*v);
                    let gv = accum(grads, *v, tv);
                    for (i, &was_clamped) in clamped.iter().enumerate() {
                        let row = tv.row(i);
                        let gi = g.row(i);
                        let n = norm(row);
                        let out = gv.row_mut(i);
                        if was_clamped {
                            clamp_vjp(row, n, gi, out);
                        } else {
                            let f = tanh_ratio(n);
                            let fp = if n < 1e-3 {
                                -2.0 / 3.0 + 8.0 * n * n / 15.0
                            } else {
                                let t = n.tanh();
                                (n * (1.0 - t * t) - t) / (n * n * n)
                            };
                            let vg = dot(row, gi);
                            for ((o, gk), vk) in out.iter_mut().zip(gi).zip(row) {
                                *o += f * gk + fp * vg * vk;
                            }
                        }
                    }
                }
            }
            Op::Log0(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let gx = accum(grads, *x, tx);
                    for i in 0..tx.rows() {
                        let row = tx.row(i);
                        let gi = g.row(i);
                        let n = norm(row);
                        let h = artanh_ratio(n);
                        let hp = if n < 1e-3 {
                            2.0 / 3.0 + 4.0 * n * n / 5.0
                        } else {
                            (n / (1.0 - n * n) - n.atanh()) / (n * n * n)
                        };
                        let xg = dot(row, gi);
                        for ((o, gk), xk) in gx.row_mut(i).iter_mut().zip(gi).zip(row) {
                            *o += h * gk + hp * xg * xk;
                        }
                    }
                }
            }
            Op::MobiusAdd { x, y, clamped } => {
                let (tx, ty) = (val(*x), val(*y));
                let broadcast = ty.rows() == 1 && tx.rows() != 1;
                let dim = tx.cols();
                let mut gx_all = vec![0.0; tx.len()];
                let mut gy_all = vec![0.0; if broadcast { dim } else { ty.len() }];
                let mut pre = vec![0.0; dim];
                let mut gpre = vec![0.0; dim];
                for i in 0..tx.rows() {
                    let xi = tx.row(i);
                    let yi = if broadcast { ty.row(0) } else { ty.row(i) };
                    let gi = g.row(i);
                    if clamped[i] {
                        mobius_add_into(xi, yi, &mut pre);
                        gpre.fill(0.0);
                        clamp_vjp(&pre, norm(&pre), gi, &mut gpre);
                    } else {
                        gpre.copy_from_slice(gi);
                    }
                    let gx = &mut gx_all[i * dim..(i + 1) * dim];
                    let gy = if broadcast {
                        &mut gy_all[..]
                    } else {
                        &mut gy_all[i * dim..(i + 1) * dim]
                    };
                    mobius_add_vjp(xi, yi, &gpre, gx, gy);
                }
                if wants(*x) {
                    let gx = accum(grads, *x, tx);
                    for (o, v) in gx.data_mut().iter_mut().zip(&gx_all) {
                        *o += v;
                    }
                }
                if wants(*y) {
                    let gy = accum(grads, *y, ty);
                    for (o, v) in gy.data_mut().iter_mut().zip(&gy_all) {
                        *o += v;
                    }
                }
            }
            Op::Project { v, clamped } => {
                if wants(*v) {
                    let tv = val(*v);
                    let gv = accum(grads, *v, tv);
                    for (i, &was_clamped) in clamped.iter().enumerate() {
                        let gi = g.row(i);
                        if was_clamped {
                            let row = tv.row(i);
                            clamp_vjp(row, norm(row), gi, gv.row_mut(i));
                        } else {
                            for (o, x) in gv.row_mut(i).iter_mut().zip(gi) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::RowDistance(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let dim = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..ta.rows() {
                    let (x, y) = (ta.row(i), tb.row(i));
                    let u = distance_arg(x, y);
                    if u <= 0.0 {
                        continue;
                    }
                    let coef = g.data()[i] / (u * (u + 2.0)).sqrt();
                    distance_arg_vjp(
                        x,
                        y,
                        coef,
                        &mut ga[i * dim..(i + 1) * dim],
                        &mut gb[i * dim..(i + 1) * dim],
                    );
                }
                if wants(*a) {
                    let t = accum(grads, *a, ta);
                    t.data_mut().iter_mut().zip(&ga).for_each(|(o, v)| *o += v);
                }
                if wants(*b) {
                    let t = accum(grads, *b, tb);
                    t.data_mut().iter_mut().zip(&gb).for_each(|(o, v)| *o += v);
                }
            }
            Op::PairwiseSqDist { p, z, kind } => {
                let (tp, tz) = (val(*p), val(*z));
                let (m, k, dim) = (tp.rows(), tz.rows(), tp.cols());
                let mut gp = vec![0.0; tp.len()];
                let mut gz = vec![0.0; tz.len()];
                for i in 0..m {
                    let pi = tp.row(i);
                    for j in 0..k {
                        let gij = g.data()[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let zj = tz.row(j);
                        let (gpi, gzj) = (
                            &mut gp[i * dim..(i + 1) * dim],
                            &mut gz[j * dim..(j + 1) * dim],
                        );
                        match kind {
                            DistanceKind::Hyperbolic => {
                                let u = distance_arg(pi, zj);
                                let coef = gij * sq_acosh1p_slope(u);
                                distance_arg_vjp(pi, zj, coef, gpi, gzj);
                            }
                            DistanceKind::Euclidean => {
                                for ((a, b), (ga, gb)) in
                                    pi.iter().zip(zj).zip(gpi.iter_mut().zip(gzj.iter_mut()))
                                {
                                    let d = 2.0 * gij * (a - b);
                                    *ga += d;
                                    *gb -= d;
                                }
                            }
                        }
                    }
                }
                if wants(*p) {
                    let t = accum(grads, *p, tp);
                    t.data_mut().iter_mut().zip(&gp).for_each(|(o, v)| *o += v);
                }
                if wants(*z) {
                    let t = accum(grads, *z, tz);
                    t.data_mut().iter_mut().zip(&gz).for_each(|(o, v)| *o += v);
                }
            }
            Op::MlrLogits { x, p, a } => {
                let (tx, tp, ta) = (val(*x), val(*p), val(*a));
                let (m, k, dim) = (tx.rows(), tp.rows(), tx.cols());
                let mut gx = vec![0.0; tx.len()];
                let mut gp = vec![0.0; tp.len()];
                let mut ga = vec![0.0; ta.len()];
                let mut gnp = vec![0.0; dim];
                for c in 0..k {
                    let neg_p: Vec<f64> = tp.row(c).iter().map(|v| -v).collect();
                    let ac = ta.row(c);
                    for i in 0..m {
                        let gl = g.data()[i * k + c];
                        if gl == 0.0 {
                            continue;
                        }
                        gnp.fill(0.0);
                        mlr_vjp(
                            &neg_p,
                            tx.row(i),
                            ac,
                            gl,
                            &mut gnp,
                            &mut gx[i * dim..(i + 1) * dim],
                            &mut ga[c * dim..(c + 1) * dim],
                        );
                        for (o, v) in gp[c * dim..(c + 1) * dim].iter_mut().zip(&gnp) {
                            *o -= v;
                        }
                    }
                }
                for (v, buf) in [(*x, &gx), (*p, &gp), (*a, &ga)] {
                    if wants(v) {
                        let t = accum(grads, v, val(v));
                        t.data_mut()
                            .iter_mut()
                            .zip(buf.iter())
                            .for_each(|(o, b)| *o += b);
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(*a) {
                    let ta = val(*a);
                    let ga = accum(grads, *a, ta);
                    for i in 0..ta.rows() {
                        let row = ta.row(i);
                        let l = node.value.data()[i];
                        let gi = g.data()[i];
                        for (o, x) in ga.row_mut(i).iter_mut().zip(row) {
                            *o += gi * (x - l).exp();
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(*logits) {
                    let tl = val(*logits);
                    let scale = g.item() / targets.len() as f64;
                    let gl = accum(grads, *logits, tl);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = tl.row(i);
                        let l = lse(row);
                        let out = gl.row_mut(i);
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += scale * (x - l).exp();
                        }
                        out[t] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let s = g.item();
                    let ga = accum(grads, *a, val(*a));
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let s = g.item() / val(*a).len() as f64;
                    let ga = accum(grads, *a, val(*a));
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::WeightedSum(a, w) => {
                if wants(*a) {
                    let s = g.item();
                    let ga = accum(grads, *a, val(*a));
                    ga.data_mut()
                        .iter_mut()
                        .zip(w)
                        .for_each(|(o, wi)| *o += s * wi);
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &Tensor,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let ta = &self.nodes[a.0].value;
        let ga = accum(grads, a, ta);
        for (((o, x), y), gi) in ga
            .data_mut()
            .iter_mut()
            .zip(ta.data())
            .zip(out.data())
            .zip(g.data())
        {
            *o += gi * deriv(*x, *y);
        }
    }
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Adjoint of the radial clamp `v ↦ MAX_NORM · v/‖v‖`.
fn clamp_vjp(v: &[f64], n: f64, g: &[f64], out: &mut [f64]) {
    let vg = dot(v, g) / (n * n);
    let s = MAX_NORM / n;
    for ((o, gk), vk) in out.iter_mut().zip(g).zip(v) {
        *o += s * (gk - vg * vk);
    }
}

/// Adjoint of the unclamped Möbius sum, accumulated into `gx` and `gy`.
fn mobius_add_vjp(x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let xy = dot(x, y);
    let xx = dot(x, x);
    let yy = dot(y, y);
    let a = 1.0 + 2.0 * xy + yy;
    let b = 1.0 - xx;
    let den = 1.0 + 2.0 * xy + xx * yy;
    // out = (a x + b y) / den
    let gn_dot_num: f64 = g
        .iter()
        .zip(x.iter().zip(y))
        .map(|(gk, (xk, yk))| gk * (a * xk + b * yk))
        .sum();
    let g_den = -gn_dot_num / (den * den);
    let g_a = dot(g, x) / den;
    let g_b = dot(g, y) / den;
    for k in 0..x.len() {
        let gn = g[k] / den;
        gx[k] +=
            a * gn + 2.0 * g_a * y[k] - 2.0 * g_b * x[k] + g_den * (2.0 * y[k] + 2.0 * yy * x[k]);
        gy[k] += b * gn + 2.0 * g_a * (x[k] + y[k]) + g_den * (2.0 * x[k] + 2.0 * xx * y[k]);
    }
}

/// Adjoint of the distance argument `u(x, y)` scaled by `coef`.
fn distance_arg_vjp(x: &[f64], y: &[f64], coef: f64, gx: &mut [f64], gy: &mut [f64]) {
    let ax = 1.0 - dot(x, x);
    let ay = 1.0 - dot(y, y);
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let c = coef * 4.0 / (ax * ay);
    for k in 0..x.len() {
        let diff = x[k] - y[k];
        gx[k] += c * (diff + s / ax * x[k]);
        gy[k] += c * (-diff + s / ay * y[k]);
    }
}

/// `d/du acosh(1 + u)²`, finite at `u = 0`.
fn sq_acosh1p_slope(u: f64) -> f64 {
    if u < 1e-8 {
        2.0 * (1.0 - u / 3.0)
    } else {
        2.0 * acosh1p(u) / (u * (u + 2.0)).sqrt()
    }
}

struct MlrForward {
    logit: f64,
    w: Vec<f64>,
    clamped: bool,
    pre: Vec<f64>,
}

fn mlr_forward(neg_p: &[f64], x: &[f64], a: &[f64]) -> MlrForward {
    let mut w = vec![0.0; x.len()];
    mobius_add_into(neg_p, x, &mut w);
    let pre = w.clone();
    let clamped = clamp_in_place(&mut w);
    let lambda = 2.0 / (1.0 - dot(neg_p, neg_p));
    let na = norm(a);
    let arg = 2.0 * dot(&w, a) / ((1.0 - dot(&w, &w)) * na);
    MlrForward {
        logit: lambda * na * arg.asinh(),
        w,
        clamped,
        pre,
    }
}

#[allow(clippy::too_many_arguments)]
fn mlr_vjp(
    neg_p: &[f64],
    x: &[f64],
    a: &[f64],
    gl: f64,
    g_negp: &mut [f64],
    gx: &mut [f64],
    ga: &mut [f64],
) {
    let fwd = mlr_forward(neg_p, x, a);
    let w = &fwd.w;
    let pp = dot(neg_p, neg_p);
    let lambda = 2.0 / (1.0 - pp);
    let na = norm(a);
    let q = dot(w, a);
    let ww = dot(w, w);
    let den = (1.0 - ww) * na;
    let arg = 2.0 * q / den;
    let as_arg = arg.asinh();

    let d_arg = gl * lambda * na / (1.0 + arg * arg).sqrt();
    let d_q = d_arg * 2.0 / den;
    let d_ww = d_arg * 2.0 * q / ((1.0 - ww) * den);
    let d_na = gl * lambda * as_arg - d_arg * 2.0 * q / (den * na);
    let d_lambda = gl * na * as_arg;

    let dim = x.len();
    let mut gw: Vec<f64> = (0..dim).map(|k| d_q * a[k] + 2.0 * d_ww * w[k]).collect();
    if fwd.clamped {
        let mut g2 = vec![0.0; dim];
        clamp_vjp(&fwd.pre, norm(&fwd.pre), &gw, &mut g2);
        gw = g2;
    }
    mobius_add_vjp(neg_p, x, &gw, g_negp, gx);
    // λ = 2/(1 − ‖p‖²) depends on p only through ‖p‖² = ‖−p‖²
    for k in 0..dim {
        g_negp[k] += d_lambda * lambda * lambda * neg_p[k];
        ga[k] += d_q * w[k] + d_na * a[k] / na;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let x = g.param(m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.adjoint(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.adjoint(x).data(), &[2.0, 2.0]);
        g.zero_adjoints();
        assert_eq!(g.adjoint(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn squared_distance_is_stationary_at_coincidence() {
        let mut g = Graph::new();
        let a = g.param(m(1, 2, &[0.3, -0.4]));
        let b = g.param(m(1, 2, &[0.3, -0.4]));
        let d = g.pairwise_sq_dist(a, b, DistanceKind::Hyperbolic).unwrap();
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert!(g.adjoint(a).data().iter().all(|v| v.abs() < 1e-15));
        assert!(g.adjoint(b).data().iter().all(|v| v.abs() < 1e-15));

        // the unsquared distance has a zero subgradient there
        let mut g = Graph::new();
        let a = g.param(m(1, 2, &[0.3, -0.4]));
        let b = g.param(m(1, 2, &[0.3, -0.4]));
        let d = g.row_distance(a, b).unwrap();
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert!(g.adjoint(a).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fan_out_sums_path_adjoints() {
        // y = tanh(x) + 3x  ⇒ dy/dx = 1 − tanh²x + 3
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.7]));
        let t = g.tanh(x);
        let s = g.scale(x, 3.0);
        let y = g.add(t, s).unwrap();
        let out = g.sum(y);
        g.backward(out).unwrap();
        let expected = 1.0 - 0.7f64.tanh().powi(2) + 3.0;
        assert!((g.adjoint(x).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_propagation() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(c, x).unwrap();
        let d = g.detach(y);
        let z = g.add(y, d).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.adjoint(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(m(2, 3, &[0.0; 6]));
        let b = g.param(m(3, 2, &[0.0; 6]));
        assert!(g.add(a, b).is_err());
        assert!(g.linear(a, b, None).is_err());
        assert!(g.select_rows(a, &[5]).is_err());
        assert!(g.cross_entropy(a, &[0]).is_err());
        let zero = g.param(m(1, 3, &[0.0; 3]));
        assert!(matches!(
            g.mlr_logits(a, zero, zero),
            Err(crate::Error::DegenerateClass(0))
        ));
    }
}
