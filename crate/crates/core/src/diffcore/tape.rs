//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly, appends a node holding
//! its value, and returns a [`Var`] handle. Nodes are stored in creation
//! order, which is a topological order of the expression graph, so
//! [`Tape::backward`] is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::DiffError;

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Var, Var),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    Reshape(Var),
    MaskedSoftmax(Var),
    WeightedSum(Var, Var),
    Sum(Var),
    Mean(Var),
    SigmoidBce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Gradient of the last backward pass with respect to `v`, if `v` took part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.push("matmul", Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::with_shape(ta.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector `b` (length n) to every row of `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if ta.shape().len() != 2 || tb.len() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::with_shape(ta.shape().to_vec(), data);
        self.push("add_row", value, Op::AddRow(a, b), &[a, b])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::with_shape(ta.shape().to_vec(), data);
        self.push("affine", value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::with_shape(ta.shape().to_vec(), data);
        self.push(name, value, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Column-wise concatenation of `[m, p]` and `[m, q]` into `[m, p + q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(mismatch("concat", ta, tb));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let value = Tensor::with_shape(vec![m, p + q], data);
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    /// Stacks `times` copies of a row vector into `[times, n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.len();
        let mut data = Vec::with_capacity(times * n);
        for _ in 0..times {
            data.extend_from_slice(ta.data());
        }
        let value = Tensor::with_shape(vec![times, n], data);
        self.push("repeat_rows", value, Op::RepeatRows(a), &[a])
    }

    /// Embedding lookup: rows `ids` of `table` stacked into `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    len: vocab,
                });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::with_shape(vec![ids.len(), d], data);
        self.push("gather", value, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Row `index` of a 2-d tensor as a `[1, n]` row vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.rows() {
            return Err(DiffError::IndexOutOfRange {
                op: "row",
                index,
                len: ta.rows(),
            });
        }
        let n = ta.cols();
        let value = Tensor::row(ta.data()[index * n..(index + 1) * n].to_vec());
        self.push("row", value, Op::Row(a, index), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::with_shape(shape.to_vec(), ta.data().to_vec());
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Softmax over the entries whose `mask` flag is true; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, s: Var, mask: &[bool]) -> Result<Var> {
        let ts = self.value(s);
        if mask.len() != ts.len() {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax",
                left: ts.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let max = ts
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DiffError::AllMasked);
        }
        let mut data: Vec<f64> = ts
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = data.iter().sum();
        data.iter_mut().for_each(|x| *x /= total);
        let value = Tensor::with_shape(ts.shape().to_vec(), data);
        self.push("masked_softmax", value, Op::MaskedSoftmax(s), &[s])
    }

    /// `sum_i alpha_i * v_i` over the rows of `v` (`[K, d]`), giving `[1, d]`.
    pub fn weighted_sum(&mut self, v: Var, alpha: Var) -> Result<Var> {
        let (tv, ta) = (self.value(v), self.value(alpha));
        if tv.shape().len() != 2 || ta.len() != tv.rows() {
            return Err(mismatch("weighted_sum", tv, ta));
        }
        let d = tv.cols();
        let mut out = vec![0.0; d];
        for (row, &w) in tv.data().chunks(d).zip(ta.data()) {
            if w == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
        self.push("weighted_sum", Tensor::row(out), Op::WeightedSum(v, alpha), &[v, alpha])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mean = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push("mean", Tensor::scalar(mean), Op::Mean(a), &[a])
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against soft targets,
    /// in the overflow-free form `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() {
            return Err(DiffError::ShapeMismatch {
                op: "sigmoid_bce",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            "sigmoid_bce",
            Tensor::scalar(loss),
            Op::SigmoidBce(logits, targets.to_vec()),
            &[logits],
        )
    }

    /// Populates gradients of `loss` for every node that requires one.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(DiffError::NotScalar(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            node.grad = Some(Tensor::with_shape(node.value.shape().to_vec(), g));
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if wants(*b) {
                    let n = len_of(*b);
                    let gb = accumulate(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Affine(a, scale) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o += scale * x);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((o, &x), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += x * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((o, &x), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += x * yv * (1.0 - yv);
                }
            }
            Op::Relu(a) => {
                let input = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((o, &x), &iv) in ga.iter_mut().zip(g).zip(input) {
                    if iv > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let width = p + q;
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], len_of(*a));
                    for (i, row) in g.chunks(width).enumerate() {
                        ga[i * p..(i + 1) * p]
                            .iter_mut()
                            .zip(&row[..p])
                            .for_each(|(o, &x)| *o += x);
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], len_of(*b));
                    for (i, row) in g.chunks(width).enumerate() {
                        gb[i * q..(i + 1) * q]
                            .iter_mut()
                            .zip(&row[p..])
                            .for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::RepeatRows(a) => {
                let n = len_of(*a);
                let ga = accumulate(&mut grads[a.0], n);
                for row in g.chunks(n) {
                    ga.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                }
            }
            Op::Gather(table, ids) => {
                let d = self.value(*table).cols();
                let gt = accumulate(&mut grads[table.0], len_of(*table));
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(o, &x)| *o += x);
                }
            }
            Op::Row(a, index) => {
                let n = g.len();
                let ga = accumulate(&mut grads[a.0], len_of(*a));
                ga[index * n..(index + 1) * n]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, &x)| *o += x);
            }
            Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
            }
            Op::MaskedSoftmax(s) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let gs = accumulate(&mut grads[s.0], g.len());
                for ((o, &yv), &gv) in gs.iter_mut().zip(y).zip(g) {
                    *o += yv * (gv - dot);
                }
            }
            Op::WeightedSum(v, alpha) => {
                let (tv, ta) = (self.value(*v), self.value(*alpha));
                let d = tv.cols();
                if wants(*v) {
                    let gv = accumulate(&mut grads[v.0], tv.len());
                    for (row, &w) in gv.chunks_mut(d).zip(ta.data()) {
                        row.iter_mut().zip(g).for_each(|(o, &x)| *o += w * x);
                    }
                }
                if wants(*alpha) {
                    let ga = accumulate(&mut grads[alpha.0], ta.len());
                    for (o, row) in ga.iter_mut().zip(tv.data().chunks(d)) {
                        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Sum(a) => {
                let ga = accumulate(&mut grads[a.0], len_of(*a));
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let n = len_of(*a);
                let ga = accumulate(&mut grads[a.0], n);
                let share = g[0] / n as f64;
                ga.iter_mut().for_each(|o| *o += share);
            }
            Op::SigmoidBce(logits, targets) => {
                let x = self.value(*logits).data();
                let gl = accumulate(&mut grads[logits.0], x.len());
                for ((o, &xv), &y) in gl.iter_mut().zip(x).zip(targets) {
                    *o += g[0] * (sigmoid(xv) - y);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_identity_is_noop() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 4.0, -1.0]).unwrap())
            .unwrap();
        let i = tape.constant(Tensor::identity(3)).unwrap();
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_small_product() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(out).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
        let a = tape.masked_softmax(s, &[true, true]).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5]);

        let s = tape.constant(Tensor::row(vec![5.0, 1.0, 1.0])).unwrap();
        let a = tape.masked_softmax(s, &[true, false, true]).unwrap();
        let v = tape.value(a).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(tape.masked_softmax(s, &[false, false]), Err(DiffError::AllMasked));
    }

    #[test]
    fn bce_at_zero_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0; 3])).unwrap();
        let l = tape.sigmoid_bce(x, &[0.0; 3]).unwrap();
        assert!((tape.value(l).item() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_positive_vanishes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![30.0])).unwrap();
        let l = tape.sigmoid_bce(x, &[1.0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-9);
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(DiffError::TapeConsumed));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        assert!(tape.constant(Tensor::row(vec![f64::NAN])).is_err());
        let x = tape.constant(Tensor::row(vec![1e308])).unwrap();
        assert!(matches!(tape.affine(x, 10.0, 0.0), Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![2.0])).unwrap();
        let x = tape.param(Tensor::row(vec![3.0])).unwrap();
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }
}
