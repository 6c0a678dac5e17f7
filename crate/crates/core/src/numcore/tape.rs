//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value, its producing operation and, after [`Tape::backward`], its
//! accumulated gradient. Nodes are appended in evaluation order, so walking
//! the node list backwards is a valid reverse topological order.
//!
//! Parameters are not owned by the tape: callers insert them as leaves at
//! the start of a pass and read gradients back once backward has run.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written backward rule.
///
/// `backward` receives the input values in registration order, the forward
/// output and the gradient flowing into that output, and returns one
/// gradient per input (same shape as the input).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Mat>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    RowSoftmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    ReverseRows(Var),
    BroadcastRows(Var),
    Unfold3(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    requires_grad: bool,
    op: Op,
}

/// Per-pass differentiation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Mat) -> (usize, usize) {
    m.dim()
}

fn check_finite(op: &'static str, m: &Mat) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of a plain matrix, stabilized by the row maximum.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Rows `[x_{t-1}, x_t, x_{t+1}]` with zero padding at both ends.
fn unfold3(x: &Mat) -> Mat {
    let (t, c) = x.dim();
    let mut out = Mat::zeros((t, 3 * c));
    for i in 0..t {
        if i > 0 {
            out.slice_mut(s![i, 0..c]).assign(&x.row(i - 1));
        }
        out.slice_mut(s![i, c..2 * c]).assign(&x.row(i));
        if i + 1 < t {
            out.slice_mut(s![i, 2 * c..3 * c]).assign(&x.row(i + 1));
        }
    }
    out
}

fn reverse_rows(x: &Mat) -> Mat {
    x.slice(s![..;-1, ..]).to_owned()
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

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros before backward or off the differentiable path.
    pub fn grad(&self, v: Var) -> Mat {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Mat::zeros(node.value.dim()),
        }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim("matmul", shape(va), shape(vb)));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::dim("matmul_t", shape(va), shape(vb)));
        }
        let out = va.dot(&vb.t());
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a 1×n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::dim("add_row", sa, sr));
        }
        let out = self.value(a) + self.value(row);
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("row_softmax", self.value(a))?;
        let out = softmax_rows(self.value(a));
        Ok(self.push(out, Op::RowSoftmax(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa.1 {
            return Err(Error::dim("slice_cols", sa, (start, end)));
        }
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Stacks 1×n rows into a k×n matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Input("stack_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        for &r in rows {
            let sr = self.shape(r);
            if sr.0 != 1 || sr.1 != cols {
                return Err(Error::dim("stack_rows", (1, cols), sr));
            }
        }
        let views: Vec<_> = rows.iter().map(|r| self.value(*r).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("shapes checked");
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let sa = self.shape(a);
        if i >= sa.0 {
            return Err(Error::dim("row", sa, (i, 0)));
        }
        let out = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        Ok(self.push(out, Op::Row(a, i), &[a]))
    }

    /// Row lookup (embedding table).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= st.0) {
            return Err(Error::Input(format!("row id {bad} out of range for table with {} rows", st.0)));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let out = self.value(table).select(Axis(0), ids);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let out = reverse_rows(self.value(a));
        self.push(out, Op::ReverseRows(a), &[a])
    }

    /// Repeats a 1×n row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.0 != 1 || m == 0 {
            return Err(Error::dim("broadcast_rows", sa, (m, sa.1)));
        }
        let out = self.value(a).broadcast((m, sa.1)).expect("1×n broadcasts").to_owned();
        Ok(self.push(out, Op::BroadcastRows(a), &[a]))
    }

    /// Kernel-3 temporal neighbourhood with zero padding: T×C → T×3C.
    pub fn unfold3(&mut self, a: Var) -> Var {
        let out = unfold3(self.value(a));
        self.push(out, Op::Unfold3(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Column means as a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Records the output of a [`CustomOp`] computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Mat, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Back-propagates from a 1×1 output. Gradients accumulate into every
    /// reachable node that requires them.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let so = self.shape(out);
        if so != (1, 1) {
            return Err(Error::dim("backward", so, (1, 1)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &Mat) -> Vec<(Var, Mat)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![(*a, g.dot(&val(*b).t())), (*b, val(*a).t().dot(g))],
            Op::MatMulT(a, b) => vec![(*a, g.dot(val(*b))), (*b, g.t().dot(val(*a)))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
            Op::Scale(a, k) => vec![(*a, g * *k)],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                vec![(*a, d)]
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                vec![(*a, d)]
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(*a, d)]
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= sigmoid(x));
                vec![(*a, d)]
            }
            Op::RowSoftmax(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &p| *d -= p * dot);
                }
                vec![(*a, d)]
            }
            Op::Transpose(a) => vec![(*a, g.t().to_owned())],
            Op::ConcatCols(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(*p).ncols();
                        let piece = g.slice(s![.., start..start + w]).to_owned();
                        start += w;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                vec![(*a, d)]
            }
            Op::StackRows(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, r)| (*r, g.slice(s![i..i + 1, ..]).to_owned()))
                .collect(),
            Op::Row(a, i) => {
                let mut d = Mat::zeros(val(*a).dim());
                d.slice_mut(s![*i..*i + 1, ..]).assign(g);
                vec![(*a, d)]
            }
            Op::Gather(table, ids) => {
                let mut d = Mat::zeros(val(*table).dim());
                for (k, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(k);
                }
                vec![(*table, d)]
            }
            Op::ReverseRows(a) => vec![(*a, reverse_rows(g))],
            Op::BroadcastRows(a) => vec![(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::Unfold3(a) => {
                let (t, c) = val(*a).dim();
                let mut d = Mat::zeros((t, c));
                for i in 0..t {
                    let mut row = d.row_mut(i);
                    row += &g.slice(s![i, c..2 * c]);
                    if i > 0 {
                        row += &g.slice(s![i - 1, 2 * c..3 * c]);
                    }
                    if i + 1 < t {
                        row += &g.slice(s![i + 1, 0..c]);
                    }
                }
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, Mat::from_elem(val(*a).dim(), g[[0, 0]]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Mat::from_elem(val(*a).dim(), g[[0, 0]] / n))]
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dim();
                let row = g / m as f64;
                vec![(*a, row.broadcast((m, n)).expect("1×n").to_owned())]
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Mat> = inputs.iter().map(|v| val(*v)).collect();
                let grads = op.backward(&values, y, g);
                debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::new();
        let i = tape.constant(Mat::eye(2));
        let x = tape.constant(array![[1.5, -2.0], [0.25, 4.0]]);
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[1.0], [1.0]]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &array![[3.0], [7.0]]);

        let z = tape.constant(Mat::zeros((2, 3)));
        let w = tape.constant(Mat::from_elem((3, 4), 7.0));
        let out = tape.matmul(z, w).unwrap();
        assert_eq!(tape.value(out), &Mat::zeros((2, 4)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::zeros((2, 3)));
        let b = tape.constant(Mat::zeros((2, 3)));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Dimension { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.0, 0.0], [2f64.ln(), 0.0]]);
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((v[[1, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[[1, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.0, f64::NAN]]);
        assert!(matches!(tape.row_softmax(x), Err(Error::NonFinite(_))));
        let x = tape.constant(array![[f64::INFINITY, 0.0]]);
        assert!(matches!(tape.row_softmax(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn elementwise_laws() {
        let mut tape = Tape::new();
        let zero = tape.constant(Mat::zeros((1, 1)));
        let s = tape.sigmoid(zero);
        assert_eq!(tape.scalar(s), 0.5);

        let a = tape.constant(Mat::zeros((2, 3)));
        let b = tape.constant(Mat::zeros((2, 2)));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), (2, 5));

        let x = tape.constant(array![[1.0, -2.0], [3.5, 0.0]]);
        let ones = tape.constant(Mat::ones((2, 2)));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = tape.add(a, b);
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        for &x in &[-30.0, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn off_path_tensors_keep_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[2.0]], true);
        let c = tape.constant(array![[3.0]]);
        let y = tape.mul(w, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w), array![[3.0]]);
        assert_eq!(tape.grad(c), array![[0.0]]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]], true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x), array![[7.0]]);
    }

    #[test]
    fn unfold3_pads_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0], [2.0], [3.0]]);
        let u = tape.unfold3(x);
        assert_eq!(tape.value(u), &array![[0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 0.0]]);
    }
}
