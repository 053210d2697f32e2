//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in reverse append order and
//! accumulates gradients into every node that requires them. The op set is
//! the closure needed by the message passing encoder and the similarity
//! losses; there is no broadcasting beyond explicit scalar multiplication.

use thiserror::Error;

use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on an empty tape")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiffError::Shape("ragged rows".into()));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(DiffError::Shape(format!("{what} needs a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Concat(Var, Var, Axis),
    SumRows(Var),
    Sum(Var),
    GatherSum(Var, Vec<Vec<usize>>),
    ScalarMul(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Log(Var),
    Exp(Var),
    RowSoftmax(Var),
    LogSoftmaxRows(Var),
    CosineRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Single-threaded; independent tapes
/// may run on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(DiffError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(Tensor { shape: vec![m, n], data: out }, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.derived(Tensor { shape: vec![n, m], data: out }, &[a], Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape.clone();
        Ok(self.derived(Tensor { shape, data }, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape.clone();
        Ok(self.derived(Tensor { shape, data }, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape.clone();
        Ok(self.derived(Tensor { shape, data }, &[a, b], Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape.clone();
        self.derived(Tensor { shape, data }, &[a], Op::Relu(a))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: Axis) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2("concat")?;
        let (rb, cb) = self.value(b).dims2("concat")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match axis {
            Axis::Rows => {
                if ca != cb {
                    return Err(DiffError::Shape(format!("concat rows: {ca} vs {cb} columns")));
                }
                let mut data = ta.data.clone();
                data.extend_from_slice(&tb.data);
                Tensor { shape: vec![ra + rb, ca], data }
            }
            Axis::Cols => {
                if ra != rb {
                    return Err(DiffError::Shape(format!("concat cols: {ra} vs {rb} rows")));
                }
                let mut data = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    data.extend_from_slice(&ta.data[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&tb.data[i * cb..(i + 1) * cb]);
                }
                Tensor { shape: vec![ra, ca + cb], data }
            }
        };
        Ok(self.derived(value, &[a, b], Op::Concat(a, b, axis)))
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        Ok(self.derived(Tensor { shape: vec![1, n], data: out }, &[a], Op::SumRows(a)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.derived(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Output row `i` is the sum of the rows of `a` listed in `index_lists[i]`
    /// (a zero row for an empty list).
    pub fn gather_sum(&mut self, a: Var, index_lists: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_sum")?;
        if let Some(bad) = index_lists.iter().flatten().find(|&&j| j >= m) {
            return Err(DiffError::Shape(format!("gather_sum index {bad} with {m} rows")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; index_lists.len() * n];
        par::for_each_row(&mut out, n, |i, row| {
            for &j in &index_lists[i] {
                for (o, x) in row.iter_mut().zip(&src[j * n..(j + 1) * n]) {
                    *o += x;
                }
            }
        });
        let shape = vec![index_lists.len(), n];
        Ok(self.derived(Tensor { shape, data: out }, &[a], Op::GatherSum(a, index_lists)))
    }

    /// Selects rows by index (rows may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.gather_sum(a, rows.iter().map(|&r| vec![r]).collect())
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        self.derived(Tensor { shape, data }, &[a], Op::ScalarMul(a, c))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.value(a).dims2("scale_rows")?;
        if factors.len() != m {
            return Err(DiffError::Shape(format!("scale_rows: {} factors for {m} rows", factors.len())));
        }
        let mut data = self.value(a).data.clone();
        par::for_each_row(&mut data, n, |i, row| row.iter_mut().for_each(|x| *x *= factors[i]));
        Ok(self.derived(Tensor { shape: vec![m, n], data }, &[a], Op::ScaleRows(a, factors)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data.iter().find(|&&x| !(x > 0.0)) {
            return Err(DiffError::Domain(format!("log of non-positive value {bad}")));
        }
        let data = t.data.iter().map(|x| x.ln()).collect();
        let shape = t.shape.clone();
        Ok(self.derived(Tensor { shape, data }, &[a], Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x.exp()).collect();
        let shape = t.shape.clone();
        self.derived(Tensor { shape, data }, &[a], Op::Exp(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("row_softmax")?;
        let mut data = self.value(a).data.clone();
        par::for_each_row(&mut data, n, |_, row| softmax_in_place(row));
        Ok(self.derived(Tensor { shape: vec![m, n], data }, &[a], Op::RowSoftmax(a)))
    }

    /// Fused `log(row_softmax(a))` via log-sum-exp with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("log_softmax_rows")?;
        let mut data = self.value(a).data.clone();
        par::for_each_row(&mut data, n, |_, row| log_softmax_in_place(row));
        Ok(self.derived(Tensor { shape: vec![m, n], data }, &[a], Op::LogSoftmaxRows(a)))
    }

    /// `out[i][j] = cos(a_i, b_j)` for rows `a_i` of `a` and `b_j` of `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("cosine_rows")?;
        let (n, k2) = self.value(b).dims2("cosine_rows")?;
        if k != k2 {
            return Err(DiffError::Shape(format!("cosine_rows: {k} vs {k2} columns")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let na = row_norms(&ta.data, k);
        let nb = row_norms(&tb.data, k);
        if na.iter().chain(&nb).any(|&x| x == 0.0) {
            return Err(DiffError::Domain("cosine of a zero-norm row".into()));
        }
        let mut out = vec![0.0; m * n];
        par::for_each_row(&mut out, n, |i, row| {
            let ai = &ta.data[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                *o = dot(ai, &tb.data[j * k..(j + 1) * k]) / (na[i] * nb[j]);
            }
        });
        Ok(self.derived(Tensor { shape: vec![m, n], data: out }, &[a, b], Op::CosineRows(a, b)))
    }

    /// Inner product of two same-shape tensors, as `sum(mul(a, b))`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Populates gradients of the scalar `loss` for every node that requires
    /// them. Nodes not reachable from `loss` get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape.clone()));
            } else if !node.requires_grad {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor { shape: self.nodes[v.0].value.shape.clone(), data: delta });
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.requires_grad(*a) {
                    acc(*a, matmul_a_bt(&g.data, &tb.data, m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_at_b(&ta.data, &g.data, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                acc(*a, transpose_raw(&g.data, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, g.data.clone());
                acc(*b, g.data.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.data.clone());
                acc(*b, g.data.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(&g.data, &tb.data, |d, y| d * y));
                acc(*b, zip_map(&g.data, &ta.data, |d, x| d * x));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, zip_map(&g.data, &x.data, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::Concat(a, b, axis) => {
                let (ra, ca) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let cb = self.value(*b).shape[1];
                match axis {
                    Axis::Rows => {
                        acc(*a, g.data[..ra * ca].to_vec());
                        acc(*b, g.data[ra * ca..].to_vec());
                    }
                    Axis::Cols => {
                        let w = ca + cb;
                        let mut ga = Vec::with_capacity(ra * ca);
                        let mut gb = Vec::with_capacity(ra * cb);
                        for i in 0..ra {
                            ga.extend_from_slice(&g.data[i * w..i * w + ca]);
                            gb.extend_from_slice(&g.data[i * w + ca..(i + 1) * w]);
                        }
                        acc(*a, ga);
                        acc(*b, gb);
                    }
                }
            }
            Op::SumRows(a) => {
                let m = self.value(*a).shape[0];
                acc(*a, g.data.repeat(m));
            }
            Op::Sum(a) => {
                acc(*a, vec![g.data[0]; self.value(*a).numel()]);
            }
            Op::GatherSum(a, lists) => {
                let src = self.value(*a);
                let n = src.shape[1];
                let mut d = vec![0.0; src.numel()];
                for (i, list) in lists.iter().enumerate() {
                    for &j in list {
                        for (o, x) in d[j * n..(j + 1) * n].iter_mut().zip(&g.data[i * n..(i + 1) * n]) {
                            *o += x;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::ScalarMul(a, c) => acc(*a, g.data.iter().map(|x| x * c).collect()),
            Op::ScaleRows(a, factors) => {
                let n = out.shape[1];
                let mut d = g.data.clone();
                for (i, row) in d.chunks_mut(n.max(1)).enumerate() {
                    row.iter_mut().for_each(|x| *x *= factors[i]);
                }
                acc(*a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, zip_map(&g.data, &x.data, |d, x| d / x));
            }
            Op::Exp(a) => acc(*a, zip_map(&g.data, &out.data, |d, y| d * y)),
            Op::RowSoftmax(a) => {
                let n = out.shape[1];
                let mut d = vec![0.0; out.numel()];
                par::for_each_row(&mut d, n, |i, row| {
                    let y = &out.data[i * n..(i + 1) * n];
                    let gi = &g.data[i * n..(i + 1) * n];
                    let s = dot(gi, y);
                    for j in 0..n {
                        row[j] = y[j] * (gi[j] - s);
                    }
                });
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.shape[1];
                let mut d = vec![0.0; out.numel()];
                par::for_each_row(&mut d, n, |i, row| {
                    let ls = &out.data[i * n..(i + 1) * n];
                    let gi = &g.data[i * n..(i + 1) * n];
                    let s: f64 = gi.iter().sum();
                    for j in 0..n {
                        row[j] = gi[j] - ls[j].exp() * s;
                    }
                });
                acc(*a, d);
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                let na = row_norms(&ta.data, k);
                let nb = row_norms(&tb.data, k);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    par::for_each_row(&mut da, k, |i, row| {
                        let ai = &ta.data[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g.data[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let bj = &tb.data[j * k..(j + 1) * k];
                            let c = out.data[i * n + j];
                            let s1 = gij / (na[i] * nb[j]);
                            let s2 = gij * c / (na[i] * na[i]);
                            for p in 0..k {
                                row[p] += s1 * bj[p] - s2 * ai[p];
                            }
                        }
                    });
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    par::for_each_row(&mut db, k, |j, row| {
                        let bj = &tb.data[j * k..(j + 1) * k];
                        for i in 0..m {
                            let gij = g.data[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let ai = &ta.data[i * k..(i + 1) * k];
                            let c = out.data[i * n + j];
                            let s1 = gij / (na[i] * nb[j]);
                            let s2 = gij * c / (nb[j] * nb[j]);
                            for p in 0..k {
                                row[p] += s1 * ai[p] - s2 * bj[p];
                            }
                        }
                    });
                    acc(*b, db);
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_norms(data: &[f64], k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    data.chunks(k).map(|r| dot(r, r).sqrt()).collect()
}

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Stable log-softmax of one row: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x = *x - max - lse;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &x) in ai.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    });
    out
}

/// `g (m x n) * b^T` where `b` is `k x n`.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    par::for_each_row(&mut out, k, |i, row| {
        let gi = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            *o = dot(gi, &b[p * n..(p + 1) * n]);
        }
    });
    out
}

/// `a^T (k x m) * g (m x n)` where `a` is `m x k`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    par::for_each_row(&mut out, n, |p, row| {
        for i in 0..m {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *o += x * y;
            }
        }
    });
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Compares backward-pass gradients of `f` against central finite
/// differences over every element of every input. Returns the maximum
/// relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(DiffError::Domain(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape.clone())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.value(out).item().ok_or_else(|| DiffError::NonScalarLoss(t.value(out).shape.clone()))
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let x = input.data[k];
            work[i].data[k] = x + epsilon;
            let plus = eval(&work)?;
            work[i].data[k] = x - epsilon;
            let minus = eval(&work)?;
            work[i].data[k] = x;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i].data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
