use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// Index of a trainable tensor inside a [`super::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    NegExpm1(Var),
    Log(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Max(Var, usize),
    Dot(Var, Var),
    L2Norm(Var),
    SqDiff(Var, Var),
    Softmax(Var),
    SumNormalize(Var),
    NormalizeRows(Var, f64),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SelectColumn(Var, usize),
    Index(Var, usize),
    Element(Var, usize, usize),
    ScaleBy(Var, Var),
    Stack(Vec<Var>),
    Rows(Var, Vec<usize>),
    CDist(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of primitive applications. Insertion order is a
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter. Every parameter leaf placed on the tape
/// gets an entry, zero if no path reaches it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, inserting entries that are missing.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.map.insert(id, g);
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, node_op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node { op: node_op, value, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn constant_vector(&mut self, x: Vec<f64>) -> Var {
        self.constant(Tensor::vector(x))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t.clone(), requires_grad: true, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    fn unary_map(&mut self, op: &'static str, a: Var, node_op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.val(a);
        let out = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(a);
        self.push(op, node_op, out, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn binary_map(&mut self, op: &'static str, a: Var, b: Var, node_op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect() };
        let rg = self.rg(a) || self.rg(b);
        self.push(op, node_op, out, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary_map("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary_map("add_scalar", a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary_map("exp", a, Op::Exp(a), f64::exp)
    }

    /// `1 - exp(a)` without cancellation near `a = 0`.
    pub fn neg_expm1(&mut self, a: Var) -> Result<Var> {
        self.unary_map("neg_expm1", a, Op::NegExpm1(a), |x| -x.exp_m1())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).data.iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        self.unary_map("log", a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary_map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `max(a, floor)` elementwise; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary_map("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Copies the value and severs the backward edge.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.val(a).clone();
        self.constant(value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data.iter().sum();
        let rg = self.rg(a);
        self.push("sum", Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Maximum element; ties go to the lowest index. Empty input is an error.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let data = &self.val(a).data;
        if data.is_empty() {
            return Err(shape_err("max", "empty input".into()));
        }
        let mut best = 0;
        for (i, &x) in data.iter().enumerate() {
            if x > data[best] {
                best = i;
            }
        }
        let m = data[best];
        let rg = self.rg(a);
        self.push("max", Op::Max(a, best), Tensor::scalar(m), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape.len() != 1 || ta.shape != tb.shape {
            return Err(shape_err("dot", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let d = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("dot", Op::Dot(a, b), Tensor::scalar(d), rg)
    }

    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push("l2norm", Op::L2Norm(a), Tensor::scalar(n), rg)
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_diff", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let s = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("sq_diff", Op::SqDiff(a, b), Tensor::scalar(s), rg)
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        if src.shape.is_empty() || src.is_empty() {
            return Err(shape_err("softmax", format!("{:?}", src.shape)));
        }
        let cols = src.cols();
        let mut out = src.data.clone();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor { shape: src.shape.clone(), data: out };
        let rg = self.rg(a);
        self.push("softmax", Op::Softmax(a), t, rg)
    }

    /// Divides each row (or the whole vector) by its sum. A row summing to
    /// zero maps to zeros.
    pub fn sum_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        if src.shape.is_empty() {
            return Err(shape_err("sum_normalize", "scalar input".into()));
        }
        let cols = src.cols();
        let mut out = src.data.clone();
        for row in out.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let t = Tensor { shape: src.shape.clone(), data: out };
        let rg = self.rg(a);
        self.push("sum_normalize", Op::SumNormalize(a), t, rg)
    }

    /// Unit-L2 normalization of a vector or of each matrix row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows_impl(a, 0.0)
    }

    /// Rows divided by `sqrt(|row|^2 + eps^2)`; defined at the zero row.
    pub fn normalize_rows_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Domain { op: "normalize_rows_eps", detail: format!("eps {eps} must be positive") });
        }
        self.normalize_rows_impl(a, eps)
    }

    fn normalize_rows_impl(&mut self, a: Var, eps: f64) -> Result<Var> {
        let src = self.val(a);
        if src.shape.is_empty() {
            return Err(shape_err("normalize_rows", "scalar input".into()));
        }
        let cols = src.cols();
        let mut out = src.data.clone();
        for row in out.chunks_mut(cols) {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            if n < 1e-12 {
                return Err(TensorError::Domain { op: "normalize_rows", detail: "zero-norm row".into() });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor { shape: src.shape.clone(), data: out };
        let rg = self.rg(a);
        self.push("normalize_rows", Op::NormalizeRows(a, eps), t, rg)
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.val(m), self.val(x));
        if tm.shape.len() != 2 || tx.shape.len() != 1 || tm.shape[1] != tx.shape[0] {
            return Err(shape_err("matvec", format!("{:?} x {:?}", tm.shape, tx.shape)));
        }
        let out: Vec<f64> = (0..tm.shape[0]).map(|i| dot(tm.row(i), &tx.data)).collect();
        let rg = self.rg(m) || self.rg(x);
        self.push("matvec", Op::MatVec(m, x), Tensor::vector(out), rg)
    }

    /// `m^T x`.
    pub fn matvec_t(&mut self, m: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.val(m), self.val(x));
        if tm.shape.len() != 2 || tx.shape.len() != 1 || tm.shape[0] != tx.shape[0] {
            return Err(shape_err("matvec_t", format!("{:?}^T x {:?}", tm.shape, tx.shape)));
        }
        let mut out = vec![0.0; tm.shape[1]];
        for (i, &xi) in tx.data.iter().enumerate() {
            axpy(xi, tm.row(i), &mut out);
        }
        let rg = self.rg(m) || self.rg(x);
        self.push("matvec_t", Op::MatVecT(m, x), Tensor::vector(out), rg)
    }

    /// `a b^T` for `a: n x d`, `b: m x d`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", ta.shape, tb.shape)));
        }
        let (n, m) = (ta.shape[0], tb.shape[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                out.push(dot(ra, tb.row(j)));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", Op::MatMulNT(a, b), Tensor { shape: vec![n, m], data: out }, rg)
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.val(m), self.val(v));
        if tm.shape.len() != 2 || tv.shape.len() != 1 || tm.shape[1] != tv.shape[0] {
            return Err(shape_err("add_row", format!("{:?} + {:?}", tm.shape, tv.shape)));
        }
        let mut out = tm.data.clone();
        for row in out.chunks_mut(tv.data.len()) {
            row.iter_mut().zip(&tv.data).for_each(|(x, y)| *x += y);
        }
        let t = Tensor { shape: tm.shape.clone(), data: out };
        let rg = self.rg(m) || self.rg(v);
        self.push("add_row", Op::AddRow(m, v), t, rg)
    }

    /// Multiplies every row of `m` elementwise by `v`.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.val(m), self.val(v));
        if tm.shape.len() != 2 || tv.shape.len() != 1 || tm.shape[1] != tv.shape[0] {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", tm.shape, tv.shape)));
        }
        let mut out = tm.data.clone();
        for row in out.chunks_mut(tv.data.len()) {
            row.iter_mut().zip(&tv.data).for_each(|(x, y)| *x *= y);
        }
        let t = Tensor { shape: tm.shape.clone(), data: out };
        let rg = self.rg(m) || self.rg(v);
        self.push("mul_row", Op::MulRow(m, v), t, rg)
    }

    pub fn select_column(&mut self, m: Var, j: usize) -> Result<Var> {
        let tm = self.val(m);
        if tm.shape.len() != 2 || j >= tm.shape[1] {
            return Err(shape_err("select_column", format!("column {j} of {:?}", tm.shape)));
        }
        let out: Vec<f64> = (0..tm.shape[0]).map(|i| tm.at(i, j)).collect();
        let rg = self.rg(m);
        self.push("select_column", Op::SelectColumn(m, j), Tensor::vector(out), rg)
    }

    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let tv = self.val(v);
        if tv.shape.len() != 1 || i >= tv.shape[0] {
            return Err(shape_err("index", format!("index {i} of {:?}", tv.shape)));
        }
        let x = tv.data[i];
        let rg = self.rg(v);
        self.push("index", Op::Index(v, i), Tensor::scalar(x), rg)
    }

    pub fn element(&mut self, m: Var, i: usize, j: usize) -> Result<Var> {
        let tm = self.val(m);
        if tm.shape.len() != 2 || i >= tm.shape[0] || j >= tm.shape[1] {
            return Err(shape_err("element", format!("({i},{j}) of {:?}", tm.shape)));
        }
        let x = tm.at(i, j);
        let rg = self.rg(m);
        self.push("element", Op::Element(m, i, j), Tensor::scalar(x), rg)
    }

    /// Multiplies a tensor by a scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.val(s).is_scalar() {
            return Err(shape_err("scale_by", format!("factor shape {:?}", self.val(s).shape)));
        }
        let k = self.val(s).item();
        let src = self.val(a);
        let t = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|x| x * k).collect() };
        let rg = self.rg(a) || self.rg(s);
        self.push("scale_by", Op::ScaleBy(a, s), t, rg)
    }

    /// Gathers rows of a matrix, in the given order.
    pub fn rows(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let tm = self.val(m);
        if tm.shape.len() != 2 || idx.iter().any(|&i| i >= tm.shape[0]) {
            return Err(shape_err("rows", format!("rows {idx:?} of {:?}", tm.shape)));
        }
        let mut out = Vec::with_capacity(idx.len() * tm.shape[1]);
        for &i in idx {
            out.extend_from_slice(tm.row(i));
        }
        let t = Tensor { shape: vec![idx.len(), tm.shape[1]], data: out };
        let rg = self.rg(m);
        self.push("rows", Op::Rows(m, idx.to_vec()), t, rg)
    }

    /// Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    /// The gradient at a zero distance is taken as zero.
    pub fn cdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("cdist", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let (n, m) = (ta.shape[0], tb.shape[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                out.push(ra.iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("cdist", Op::CDist(a, b), Tensor { shape: vec![n, m], data: out }, rg)
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.val(p);
            if !t.is_scalar() {
                return Err(shape_err("stack", format!("part shape {:?}", t.shape)));
            }
            out.push(t.item());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("stack", Op::Stack(parts.to_vec()), Tensor::vector(out), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.val(loss).is_scalar() {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.val(loss).shape)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(id) = node.param {
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(&node.value.shape));
                match out.map.get_mut(&id) {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(id, g);
                    }
                }
            }
        }
        // Leaves registered after the loss node are untouched by it.
        for node in self.nodes.iter().skip(loss.0 + 1) {
            if let Some(id) = node.param {
                out.map.entry(id).or_insert_with(|| Tensor::zeros(&node.value.shape));
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.val(v).shape));
        }
        f(&mut slot.as_mut().expect("slot filled").data);
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Scale(a, s) => self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * s)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| add_into(d, gd)),
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * y.data[i] * (1.0 - y.data[i]);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * y.data[i];
                }
            }),
            Op::NegExpm1(a) => {
                let va = &self.val(*a).data;
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] -= gd[i] * va[i].exp();
                    }
                })
            }
            Op::Log(a) => {
                let va = &self.val(*a).data;
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] / va[i];
                    }
                })
            }
            Op::Relu(a) => {
                let va = &self.val(*a).data;
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                })
            }
            Op::ClampMin(a, floor) => {
                let va = &self.val(*a).data;
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > *floor {
                            d[i] += gd[i];
                        }
                    }
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += gd[0])),
            Op::Max(a, best) => self.acc(grads, *a, |d| d[*best] += gd[0]),
            Op::Dot(a, b) => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                self.acc(grads, *a, |d| axpy(gd[0], vb, d));
                self.acc(grads, *b, |d| axpy(gd[0], va, d));
            }
            Op::L2Norm(a) => {
                let va = &self.val(*a).data;
                let n = y.data[0];
                if n > 0.0 {
                    self.acc(grads, *a, |d| axpy(gd[0] / n, va, d));
                }
            }
            Op::SqDiff(a, b) => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * gd[0] * (va[i] - vb[i]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= 2.0 * gd[0] * (va[i] - vb[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                self.acc(grads, *a, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.data.chunks(cols)).zip(gd.chunks(cols)) {
                        let inner = dot(grow, yrow);
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                })
            }
            Op::SumNormalize(a) => {
                let va = self.val(*a);
                let cols = y.cols();
                self.acc(grads, *a, |d| {
                    for r in 0..d.len() / cols {
                        let s: f64 = va.data[r * cols..(r + 1) * cols].iter().sum();
                        if s == 0.0 {
                            continue;
                        }
                        let yrow = &y.data[r * cols..(r + 1) * cols];
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let inner = dot(grow, yrow);
                        for j in 0..cols {
                            d[r * cols + j] += (grow[j] - inner) / s;
                        }
                    }
                })
            }
            Op::NormalizeRows(a, eps) => {
                let va = self.val(*a);
                let cols = y.cols();
                self.acc(grads, *a, |d| {
                    for r in 0..d.len() / cols {
                        let xrow = &va.data[r * cols..(r + 1) * cols];
                        let n = (xrow.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
                        let yrow = &y.data[r * cols..(r + 1) * cols];
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let inner = dot(grow, yrow);
                        for j in 0..cols {
                            d[r * cols + j] += (grow[j] - yrow[j] * inner) / n;
                        }
                    }
                })
            }
            Op::MatVec(m, x) => {
                let (tm, tx) = (self.val(*m), self.val(*x));
                let cols = tm.cols();
                self.acc(grads, *m, |d| {
                    for (i, &gi) in gd.iter().enumerate() {
                        axpy(gi, &tx.data, &mut d[i * cols..(i + 1) * cols]);
                    }
                });
                self.acc(grads, *x, |d| {
                    for (i, &gi) in gd.iter().enumerate() {
                        axpy(gi, tm.row(i), d);
                    }
                });
            }
            Op::MatVecT(m, x) => {
                let (tm, tx) = (self.val(*m), self.val(*x));
                let cols = tm.cols();
                self.acc(grads, *m, |d| {
                    for (i, &xi) in tx.data.iter().enumerate() {
                        axpy(xi, gd, &mut d[i * cols..(i + 1) * cols]);
                    }
                });
                self.acc(grads, *x, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += dot(tm.row(i), gd);
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, m, k) = (ta.shape[0], tb.shape[0], ta.shape[1]);
                self.acc(grads, *a, |d| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = gd[i * m + j];
                            if gij != 0.0 {
                                axpy(gij, tb.row(j), &mut d[i * k..(i + 1) * k]);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = gd[i * m + j];
                            if gij != 0.0 {
                                axpy(gij, ta.row(i), &mut d[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::AddRow(m, v) => {
                let cols = y.cols();
                self.acc(grads, *m, |d| add_into(d, gd));
                self.acc(grads, *v, |d| {
                    for grow in gd.chunks(cols) {
                        add_into(d, grow);
                    }
                });
            }
            Op::MulRow(m, v) => {
                let (tm, tv) = (self.val(*m), self.val(*v));
                let cols = y.cols();
                self.acc(grads, *m, |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(gd.chunks(cols)) {
                        for j in 0..cols {
                            drow[j] += grow[j] * tv.data[j];
                        }
                    }
                });
                self.acc(grads, *v, |d| {
                    for (mrow, grow) in tm.data.chunks(cols).zip(gd.chunks(cols)) {
                        for j in 0..cols {
                            d[j] += grow[j] * mrow[j];
                        }
                    }
                });
            }
            Op::SelectColumn(m, j) => {
                let cols = self.val(*m).cols();
                self.acc(grads, *m, |d| {
                    for (i, &gi) in gd.iter().enumerate() {
                        d[i * cols + j] += gi;
                    }
                })
            }
            Op::Index(v, i) => self.acc(grads, *v, |d| d[*i] += gd[0]),
            Op::Element(m, i, j) => {
                let cols = self.val(*m).cols();
                self.acc(grads, *m, |d| d[i * cols + j] += gd[0])
            }
            Op::ScaleBy(a, s) => {
                let k = self.val(*s).item();
                let va = &self.val(*a).data;
                self.acc(grads, *a, |d| axpy(k, gd, d));
                self.acc(grads, *s, |d| d[0] += dot(gd, va));
            }
            Op::Stack(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    self.acc(grads, *p, |d| d[0] += gd[i]);
                }
            }
            Op::CDist(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, m, d) = (ta.shape[0], tb.shape[0], ta.shape[1]);
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let dist = y.data[i * m + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let k = gd[i * m + j] / dist;
                        for t in 0..d {
                            let diff = ta.data[i * d + t] - tb.data[j * d + t];
                            ga[i * d + t] += k * diff;
                            gb[j * d + t] -= k * diff;
                        }
                    }
                }
                self.acc(grads, *a, |x| add_into(x, &ga));
                self.acc(grads, *b, |x| add_into(x, &gb));
            }
            Op::Rows(m, idx) => {
                let c = y.shape[1];
                self.acc(grads, *m, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

#[inline]
fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}
