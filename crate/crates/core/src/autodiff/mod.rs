//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are row-major matrices; a vector is a `1 × n` row. A [`Graph`] is
//! a tape built for one sentence: it reads parameters from a shared
//! [`ParamStore`] and returns [`Gradients`] from [`Graph::backward`], so
//! independent sentences can be differentiated on different threads and
//! their gradients summed afterwards.

mod checkpoint;
mod check;
mod layers;
mod optim;

pub use check::{gradient_check, GradCheckReport};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointError, StoredParam, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use layers::{BiLstm, Dense, Lstm};
pub use optim::{adam_update, Adam};

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.rows, self.cols)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: Shape { rows, cols },
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                message: format!("{} values for shape ({rows}, {cols})", data.len()),
            });
        }
        Ok(Tensor {
            shape: Shape { rows, cols },
            data,
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape {
                rows: 1,
                cols: data.len(),
            },
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::row_vector(vec![x])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: Shape { rows, cols },
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first and second moments.
    pub moment1: Vec<f64>,
    pub moment2: Vec<f64>,
    /// Excluded from optimizer updates.
    pub frozen: bool,
}

/// Named parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateName(name));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Parameter {
            grad: Tensor::zeros(value.rows(), value.cols()),
            name: name.clone(),
            value,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            frozen: false,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Adds a parameter initialized uniformly in ±1/√fan_in.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(rows, cols, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.dense.iter().enumerate() {
            if let Some(g) = g {
                for (a, b) in self.params[i].grad.data.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
        for (&id, rows) in &grads.rows {
            let p = &mut self.params[id.0];
            let cols = p.grad.cols();
            for (&r, g) in rows {
                for (a, b) in p.grad.data[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }

    /// L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    dense: Vec<Option<Vec<f64>>>,
    rows: HashMap<ParamId, HashMap<usize, Vec<f64>>>,
}

impl Gradients {
    /// Dense gradient of `id`, materializing sparse rows.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        let n = store.get(id).value.len();
        let mut out = self
            .dense
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        if let Some(rows) = self.rows.get(&id) {
            let cols = store.get(id).value.cols();
            for (&r, g) in rows {
                for (a, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }

    fn dense_mut(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        if self.dense.len() <= id.0 {
            self.dense.resize(id.0 + 1, None);
        }
        self.dense[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    Linear(Var, Var, Option<Var>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    ScalarMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize, usize),
    Reshape(Var),
    Softmax(Var),
    LstmCell(Var, Option<Var>),
    CrossEntropy(Var, Vec<usize>),
    Hinge(Var, Vec<bool>),
    Bce(Var, Vec<bool>),
    Sum(Var),
    Mask(Var, Vec<f64>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A differentiation tape over parameters of one store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, left: Shape, right: Shape) -> AutodiffError {
    AutodiffError::Shape { op, left, right }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape,
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Rows of a parameter matrix, e.g. embedding lookup.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = &self.store.get(id).value;
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(AutodiffError::Invalid {
                    op: "gather",
                    message: format!("row {r} of {}", table.rows()),
                });
            }
            data.extend_from_slice(table.row(r));
        }
        let t = Tensor::from_vec(rows.len(), cols, data)?;
        Ok(self.push(t, Op::Gather(id, rows.to_vec())))
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.cols != ws.cols {
            return Err(shape_err("linear", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.rows != 1 || bs.cols != ws.rows {
                return Err(shape_err("linear bias", ws, bs));
            }
        }
        let (n, k, m) = (xs.rows, xs.cols, ws.rows);
        let mut out = vec![0.0; n * m];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = b.map(|b| &self.value(b).data);
            for r in 0..n {
                let xr = &xv[r * k..(r + 1) * k];
                for o in 0..m {
                    let wr = &wv[o * k..(o + 1) * k];
                    let mut acc = bv.map_or(0.0, |b| b[o]);
                    for (a, c) in xr.iter().zip(wr) {
                        acc += a * c;
                    }
                    out[r * m + o] = acc;
                }
            }
        }
        let t = Tensor::from_vec(n, m, out)?;
        Ok(self.push(t, Op::Linear(x, w, b)))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(shape_err("matmul", sa, sb));
        }
        let (n, k, m) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; n * m];
        {
            let av = &self.value(a).data;
            let bv = &self.value(b).data;
            for i in 0..n {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        out[i * m + j] += x * bv[p * m + j];
                    }
                }
            }
        }
        let t = Tensor::from_vec(n, m, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Pointwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = map(self.value(a), |x| s * x);
        self.push(t, Op::Scale(a, s))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = map(self.value(a), |x| 1.0 - x);
        self.push(t, Op::OneMinus(a))
    }

    /// A `1 × 1` scalar times a tensor.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss.rows * ss.cols != 1 {
            return Err(shape_err("scalar_mul", ss, self.shape(x)));
        }
        let k = self.value(s).item();
        let t = map(self.value(x), |v| k * v);
        Ok(self.push(t, Op::ScalarMul(s, x)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = map(self.value(a), |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Side-by-side concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AutodiffError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let rows = self.shape(*first).rows;
        for &p in parts {
            if self.shape(p).rows != rows {
                return Err(shape_err("concat", self.shape(*first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical stacking of tensors with equal column counts.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AutodiffError::Invalid {
            op: "stack",
            message: "no inputs".into(),
        })?;
        let cols = self.shape(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.cols != cols {
                return Err(shape_err("stack", self.shape(*first), s));
            }
            rows += s.rows;
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.rows || len == 0 {
            return Err(AutodiffError::Invalid {
                op: "rows",
                message: format!("rows {start}..{} of {s}", start + len),
            });
        }
        let data = self.value(a).data[start * s.cols..(start + len) * s.cols].to_vec();
        let t = Tensor::from_vec(len, s.cols, data)?;
        Ok(self.push(t, Op::Rows(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.rows(a, r, 1)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.cols || len == 0 {
            return Err(AutodiffError::Invalid {
                op: "cols",
                message: format!("cols {start}..{} of {s}", start + len),
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let t = Tensor::from_vec(s.rows, len, data)?;
        Ok(self.push(t, Op::Cols(a, start, len)))
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = Tensor::from_vec(rows, cols, self.value(a).data.clone())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|x| x / z));
        }
        let t = Tensor::from_vec(v.rows(), cols, data).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Fused LSTM cell. `z: (1, 4H)` holds pre-activations in gate order
    /// input, forget, candidate, output. Returns `(1, 2H)` = `[h, c]`.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Option<Var>) -> Result<Var> {
        let zs = self.shape(z);
        if zs.rows != 1 || !zs.cols.is_multiple_of(4) {
            return Err(AutodiffError::Invalid {
                op: "lstm_cell",
                message: format!("gate pre-activations of shape {zs}"),
            });
        }
        let h = zs.cols / 4;
        if let Some(c) = c_prev {
            let cs = self.shape(c);
            if cs.rows != 1 || cs.cols != h {
                return Err(shape_err("lstm_cell", zs, cs));
            }
        }
        let zv = &self.value(z).data;
        let cp = c_prev.map(|c| &self.value(c).data);
        let mut out = vec![0.0; 2 * h];
        for k in 0..h {
            let i = sigmoid(zv[k]);
            let f = sigmoid(zv[h + k]);
            let g = zv[2 * h + k].tanh();
            let o = sigmoid(zv[3 * h + k]);
            let c = f * cp.map_or(0.0, |c| c[k]) + i * g;
            out[k] = o * c.tanh();
            out[h + k] = c;
        }
        let t = Tensor::row_vector(out);
        Ok(self.push(t, Op::LstmCell(z, c_prev)))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(op))
        }
    }

    /// Summed cross-entropy of each row's logits against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let v = self.value(logits);
        if v.rows() != targets.len() {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy",
                message: format!("{} targets for logits {}", targets.len(), v.shape),
            });
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            if t >= row.len() {
                return Err(AutodiffError::Invalid {
                    op: "cross_entropy",
                    message: format!("target {t} of {} classes", row.len()),
                });
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec())))
    }

    /// Summed `max(0, 1 - y·s)` with `y = ±1` from the boolean targets.
    pub fn hinge(&mut self, scores: Var, targets: &[bool]) -> Result<Var> {
        self.check_finite("hinge", scores)?;
        let v = self.value(scores);
        if v.len() != targets.len() {
            return Err(AutodiffError::Invalid {
                op: "hinge",
                message: format!("{} targets for scores {}", targets.len(), v.shape),
            });
        }
        let loss = v
            .data
            .iter()
            .zip(targets)
            .map(|(&s, &t)| (1.0 - if t { s } else { -s }).max(0.0))
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::Hinge(scores, targets.to_vec())))
    }

    /// Summed binary cross-entropy of probabilities against boolean targets.
    pub fn bce(&mut self, probs: Var, targets: &[bool]) -> Result<Var> {
        self.check_finite("bce", probs)?;
        let v = self.value(probs);
        if v.len() != targets.len() {
            return Err(AutodiffError::Invalid {
                op: "bce",
                message: format!("{} targets for probabilities {}", targets.len(), v.shape),
            });
        }
        let loss = v
            .data
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                if t {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::Bce(probs, targets.to_vec())))
    }

    /// Sum of all elements as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng else { return a };
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = Tensor {
            shape: self.shape(a),
            data: self.value(a).data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        self.push(t, Op::Mask(a, mask))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Invalid {
                op: "backward",
                message: format!("loss of shape {}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, g: &dyn Fn(&mut [f64])| {
                let len = self.value(v).len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                g(slot);
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if !self.store.get(*id).frozen {
                        let buf = out.dense_mut(*id, dy.len());
                        buf.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Gather(id, rows) => {
                    if !self.store.get(*id).frozen {
                        let cols = self.store.get(*id).value.cols();
                        let entry = out.rows.entry(*id).or_default();
                        for (k, &r) in rows.iter().enumerate() {
                            let g = entry.entry(r).or_insert_with(|| vec![0.0; cols]);
                            g.iter_mut()
                                .zip(&dy[k * cols..(k + 1) * cols])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Linear(x, w, b) => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, k, m) = (xs.rows, xs.cols, ws.rows);
                    let xv = &self.value(*x).data;
                    let wv = &self.value(*w).data;
                    acc(*x, &|dx| {
                        for r in 0..n {
                            for o in 0..m {
                                let d = dy[r * m + o];
                                if d == 0.0 {
                                    continue;
                                }
                                let wr = &wv[o * k..(o + 1) * k];
                                for (a, c) in dx[r * k..(r + 1) * k].iter_mut().zip(wr) {
                                    *a += d * c;
                                }
                            }
                        }
                    });
                    acc(*w, &|dw| {
                        for r in 0..n {
                            let xr = &xv[r * k..(r + 1) * k];
                            for o in 0..m {
                                let d = dy[r * m + o];
                                if d == 0.0 {
                                    continue;
                                }
                                for (a, c) in dw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                    *a += d * c;
                                }
                            }
                        }
                    });
                    if let Some(b) = b {
                        acc(*b, &|db| {
                            for r in 0..n {
                                for o in 0..m {
                                    db[o] += dy[r * m + o];
                                }
                            }
                        });
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (n, k, m) = (sa.rows, sa.cols, sb.cols);
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    acc(*a, &|da| {
                        for i in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += dy[i * m + j] * bv[p * m + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &|db| {
                        for i in 0..n {
                            for p in 0..k {
                                let x = av[i * k + p];
                                for j in 0..m {
                                    db[p * m + j] += x * dy[i * m + j];
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x += g));
                    acc(*b, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x += g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x += g));
                    acc(*b, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    acc(*a, &|d| {
                        for i in 0..d.len() {
                            d[i] += dy[i] * bv[i];
                        }
                    });
                    acc(*b, &|d| {
                        for i in 0..d.len() {
                            d[i] += dy[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(*a, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x += s * g));
                }
                Op::OneMinus(a) => {
                    acc(*a, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x -= g));
                }
                Op::ScalarMul(s, x) => {
                    let k = self.value(*s).item();
                    let xv = &self.value(*x).data;
                    acc(*s, &|d| d[0] += dy.iter().zip(xv).map(|(g, v)| g * v).sum::<f64>());
                    acc(*x, &|d| d.iter_mut().zip(&dy).for_each(|(a, g)| *a += k * g));
                }
                Op::Sigmoid(a) => {
                    let y = &self.value(Var(idx)).data;
                    acc(*a, &|d| {
                        for i in 0..d.len() {
                            d[i] += dy[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &self.value(Var(idx)).data;
                    acc(*a, &|d| {
                        for i in 0..d.len() {
                            d[i] += dy[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = &self.value(*a).data;
                    acc(*a, &|d| {
                        for i in 0..d.len() {
                            if x[i] > 0.0 {
                                d[i] += dy[i];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let rows = self.shape(Var(idx)).rows;
                    let total = self.shape(Var(idx)).cols;
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).cols;
                        acc(p, &|d| {
                            for r in 0..rows {
                                for j in 0..c {
                                    d[r * c + j] += dy[r * total + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(p, &|d| {
                            d.iter_mut()
                                .zip(&dy[off..off + len])
                                .for_each(|(a, g)| *a += g)
                        });
                        off += len;
                    }
                }
                Op::Rows(a, start) => {
                    let c = self.shape(*a).cols;
                    acc(*a, &|d| {
                        d[start * c..start * c + dy.len()]
                            .iter_mut()
                            .zip(&dy)
                            .for_each(|(x, g)| *x += g)
                    });
                }
                Op::Cols(a, start, len) => {
                    let s = self.shape(*a);
                    acc(*a, &|d| {
                        for r in 0..s.rows {
                            for j in 0..*len {
                                d[r * s.cols + start + j] += dy[r * len + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(*a, &|d| d.iter_mut().zip(&dy).for_each(|(x, g)| *x += g));
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(idx));
                    let c = y.cols();
                    acc(*a, &|d| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &dy[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LstmCell(z, c_prev) => {
                    let zv = &self.value(*z).data;
                    let h = zv.len() / 4;
                    let out_v = &self.value(Var(idx)).data;
                    let cp = c_prev.map(|c| self.value(c).data.clone());
                    let mut dz = vec![0.0; 4 * h];
                    let mut dcp = vec![0.0; h];
                    for k in 0..h {
                        let i = sigmoid(zv[k]);
                        let f = sigmoid(zv[h + k]);
                        let g = zv[2 * h + k].tanh();
                        let o = sigmoid(zv[3 * h + k]);
                        let c = out_v[h + k];
                        let tc = c.tanh();
                        let dh = dy[k];
                        let dc = dy[h + k] + dh * o * (1.0 - tc * tc);
                        let prev = cp.as_ref().map_or(0.0, |c| c[k]);
                        dz[k] = dc * g * i * (1.0 - i);
                        dz[h + k] = dc * prev * f * (1.0 - f);
                        dz[2 * h + k] = dc * i * (1.0 - g * g);
                        dz[3 * h + k] = dh * tc * o * (1.0 - o);
                        dcp[k] = dc * f;
                    }
                    acc(*z, &|d| d.iter_mut().zip(&dz).for_each(|(a, g)| *a += g));
                    if let Some(c) = c_prev {
                        acc(*c, &|d| d.iter_mut().zip(&dcp).for_each(|(a, g)| *a += g));
                    }
                }
                Op::CrossEntropy(logits, targets) => {
                    let v = self.value(*logits);
                    let c = v.cols();
                    acc(*logits, &|d| {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = v.row(r);
                            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - mx).exp() / z;
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                d[r * c + j] += dy[0] * (p - onehot);
                            }
                        }
                    });
                }
                Op::Hinge(scores, targets) => {
                    let v = &self.value(*scores).data;
                    acc(*scores, &|d| {
                        for (i, &t) in targets.iter().enumerate() {
                            let y = if t { 1.0 } else { -1.0 };
                            if 1.0 - y * v[i] > 0.0 {
                                d[i] -= dy[0] * y;
                            }
                        }
                    });
                }
                Op::Bce(probs, targets) => {
                    let v = &self.value(*probs).data;
                    acc(*probs, &|d| {
                        for (i, &t) in targets.iter().enumerate() {
                            let p = v[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                            d[i] += dy[0] * if t { -1.0 / p } else { 1.0 / (1.0 - p) };
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &|d| d.iter_mut().for_each(|x| *x += dy[0]));
                }
                Op::Mask(a, mask) => {
                    acc(*a, &|d| {
                        for i in 0..d.len() {
                            d[i] += dy[i] * mask[i];
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

const BCE_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn two_way_softmax_matches_sigmoid() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        for z in [-7.5, -1.0, 0.0, 0.3, 4.0] {
            let x = g.input(Tensor::row_vector(vec![z, 0.0]));
            let p = g.softmax(x);
            let s = sigmoid(z);
            assert!((g.value(p).data[0] - s).abs() < 1e-12);
            assert!((g.value(p).data[1] - (1.0 - s)).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(1, 3));
        let b = g.input(Tensor::zeros(1, 5));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape { rows: 1, cols: 8 });
        let tall = g.input(Tensor::zeros(2, 5));
        let err = g.concat(&[a, tall]).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in concat: (1, 3) vs (2, 5)");
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(1, 3));
        let b = g.input(Tensor::zeros(1, 4));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(1, 4)"), "{msg}");
        let w = g.input(Tensor::zeros(2, 5));
        assert!(g.linear(a, w, None).is_err());
    }

    #[test]
    fn loss_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::row_vector(vec![0.0; 4]));
        let ce = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        let s = g.input(Tensor::scalar(0.3));
        let h = g.hinge(s, &[true]).unwrap();
        assert!((g.value(h).item() - 0.7).abs() < 1e-12);
        let p = g.input(Tensor::scalar(0.5));
        for t in [true, false] {
            let b = g.bce(p, &[t]).unwrap();
            assert!((g.value(b).item() - 2f64.ln()).abs() < 1e-12);
        }
        let bad = g.input(Tensor::scalar(f64::NAN));
        assert_eq!(g.hinge(bad, &[true]), Err(AutodiffError::NonFinite("hinge")));
    }

    #[test]
    fn dropout_identity_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.dropout(x, 0.0, Some(&mut rng)), x);
        assert_eq!(g.dropout::<ChaCha8Rng>(x, 0.5, None), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = 200_000;
        let x = g.input(Tensor::row_vector(vec![1.0; n]));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = g.dropout(x, 0.4, Some(&mut rng));
        let mean = g.value(y).data.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(1, 1)).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(1, 1)),
            Err(AutodiffError::DuplicateName(_))
        ));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let e = store.add("emb", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        store.get_mut(e).frozen = true;
        let g = {
            let mut g = Graph::new(&store);
            let v = g.gather(e, &[0]).unwrap();
            let s = g.sum(v);
            g.backward(s).unwrap()
        };
        assert_eq!(g.get(&store, e), vec![0.0, 0.0]);
    }

    #[test]
    fn gather_accumulates_sparse_rows() {
        let mut store = ParamStore::new();
        let e = store
            .add("emb", Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.gather(e, &[2, 0, 2]).unwrap();
            let s = g.sum(v);
            g.backward(s).unwrap()
        };
        assert_eq!(grads.get(&store, e), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        store.accumulate(&grads, 0.5);
        assert_eq!(store.get(e).grad.data(), &[0.5, 0.5, 0.0, 0.0, 1.0, 1.0]);
    }
}
