//! Dense f32 tensors and a reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`] as nodes addressed by [`Var`] handles. Every op
//! appends one node whose inputs are strictly earlier nodes, so the node order
//! is already a topological order and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! A tape and everything on it belong to one thread.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Row-major dense tensor. A scalar has an empty shape and one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// Plain matrix product `a · b`, no tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    // f64 accumulation keeps one rounding per output entry.
    let mut acc = vec![0.0f64; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av as f64 * bv as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax where entries with `masked[i] == true` are excluded.
///
/// The row maximum is taken over unmasked entries only. Masked outputs are
/// exactly zero.
pub fn masked_softmax_rows(logits: &Tensor, masked: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if let Some(m) = masked {
        if m.len() != r * c {
            return Err(Error::Shape(format!("mask has {} entries, logits {r}x{c}", m.len())));
        }
    }
    let is_masked = |idx: usize| masked.is_some_and(|m| m[idx]);
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let base = i * c;
        let mut max = f32::NEG_INFINITY;
        let mut any = false;
        for j in 0..c {
            if !is_masked(base + j) {
                any = true;
                max = max.max(logits.data[base + j]);
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut denom = 0.0f64;
        for j in 0..c {
            if !is_masked(base + j) {
                let e = (logits.data[base + j] - max).exp();
                out[base + j] = e;
                denom += e as f64;
            }
        }
        let inv = (1.0 / denom) as f32;
        for v in &mut out[base..base + c] {
            *v *= inv;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for [`Tape::custom_unary`]:
/// `(input, output, upstream grad) -> input grad`.
pub type CustomBackward = Rc<dyn Fn(&Tensor, &Tensor, &[f32]) -> Vec<f32>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowVector(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    MaskedSoftmax(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Custom(Var, CustomBackward),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRowVector(a, b)
            | Minimum(a, b) | Maximum(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Abs(a) | Relu(a)
            | Sigmoid(a) | Sum(a) | Mean(a) | RowSums(a) | MaskedSoftmax(a)
            | L2NormalizeRows(a) | GatherRows(a, _) | ScatterAddRows(a, _)
            | SliceCols(a, _, _) | Custom(a, _) => vec![*a],
            ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const L2_EPS: f32 = 1e-12;

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

    /// Adds an input tensor. Only leaves created with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor { shape: n.value.shape.clone(), data: g.clone() })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(value, op))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| f(x)).collect() };
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", f32::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "maximum", f32::max, Op::Maximum(a, b))
    }

    /// `x[m×n] + b[n]`, adding `b` to every row.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let vb = self.value(b);
        if vb.numel() != n {
            return Err(Error::Shape(format!("row vector of {} for {m}x{n} matrix", vb.numel())));
        }
        let vx = self.value(x);
        let mut data = vx.data.clone();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&vb.data) {
                *o += bv;
            }
        }
        let value = Tensor { shape: vec![m, n], data };
        Ok(self.push(value, Op::AddRowVector(x, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f32::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f32::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data.iter().map(|&x| x as f64).sum();
        let n = v.numel().max(1) as f64;
        self.push(Tensor::scalar((s / n) as f32), Op::Mean(a))
    }

    /// Sums each row of a matrix into an `[m]` vector.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let v = self.value(a);
        let data = (0..m).map(|i| v.data[i * n..(i + 1) * n].iter().map(|&x| x as f64).sum::<f64>() as f32).collect();
        Ok(self.push(Tensor::vector(data), Op::RowSums(a)))
    }

    /// Row softmax with an optional exclusion mask (`true` = excluded). The
    /// mask is a constant of the op; it is not differentiated.
    pub fn masked_softmax_rows(&mut self, logits: Var, masked: Option<&[bool]>) -> Result<Var> {
        let value = masked_softmax_rows(self.value(logits), masked)?;
        Ok(self.push(value, Op::MaskedSoftmax(logits)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let v = self.value(a);
        let mut data = v.data.clone();
        for row in data.chunks_mut(n.max(1)).take(m) {
            let norm = (row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32).max(L2_EPS);
            for x in row {
                *x /= norm;
            }
        }
        let value = Tensor { shape: vec![m, n], data };
        Ok(self.push(value, Op::L2NormalizeRows(a)))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {m} rows")));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&v.data[i * n..(i + 1) * n]);
        }
        let value = Tensor { shape: vec![index.len(), n], data };
        Ok(self.push(value, Op::GatherRows(a, index.to_vec())))
    }

    /// Output has `rows` rows; input row `r` is added into output row
    /// `index[r]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if index.len() != m {
            return Err(Error::Shape(format!("scatter index has {} entries for {m} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("scatter index {bad} out of range for {rows} rows")));
        }
        let v = self.value(a);
        let mut data = vec![0.0; rows * n];
        for (r, &i) in index.iter().enumerate() {
            for c in 0..n {
                data[i * n + c] += v.data[r * n + c];
            }
        }
        let value = Tensor { shape: vec![rows, n], data };
        Ok(self.push(value, Op::ScatterAddRows(a, index.to_vec())))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::Shape(format!("concat: {c} columns vs {n}")));
            }
            rows += m;
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Tensor { shape: vec![rows, n], data };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("column slice {start}..{end} of {n} columns")));
        }
        let v = self.value(a);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&v.data[i * n + start..i * n + end]);
        }
        let value = Tensor { shape: vec![m, w], data };
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    /// Elementwise op with a caller-supplied forward and vector-Jacobian
    /// product.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: CustomBackward,
    ) -> Var {
        let value = forward(self.value(a));
        self.push(value, Op::Custom(a, backward))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// cleared first; within one sweep they accumulate across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.zero_grads();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let contributions = self.vjp(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (input, delta) in contributions {
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let gt = Tensor { shape: out.shape.clone(), data: g.to_vec() };
                if needs(*a) {
                    let bt = vb.transpose().expect("matrix");
                    res.push((*a, matmul(&gt, &bt).expect("shapes").data));
                }
                if needs(*b) {
                    let at = va.transpose().expect("matrix");
                    res.push((*b, matmul(&at, &gt).expect("shapes").data));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2().expect("matrix");
                let gt = Tensor { shape: vec![r, c], data: g.to_vec() };
                res.push((*a, gt.transpose().expect("matrix").data));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                res.push((*a, g.iter().zip(&vb.data).map(|(g, y)| g * y).collect()));
                res.push((*b, g.iter().zip(&va.data).map(|(g, x)| g * x).collect()));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                res.push((*a, g.iter().zip(&vb.data).map(|(g, y)| g / y).collect()));
                let gb = g
                    .iter()
                    .zip(va.data.iter().zip(&vb.data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                res.push((*b, gb));
            }
            Op::AddRowVector(x, b) => {
                res.push((*x, g.to_vec()));
                let n = val(*b).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                res.push((*b, gb));
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|x| x * s).collect())),
            Op::AddScalar(a) => res.push((*a, g.to_vec())),
            Op::Exp(a) => res.push((*a, g.iter().zip(&out.data).map(|(g, y)| g * y).collect())),
            Op::Log(a) => {
                res.push((*a, g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect()))
            }
            Op::Abs(a) => res.push((
                *a,
                g.iter().zip(&val(*a).data).map(|(g, x)| g * sign(*x)).collect(),
            )),
            Op::Relu(a) => res.push((
                *a,
                g.iter().zip(&val(*a).data).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            )),
            Op::Sigmoid(a) => res.push((
                *a,
                g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = match node.op {
                    Op::Minimum(..) => va.data.iter().zip(&vb.data).map(|(x, y)| x <= y).collect(),
                    _ => va.data.iter().zip(&vb.data).map(|(x, y)| x >= y).collect(),
                };
                res.push((*a, g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect()));
                res.push((*b, g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect()));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; val(*a).numel()])),
            Op::Mean(a) => {
                let n = val(*a).numel().max(1);
                res.push((*a, vec![g[0] / n as f32; val(*a).numel()]))
            }
            Op::RowSums(a) => {
                let (_, n) = val(*a).dims2().expect("matrix");
                res.push((*a, g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect()));
            }
            Op::MaskedSoftmax(a) => {
                let (_, c) = out.dims2().expect("matrix");
                let mut ga = vec![0.0; out.numel()];
                for ((y, gr), o) in out.data.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f32 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        o[j] = y[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, ga));
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let (_, n) = x.dims2().expect("matrix");
                let mut ga = vec![0.0; x.numel()];
                for (((xr, yr), gr), o) in
                    x.data.chunks(n).zip(out.data.chunks(n)).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt().max(L2_EPS);
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        o[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                res.push((*a, ga));
            }
            Op::GatherRows(a, index) => {
                let (m, n) = val(*a).dims2().expect("matrix");
                let mut ga = vec![0.0; m * n];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..n {
                        ga[i * n + c] += g[r * n + c];
                    }
                }
                res.push((*a, ga));
            }
            Op::ScatterAddRows(a, index) => {
                let (_, n) = out.dims2().expect("matrix");
                let mut ga = Vec::with_capacity(index.len() * n);
                for &i in index {
                    ga.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                res.push((*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    res.push((*p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = val(*a).dims2().expect("matrix");
                let w = end - start;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                res.push((*a, ga));
            }
            Op::Custom(a, backward) => res.push((*a, backward(val(*a), out, g))),
        }
        res
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Scalar probe `Σ w⊙x` with fixed weights of both signs. Keeping the probe
/// near zero keeps the f32 rounding of the scalar below the differences
/// being measured.
pub fn probe_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f32) * 2.399).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Absolute floor in the relative-error denominator of [`grad_check`].
pub const GRAD_CHECK_ATOL: f64 = 1e-3;

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences at `step` and `step / 2`, combined by Richardson
/// extrapolation.
///
/// The error per coordinate is `|analytic - numeric| / (|numeric| + atol)`.
/// `f` is evaluated twice at `x` first; differing results mean it is not
/// deterministic and the check refuses to run.
pub fn grad_check<F>(f: F, x: &Tensor, step: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: &Tensor| -> Result<f32> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone(), false);
        let out = f(&mut tape, v)?;
        let t = tape.value(out);
        if t.numel() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", t.shape)));
        }
        Ok(t.item())
    };

    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!("function is not deterministic: {first} vs {second}")));
    }

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(v) {
        Some(g) => g.data.iter().map(|&a| a as f64).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        let mut central = |h: f32| -> Result<f64> {
            probe.data[i] = orig + h;
            let plus = eval(&probe)? as f64;
            probe.data[i] = orig - h;
            let minus = eval(&probe)? as f64;
            probe.data[i] = orig;
            // Actual perturbation after f32 rounding.
            Ok((plus - minus) / (((orig + h) as f64) - ((orig - h) as f64)))
        };
        // Richardson extrapolation cancels the h² truncation term.
        let wide = central(step)?;
        let narrow = central(step / 2.0)?;
        numeric.push((4.0 * narrow - wide) / 3.0);
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / (n.abs() + GRAD_CHECK_ATOL);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_basis() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let l = Tensor::full(&[1, 4], 3.0);
        assert_close(masked_softmax_rows(&l, None).unwrap().data(), &[0.25; 4], 1e-7);

        let l = Tensor::from_rows(&[vec![0.0, -1e30, 0.0]]).unwrap();
        let p = masked_softmax_rows(&l, Some(&[false, true, false])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.0, 0.5]);

        let l = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let e = std::f64::consts::E;
        let p = masked_softmax_rows(&l, None).unwrap();
        assert_close(p.data(), &[(1.0 / (1.0 + e)) as f32, (e / (1.0 + e)) as f32], 1e-6);
    }

    #[test]
    fn softmax_degenerate_row() {
        let l = Tensor::zeros(&[2, 2]);
        let err = masked_softmax_rows(&l, Some(&[false, false, true, true])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn softmax_backward_is_finite_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1e4, -1e4, 5e3], vec![-1e4, 1e4, 0.0]]).unwrap());
        let p = tape.masked_softmax_rows(x, Some(&[false, false, true, false, false, false])).unwrap();
        let w = tape.constant(Tensor::from_rows(&[vec![0.3, 2.0, 1.0], vec![1.0, -1.0, 0.5]]).unwrap());
        let y = tape.mul(p, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().is_finite());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let build = |tape: &mut Tape, x: Var| {
            let e = tape.exp(x);
            let l = tape.l2_normalize_rows(e).unwrap();
            tape.sum(l)
        };
        let x0 = Tensor::from_rows(&[vec![0.1, -0.4, 0.7]]).unwrap();
        let mut t1 = Tape::new();
        let x = t1.param(x0.clone());
        let f = build(&mut t1, x);
        t1.backward(f).unwrap();
        let single = t1.grad(x).unwrap();

        let mut t2 = Tape::new();
        let x = t2.param(x0);
        let f1 = build(&mut t2, x);
        let f2 = build(&mut t2, x);
        let s = t2.add(f1, f2).unwrap();
        t2.backward(s).unwrap();
        let double = t2.grad(x).unwrap();
        for (a, b) in single.data().iter().zip(double.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_scatter_concat_slice_grads() {
        let x0 = Tensor::from_rows(&[vec![0.2, -0.3], vec![0.5, 0.1], vec![-0.7, 0.9]]).unwrap();
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let g = tape.gather_rows(x, &[2, 0, 2])?;
            let s = tape.scatter_add_rows(g, &[1, 1, 0], 2)?;
            let c = tape.concat_rows(&[s, x])?;
            let sl = tape.slice_cols(c, 1, 2)?;
            let e = tape.exp(sl);
            let sq = tape.mul(e, e)?;
            Ok(tape.sum(sq))
        };
        let report = grad_check(f, &x0, 1e-3).unwrap();
        assert!(report.passes(1e-2), "{report:?}");
    }

    #[test]
    fn sum_grad_check_is_exact() {
        let x0 = Tensor::vector(vec![0.3, -2.0, 7.5]);
        let report = grad_check(|t, x| Ok(t.sum(x)), &x0, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn corrupted_backward_fails_grad_check() {
        // Forward is x^2, backward claims 3x.
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let y = tape.custom_unary(
                x,
                |t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect()).unwrap(),
                Rc::new(|x, _, g| x.data().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()),
            );
            Ok(tape.sum(y))
        };
        let report = grad_check(f, &Tensor::vector(vec![0.5, -1.0, 2.0]), 1e-3).unwrap();
        assert!(report.max_rel_error > 0.1, "{report:?}");
    }

    #[test]
    fn nondeterministic_function_is_refused() {
        let counter = std::cell::Cell::new(0.0f32);
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            counter.set(counter.get() + 1.0);
            let y = tape.add_scalar(x, counter.get());
            Ok(tape.sum(y))
        };
        assert!(matches!(grad_check(f, &Tensor::vector(vec![1.0]), 1e-3), Err(Error::Oracle(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.1, 0.4, -0.6]]).unwrap());
            let b = tape.param(Tensor::from_rows(&[vec![0.5], vec![-1.5], vec![0.25]]).unwrap());
            let m = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(m);
            let l = tape.log(s);
            let out = tape.mean(l);
            tape.backward(out).unwrap();
            (tape.grad(a).unwrap(), tape.grad(b).unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
