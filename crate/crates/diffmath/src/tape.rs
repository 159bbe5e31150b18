//! Tape-based reverse-mode differentiation.
//!
//! Operations are appended to a [`Tape`] as they are evaluated, so node
//! inputs always precede the node itself. [`Tape::backward`] walks the nodes
//! once in reverse and accumulates adjoints into every node that depends on a
//! parameter leaf. Constant leaves and everything computed only from
//! constants are skipped.

use std::rc::Rc;

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Below this norm `sphere_normalize` adds [`SPHERE_EPS`] to the denominator.
pub const SPHERE_SMALL_NORM: f64 = 1e-6;
pub const SPHERE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LogSumExp(Var),
    LogSumExpRows(Var, Option<Rc<Vec<bool>>>),
    Dot(Var, Var),
    RowDot(Var, Var),
    SquaredNorm(Var),
    SphereNormalize(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    Minimum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass. Not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape_like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape_like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::new(shape_like.shape().to_vec(), vec![0.0; shape_like.len()])
                .expect("shape copied from an existing tensor"),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row norms plus the denominators used by `sphere_normalize`.
fn sphere_denominators(x: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (r, _) = x.dims2()?;
    Ok((0..r)
        .map(|i| {
            let n = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = if n < SPHERE_SMALL_NORM { n + SPHERE_EPS } else { n };
            (n, d)
        })
        .collect())
}

/// Projects each row onto the unit sphere (no tape).
pub fn sphere_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let dens = sphere_denominators(x)?;
    let c = x.cols();
    let mut out = x.clone();
    for (i, (_, d)) in dens.iter().enumerate() {
        for v in &mut out.data_mut()[i * c..(i + 1) * c] {
            *v /= d;
        }
    }
    Ok(out)
}

fn lse_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row_slice(i);
        let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
        let mut m = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > m {
                m = v;
            }
        }
        if m == f64::NEG_INFINITY {
            return Err(DiffError::Invalid(format!(
                "log_sum_exp row {i} has no unmasked entries"
            )));
        }
        let s: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, &v)| (v - m).exp())
            .sum();
        out.push(m + s.ln());
    }
    Tensor::matrix(r, 1, out)
}

/// Row-wise softmax over kept entries; excluded entries are zero.
fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
        let m = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in (0..c).filter(|&j| keep(j)) {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= s;
        }
    }
    Ok(out)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        t.dims2()?;
        self.push(t, Op::Leaf, true, "param")
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.dims2()?;
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg, "matmul_t")
    }

    /// Elementwise sum; a `1 x cols` right operand is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if va.shape() == vb.shape() {
            let v = va.zip_map(vb, |x, y| x + y)?;
            self.push(v, Op::Add(a, b), rg, "add")
        } else {
            let v = va.add_row(vb)?;
            self.push(v, Op::AddRow(a, b), rg, "add")
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        let (r, c) = va.dims2()?;
        if vc.dims2()? != (r, 1) {
            return Err(DiffError::Shape(format!(
                "mul_col: {:?} by {:?}",
                va.shape(),
                vc.shape()
            )));
        }
        let mut out = va.clone();
        for i in 0..r {
            let s = vc.data()[i];
            for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(out, Op::MulCol(a, col), rg, "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 || !s.is_finite() {
            return Err(DiffError::Invalid(format!("division by {s}")));
        }
        self.scale(a, 1.0 / s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(stable_sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(stable_softplus);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg, "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(DiffError::NonFinite("log"));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(DiffError::Invalid("sqrt needs strictly positive input".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(DiffError::Invalid("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg, "mean")
    }

    /// Per-row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, _) = t.dims2()?;
        let v = Tensor::matrix(r, 1, (0..r).map(|i| t.row_slice(i).iter().sum()).collect())?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg, "sum_cols")
    }

    /// `ln Σ exp(aᵢ)` over all entries, shifted by the maximum.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let flat = Tensor::matrix(1, t.len(), t.data().to_vec())?;
        let v = Tensor::scalar(lse_rows(&flat, None)?.data()[0]);
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSumExp(a), rg, "log_sum_exp")
    }

    /// Row-wise log-sum-exp as a `rows x 1` column. Entries whose mask is
    /// `false` are excluded; every row needs at least one kept entry.
    pub fn log_sum_exp_rows(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(DiffError::Shape(format!(
                    "mask of length {} for {:?}",
                    m.len(),
                    t.shape()
                )));
            }
        }
        let v = lse_rows(t, mask.as_deref().map(|m| m.as_slice()))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSumExpRows(a, mask), rg, "log_sum_exp_rows")
    }

    /// `Σ aᵢ bᵢ` over equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "dot")?;
        let v = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Dot(a, b), rg, "dot")
    }

    /// Per-row dot products as a `rows x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "row_dot")?;
        let (r, _) = va.dims2()?;
        let v = Tensor::matrix(
            r,
            1,
            (0..r)
                .map(|i| {
                    va.row_slice(i)
                        .iter()
                        .zip(vb.row_slice(i))
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect(),
        )?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::RowDot(a, b), rg, "row_dot")
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).squared_norm());
        let rg = self.rg(&[a]);
        self.push(v, Op::SquaredNorm(a), rg, "squared_norm")
    }

    /// Projects every row onto the unit sphere.
    pub fn sphere_normalize(&mut self, a: Var) -> Result<Var> {
        let v = sphere_normalize_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SphereNormalize(a), rg, "sphere_normalize")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).gather_rows(&idx)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, idx), rg, "gather_rows")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), f64::min)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Minimum(a, b), rg, "minimum")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let out_val = &self.nodes[out.0].value;
        if out_val.len() != 1 {
            return Err(DiffError::NotScalar(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0])?);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t_matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.sum_rows_to_row()?);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::MulCol(a, col) => {
                let (r, c) = g.dims2()?;
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    let cv = val(*col).data();
                    for i in 0..r {
                        for x in &mut ga.data_mut()[i * c..(i + 1) * c] {
                            *x *= cv[i];
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*col) {
                    let av = val(*a);
                    let gc: Vec<f64> = (0..r)
                        .map(|i| {
                            g.row_slice(i)
                                .iter()
                                .zip(av.row_slice(i))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor::matrix(r, 1, gc)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?,
            ),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?),
            Op::Softplus(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gi, xi| gi * stable_sigmoid(xi))?,
            ),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)?),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| gi / xi)?),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * 0.5 / yi)?),
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| 2.0 * gi * xi)?),
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, val(*a).map(|_| s));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = g.data()[0] / x.len() as f64;
                self.accumulate(grads, *a, x.map(|_| s));
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let (r, c) = x.dims2()?;
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    ga.extend(std::iter::repeat(g.data()[i]).take(c));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let flat = Tensor::matrix(1, x.len(), x.data().to_vec())?;
                let sm = softmax_rows(&flat, None)?;
                let s = g.data()[0];
                let ga = sm.into_iter().map(|p| s * p).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::LogSumExpRows(a, mask) => {
                let x = val(*a);
                let (_, c) = x.dims2()?;
                let mut ga = softmax_rows(x, mask.as_deref().map(|m| m.as_slice()))?;
                for (k, v) in ga.iter_mut().enumerate() {
                    *v *= g.data()[k / c];
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, val(*b).map(|v| v * s));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, val(*a).map(|v| v * s));
                }
            }
            Op::RowDot(a, b) => {
                let (r, c) = val(*a).dims2()?;
                let scale_rows = |t: &Tensor| -> Result<Tensor> {
                    let mut out = t.clone();
                    for i in 0..r {
                        let s = g.data()[i];
                        for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                            *x *= s;
                        }
                    }
                    Ok(out)
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, scale_rows(val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, scale_rows(val(*a))?);
                }
            }
            Op::SquaredNorm(a) => {
                let s = 2.0 * g.data()[0];
                self.accumulate(grads, *a, val(*a).map(|v| v * s));
            }
            Op::SphereNormalize(a) => {
                // y = x / d with d = |x| (or |x| + eps below the small-norm cutoff):
                // dx = g / d - x (xᵀg) / (|x| d²)
                let x = val(*a);
                let (r, c) = x.dims2()?;
                let dens = sphere_denominators(x)?;
                let mut ga = vec![0.0; r * c];
                for (i, &(n, d)) in dens.iter().enumerate() {
                    let xr = x.row_slice(i);
                    let gr = g.row_slice(i);
                    let xg: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let coef = if n > 0.0 { xg / (n * d * d) } else { 0.0 };
                    for j in 0..c {
                        ga[i * c + j] = gr[j] / d - xr[j] * coef;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::matrix(r, w, gp)?);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let (r, c) = x.dims2()?;
                let mut ga = vec![0.0; r * c];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga)?);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let (r, c) = x.dims2()?;
                let mut ga = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga)?);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&gi, (&x, &z))| if x <= z { gi } else { 0.0 })
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&gi, (&x, &z))| if x <= z { 0.0 } else { gi })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1000.0, 1000.0])).unwrap();
        let l = t.log_sum_exp(x).unwrap();
        let v = t.value(l).item().unwrap();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sphere_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[3.0, 4.0])).unwrap();
        let y = t.sphere_normalize(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sphere_normalize_gradient_is_tangential() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1.0, 0.0])).unwrap();
        let c = t.constant(Tensor::row(&[0.0, 1.0])).unwrap();
        let y = t.sphere_normalize(x).unwrap();
        let d = t.dot(y, c).unwrap();
        let g = t.backward(d).unwrap();
        let gx = g.get(x).unwrap().data();
        assert!(gx[0].abs() < 1e-15 && (gx[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_inputs_stay_bounded() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[0.0, 0.0])).unwrap();
        let c = t.constant(Tensor::row(&[1.0, 1.0])).unwrap();
        let y = t.sphere_normalize(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        let d = t.dot(y, c).unwrap();
        let g = t.backward(d).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1.0, 2.0])).unwrap();
        let y = t.tanh(x).unwrap();
        assert!(matches!(t.backward(y), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1000.0])).unwrap();
        assert!(matches!(t.exp(x), Err(DiffError::NonFinite("exp"))));
        let z = t.param(Tensor::row(&[0.0])).unwrap();
        assert!(t.log(z).is_err());
    }

    #[test]
    fn masked_rows_ignore_excluded_entries() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[0.0, 50.0, 0.0]]).unwrap()).unwrap();
        let mask = Rc::new(vec![true, false, true]);
        let l = t.log_sum_exp_rows(x, Some(mask)).unwrap();
        assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let s = t.sum(l).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.0, 0.5]);
        let all_masked = Rc::new(vec![false; 3]);
        assert!(t.log_sum_exp_rows(x, Some(all_masked)).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0)).unwrap();
        let x = t.param(Tensor::scalar(5.0)).unwrap();
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
