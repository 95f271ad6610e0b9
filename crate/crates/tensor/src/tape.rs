//! Reverse-mode tape.
//!
//! Every value produced through the tape gets a [`Var`] handle. Operation
//! records (kind, inputs, saved activations) are kept only for nodes that
//! depend on a leaf with `requires_grad`; other results are plain constants.
//! Records are appended in evaluation order, so inputs always precede their
//! consumers and a single reverse sweep visits each record once.

use crate::blur::{blur_2d, blur_2d_adjoint};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<T> {
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    BroadcastAdd(Var, Var),
    BroadcastMul(Var, Var),
    RowSoftmax(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    ClampMin(Var, T),
    Blur2d { x: Var, h: usize, w: usize, kernel: Vec<T> },
    SelectColumns(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatColumns(Vec<Var>),
    ScatterAddRows { base: Var, delta: Var, rows: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Ordered record of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn row_len<T: Real>(op: &'static str, x: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let (r, c) = x.dims2(op)?;
    if b.numel() != c {
        return Err(TensorError::shape(op, &[x.shape(), b.shape()]));
    }
    Ok((r, c))
}

// 0.5·(1 + tanh(u)) written as the logistic of 2u, which is cheaper
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::one() / (T::one() + (T::lit(-2.0) * u).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::lit(2.0 * GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * du
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn records(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, &[a, b], Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, &[x], Op::AddScalar(x))
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(TensorError::shape(
                "mul_scalar_var",
                &[self.value(x).shape(), sv.shape()],
            ));
        }
        let c = sv.item();
        let out = self.value(x).scale(c);
        Ok(self.push(out, &[x, s], Op::MulScalarVar(x, s)))
    }

    /// Adds a row vector to every row of a 2-D tensor.
    pub fn broadcast_add(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(row));
        let (r, c) = row_len("broadcast_add", xv, bv)?;
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *d = *d + b;
            }
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        Ok(self.push(out, &[x, row], Op::BroadcastAdd(x, row)))
    }

    /// Multiplies every row of a 2-D tensor elementwise by a row vector.
    pub fn broadcast_mul(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(row));
        let (r, c) = row_len("broadcast_mul", xv, bv)?;
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *d = *d * b;
            }
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        Ok(self.push(out, &[x, row], Op::BroadcastMul(x, row)))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).row_softmax()?;
        Ok(self.push(out, &[x], Op::RowSoftmax(x)))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, &[x], Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, &[x], Op::Exp(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.recip());
        self.push(out, &[x], Op::Recip(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, n.recip())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, &[x], Op::Transpose(x)))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("layer_norm")?;
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_c = T::lit(c as f64).recip();
        let mut data = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let s = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        Ok(self.push(out, &[x], Op::LayerNorm { x, rstd }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, &[x], Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, &[x], Op::Relu(x))
    }

    /// `max(x, min)`; gradient is zero wherever the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let out = self.value(x).map(|v| if v > min { v } else { min });
        self.push(out, &[x], Op::ClampMin(x, min))
    }

    /// Separable smoothing of an `[h, w]` map with a symmetric odd kernel.
    pub fn blur_2d(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (h, w) = xv.dims2("gaussian_blur_2d")?;
        if kernel.len().is_multiple_of(2) || kernel.len() / 2 > h.min(w) {
            return Err(TensorError::shape("gaussian_blur_2d", &[xv.shape(), &[kernel.len()]]));
        }
        let out = Tensor::from_vec(&[h, w], blur_2d(xv.data(), h, w, kernel))?;
        Ok(self.push(
            out,
            &[x],
            Op::Blur2d {
                x,
                h,
                w,
                kernel: kernel.to_vec(),
            },
        ))
    }

    pub fn select_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let out = self.value(x).select_columns(cols)?;
        Ok(self.push(out, &[x], Op::SelectColumns(x, cols.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(rows)?;
        Ok(self.push(out, &[x], Op::SelectRows(x, rows.to_vec())))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_columns")?;
            if *rows.get_or_insert(r) != r {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.value(q).shape()).collect();
                return Err(TensorError::shape("concat_columns", &shapes));
            }
            widths.push(c);
        }
        let r = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::from_vec(&[r, total], data)?;
        Ok(self.push(out, parts, Op::ConcatColumns(parts.to_vec())))
    }

    /// Adds row `k` of `delta` onto row `rows[k]` of `base`. Rows not listed
    /// are copied through untouched.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, rows: &[usize]) -> Result<Var> {
        let (bv, dv) = (self.value(base), self.value(delta));
        let (n, c) = bv.dims2("scatter_add_rows")?;
        let (k, c2) = dv.dims2("scatter_add_rows")?;
        if c != c2 || k != rows.len() {
            return Err(TensorError::shape("scatter_add_rows", &[bv.shape(), dv.shape()]));
        }
        let mut data = bv.data().to_vec();
        for (j, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: r,
                    size: n,
                });
            }
            if rows[..j].contains(&r) {
                return Err(TensorError::shape("scatter_add_rows (duplicate row)", &[&[r]]));
            }
            for (d, &x) in data[r * c..(r + 1) * c].iter_mut().zip(dv.row(j)) {
                *d = *d + x;
            }
        }
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(
            out,
            &[base, delta],
            Op::ScatterAddRows {
                base,
                delta,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[idx].op else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, idx: usize, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match op {
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_into(m, n, k, g.data(), false, bv.data(), true, &mut da, T::zero());
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_into(k, m, n, av.data(), true, g.data(), false, &mut db, T::zero());
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, "div", |d, y| d / y)?);
                }
                if self.needs(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.mul(out)?.zip_map(bv, "div", |x, y| -x / y)?;
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalarVar(x, s) => {
                let sv = self.value(*s).item();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.scale(sv));
                }
                if self.needs(*s) {
                    let ds = g.mul(self.value(*x))?.sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::from_vec(&shape, vec![ds])?);
                }
            }
            Op::BroadcastAdd(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*row) {
                    let (_, c) = g.dims2("broadcast_add")?;
                    let mut d = vec![T::zero(); c];
                    for r in g.data().chunks(c) {
                        for (a, &b) in d.iter_mut().zip(r) {
                            *a = *a + b;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::from_vec(&shape, d)?);
                }
            }
            Op::BroadcastMul(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let (_, c) = g.dims2("broadcast_mul")?;
                if self.needs(*x) {
                    let mut d = g.data().to_vec();
                    for r in d.chunks_mut(c) {
                        for (a, &b) in r.iter_mut().zip(rv.data()) {
                            *a = *a * b;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
                }
                if self.needs(*row) {
                    let mut d = vec![T::zero(); c];
                    for (gr, xr) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                        for ((a, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                            *a = *a + gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_vec(rv.shape(), d)?);
                }
            }
            Op::RowSoftmax(x) => {
                let (_, c) = out.dims2("row_softmax")?;
                let mut d = vec![T::zero(); out.numel()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Log(x) => {
                let t = g.zip_map(self.value(*x), "log", |d, v| d / v)?;
                self.accumulate(grads, *x, t);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.mul(out)?),
            Op::Recip(x) => {
                let t = g.zip_map(out, "recip", |d, y| -d * y * y)?;
                self.accumulate(grads, *x, t);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::LayerNorm { x, rstd } => {
                let (_, c) = out.dims2("layer_norm")?;
                let inv_c = T::lit(c as f64).recip();
                let mut d = vec![T::zero(); out.numel()];
                for (i, ((dr, yr), gr)) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_c;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = rstd[i] * (gv - mean_g - y * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Gelu(x) => {
                let t = g.zip_map(self.value(*x), "gelu", |d, v| d * gelu_grad(v))?;
                self.accumulate(grads, *x, t);
            }
            Op::Relu(x) => {
                let t = g.zip_map(self.value(*x), "relu", |d, v| if v > T::zero() { d } else { T::zero() })?;
                self.accumulate(grads, *x, t);
            }
            Op::ClampMin(x, min) => {
                let min = *min;
                let t = g.zip_map(self.value(*x), "clamp_min", |d, v| if v > min { d } else { T::zero() })?;
                self.accumulate(grads, *x, t);
            }
            Op::Blur2d { x, h, w, kernel } => {
                let d = blur_2d_adjoint(g.data(), *h, *w, kernel);
                self.accumulate(grads, *x, Tensor::from_vec(&[*h, *w], d)?);
            }
            Op::SelectColumns(x, cols) => {
                let (r, c) = self.value(*x).dims2("select_columns")?;
                let k = cols.len();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for (j, &col) in cols.iter().enumerate() {
                        d[i * c + col] = d[i * c + col] + g.data()[i * k + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], d)?);
            }
            Op::SelectRows(x, rows) => {
                let (r, c) = self.value(*x).dims2("select_rows")?;
                let mut d = vec![T::zero(); r * c];
                for (j, &row) in rows.iter().enumerate() {
                    for (a, &b) in d[row * c..(row + 1) * c].iter_mut().zip(g.row(j)) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], d)?);
            }
            Op::ConcatColumns(parts) => {
                let (r, total) = g.dims2("concat_columns")?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[r, c], d)?);
                    }
                    offset += c;
                }
            }
            Op::ScatterAddRows { base, delta, rows } => {
                self.accumulate(grads, *base, g.clone());
                if self.needs(*delta) {
                    self.accumulate(grads, *delta, g.select_rows(rows)?);
                }
            }
        }
        Ok(())
    }
}
