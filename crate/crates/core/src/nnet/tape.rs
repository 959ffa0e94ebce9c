//! Reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `rows × cols` matrix. Operations append to the tape in
//! evaluation order; [`Tape::backward`] walks it in reverse and accumulates
//! gradients for parameter leaves into a flat vector.

use super::real::{gemm, linear, log_softmax_rows, sigmoid, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param { offset: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param { .. } => true,
            Op::Linear { x, w, b } => self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(b)),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Min(a, b) => self.ng(*a) || self.ng(*b),
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.ng(p)),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::ScaleRows(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::LogSoftmax(a)
            | Op::Gather(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.ng(*a),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &'static str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn input(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "input: shape mismatch");
        self.push(value, rows, cols, Op::Input)
    }

    /// Leaf copied from `params[offset..offset + rows*cols]`; its gradient
    /// lands at the same offset in the vector returned by `backward`.
    pub fn param(&mut self, params: &[T], offset: usize, rows: usize, cols: usize) -> Var {
        let value = params[offset..offset + rows * cols].to_vec();
        self.push(value, rows, cols, Op::Param { offset })
    }

    /// `x Wᵀ + b` with `W` of shape `out×in` and `b` of `out` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (rows, inner) = self.shape(x);
        let (out, w_in) = self.shape(w);
        assert_eq!(inner, w_in, "linear: inner dimension mismatch");
        if let Some(b) = b {
            assert_eq!(self.nodes[b.0].value.len(), out, "linear: bias length mismatch");
        }
        let mut y = vec![T::zero(); rows * out];
        linear(
            &self.nodes[x.0].value,
            rows,
            &self.nodes[w.0].value,
            out,
            inner,
            b.map(|b| self.nodes[b.0].value.as_slice()),
            &mut y,
        );
        self.push(y, rows, out, Op::Linear { x, w, b })
    }

    fn zip(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        self.same_shape(a, b, what);
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(value, rows, cols, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(value, rows, cols, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "min", |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Adds a constant matrix of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[T]) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(c.len(), rows * cols, "add_const: shape mismatch");
        let value = self.nodes[a.0].value.iter().zip(c).map(|(&x, &y)| x + y).collect();
        self.push(value, rows, cols, Op::AddConst(a))
    }

    /// Multiplies by a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(c.len(), rows * cols, "mul_const: shape mismatch");
        let value = self.nodes[a.0].value.iter().zip(&c).map(|(&x, &y)| x * y).collect();
        self.push(value, rows, cols, Op::MulConst(a, c))
    }

    /// Multiplies row `i` by `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: Vec<T>) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(c.len(), rows, "scale_rows: length mismatch");
        let mut value = self.nodes[a.0].value.clone();
        for (row, &s) in value.chunks_exact_mut(cols.max(1)).zip(&c) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(value, rows, cols, Op::ScaleRows(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start <= end && end <= cols, "slice_cols: out of range");
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.push(value, rows, end - start, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start <= end && end <= rows, "slice_rows: out of range");
        let value = self.nodes[a.0].value[start * cols..end * cols].to_vec();
        self.push(value, end - start, cols, Op::SliceRows { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.shape(parts[0]).1;
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows: column mismatch");
            rows += r;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(value, rows, cols, Op::ConcatRows(parts.to_vec()))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let mut value = vec![T::zero(); rows * cols];
        log_softmax_rows(&self.nodes[a.0].value, cols, &mut value);
        self.push(value, rows, cols, Op::LogSoftmax(a))
    }

    /// Picks `a[i, idx[i]]`, giving a column vector.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(idx.len(), rows, "gather: length mismatch");
        let src = &self.nodes[a.0].value;
        let value = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "gather: index out of range");
                src[r * cols + c]
            })
            .collect();
        self.push(value, rows, 1, Op::Gather(a, idx))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .chunks_exact(cols.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        self.push(value, rows, 1, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        self.push(vec![s], 1, 1, Op::Mean(a))
    }

    /// Gradient of the `1×1` node `loss` with respect to all parameter leaves,
    /// laid out like the parameter vector of length `n_params`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Vec<T>> {
        let (rows, cols) = self.shape(loss);
        if rows != 1 || cols != 1 {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = vec![T::zero(); n_params];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (o, &gi) in out[*offset..offset + g.len()].iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, inner) = self.shape(*x);
                    let out_dim = node.cols;
                    if self.ng(*x) {
                        let mut dx = vec![T::zero(); n * inner];
                        gemm(n, out_dim, inner, &g, false, self.value(*w), false, T::zero(), &mut dx);
                        acc(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let mut dw = vec![T::zero(); out_dim * inner];
                        gemm(out_dim, n, inner, &g, true, self.value(*x), false, T::zero(), &mut dw);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|&b| self.ng(b)) {
                        let mut db = vec![T::zero(); out_dim];
                        for row in g.chunks_exact(out_dim) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d = g.iter().zip(self.value(*b)).map(|(&gi, &y)| gi * y).collect();
                        acc(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = g.iter().zip(self.value(*a)).map(|(&gi, &x)| gi * x).collect();
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let d = (0..g.len()).map(|k| if vb[k] < va[k] { T::zero() } else { g[k] }).collect();
                        acc(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = (0..g.len()).map(|k| if vb[k] < va[k] { g[k] } else { T::zero() }).collect();
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|&v| v * *c).collect()),
                Op::AddScalar(a) | Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => acc(&mut grads, *a, g.iter().zip(c).map(|(&v, &s)| v * s).collect()),
                Op::ScaleRows(a, c) => {
                    let mut d = g;
                    for (row, &s) in d.chunks_exact_mut(node.cols.max(1)).zip(c) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.iter().zip(&node.value).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.iter().zip(&node.value).map(|(&gi, &t)| gi * (T::one() - t * t)).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(&node.value).map(|(&gi, &e)| gi * e).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let d = g.iter().zip(self.value(*a)).map(|(&gi, &x)| gi * two * x).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&gi, &x)| if x > *lo && x < *hi { gi } else { T::zero() })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let w = node.cols;
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = vec![T::zero(); rows * cols];
                    d[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.ng(p) {
                            acc(&mut grads, p, g[at..at + len].to_vec());
                        }
                        at += len;
                    }
                }
                Op::LogSoftmax(a) => {
                    let cols = node.cols;
                    let mut d = vec![T::zero(); g.len()];
                    for ((gr, yr), dr) in g
                        .chunks_exact(cols)
                        .zip(node.value.chunks_exact(cols))
                        .zip(d.chunks_exact_mut(cols))
                    {
                        let gs: T = gr.iter().copied().sum();
                        for k in 0..cols {
                            dr[k] = gr[k] - yr[k].exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Gather(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = vec![T::zero(); rows * cols];
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * cols + c] = g[r];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = vec![T::zero(); rows * cols];
                    for (r, row) in d.chunks_exact_mut(cols.max(1)).enumerate() {
                        row.iter_mut().for_each(|v| *v = g[r]);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    let v = g[0] / T::from_usize(n.max(1)).unwrap();
                    acc(&mut grads, *a, vec![v; n]);
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, y) in g.iter_mut().zip(d) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::seeding::rng_from;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    /// Checks `build` against central differences over every parameter.
    fn check(params: &[f64], build: impl Fn(&mut Tape<f64>, &[f64]) -> Var) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grad = tape.backward(loss, params.len()).unwrap();
        let h = 1e-3;
        for i in 0..params.len() {
            let mut p = params.to_vec();
            p[i] += h;
            let mut t = Tape::new();
            let l = build(&mut t, &p);
            let up = t.scalar(l);
            p[i] -= 2.0 * h;
            let mut t = Tape::new();
            let l = build(&mut t, &p);
            let down = t.scalar(l);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(grad[i], fd) < 1e-4, "coordinate {i}: autodiff {} vs fd {fd}", grad[i]);
        }
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let p = random(6, 0);
        let mut tape = Tape::new();
        let x = tape.param(&p, 0, 2, 3);
        let s = tape.sum(x);
        assert_eq!(tape.backward(s, 6).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let p = random(4, 1);
        let mut tape = Tape::new();
        let x = tape.param(&p, 0, 2, 2);
        let y = tape.tanh(x);
        let s = tape.sum(y);
        let z = tape.scale(s, 0.0);
        assert_eq!(tape.backward(z, 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[1.0, 2.0], 0, 1, 2);
        assert!(matches!(tape.backward(x, 2), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        for seed in 0..5 {
            let p = random(12, seed);
            check(&p, |t, p| {
                let a = t.param(p, 0, 2, 3);
                let b = t.param(p, 6, 2, 3);
                let s = t.sigmoid(a);
                let h = t.tanh(b);
                let m = t.mul(s, h);
                let e = t.exp(m);
                let r = t.relu(b);
                let q = t.square(r);
                let d = t.sub(e, q);
                let lo = t.min(d, a);
                let sum = t.add(lo, s);
                let sc = t.scale_rows(sum, vec![0.5, -2.0]);
                let mc = t.mul_const(sc, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
                let c = t.add_scalar(mc, 0.1);
                let mean = t.mean(c);
                t.scale(mean, 3.0)
            });
        }
    }

    #[test]
    fn linear_and_softmax_match_finite_differences() {
        for seed in 0..5 {
            let p = random(3 * 4 + 2 * 4 + 2, 10 + seed);
            check(&p, |t, p| {
                let x = t.param(p, 0, 3, 4);
                let w = t.param(p, 12, 2, 4);
                let b = t.param(p, 20, 2, 1);
                let y = t.linear(x, w, Some(b));
                let ls = t.log_softmax(y);
                let g = t.gather(ls, vec![0, 1, 1]);
                let pr = t.exp(ls);
                let ent = t.mul(pr, ls);
                let rs = t.row_sum(ent);
                let tot = t.add(g, rs);
                let cl = t.clamp(tot, -1.5, 0.0);
                t.sum(cl)
            });
        }
    }

    #[test]
    fn slicing_and_concat_match_finite_differences() {
        let p = random(12, 20);
        check(&p, |t, p| {
            let a = t.param(p, 0, 3, 4);
            let left = t.slice_cols(a, 1, 3);
            let top = t.slice_rows(a, 0, 2);
            let bottom = t.slice_rows(a, 2, 3);
            let cat = t.concat_rows(&[bottom, top]);
            let s1 = t.sum(cat);
            let sq = t.square(left);
            let s2 = t.sum(sq);
            let k = t.add_const(s2, &[0.5]);
            let prod = t.mul(s1, k);
            t.tanh(prod)
        });
    }
}
