//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; scalars are `1 x 1`. The tape is rebuilt for
//! each forward pass and consumed by [`Tape::backward`]. Nodes created from
//! constants never receive gradients, and neither does anything computed only
//! from constants, which keeps frozen encoders out of the backward pass.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Logit(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, xhat: Mat, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    L2Norm(Var),
    Normalize(Var),
    MaxCols(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    /// Scalar-valued function with a precomputed local gradient.
    ScalarFn(Var, Mat),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of an `n x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::AddRow(x, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// `ln(p / (1 - p))` for entries in `(0, 1)`.
    pub fn logit(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|p| (p / (1.0 - p)).ln());
        let rg = self.rg(x);
        self.push(v, Op::Logit(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::sin);
        let rg = self.rg(x);
        self.push(v, Op::Sin(x), rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::cos);
        let rg = self.rg(x);
        self.push(v, Op::Cos(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|e| e - mean);
            let var = row.fold(0.0, |a, &e| a + e * e) / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| e * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(
            xhat.clone(),
            Op::LayerNormRows { x, xhat, inv_std },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols(x, start), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(v, Op::SelectRows(x, rows.to_vec()), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    /// Row-wise maximum as an `n x 1` column. Ties go to the lowest column.
    pub fn max_cols(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let mut arg = Vec::with_capacity(input.nrows());
        let mut out = Mat::zeros((input.nrows(), 1));
        for (r, row) in input.rows().into_iter().enumerate() {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            arg.push(best);
            out[[r, 0]] = row[best];
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxCols(x, arg), rg)
    }

    /// Euclidean norm of all entries, as a `1 x 1`.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).fold(0.0, |a, &e| a + e * e).sqrt();
        let rg = self.rg(x);
        self.push(Mat::from_elem((1, 1), n), Op::L2Norm(x), rg)
    }

    /// `x / ||x||` over all entries; a zero input maps to zero.
    pub fn normalize(&mut self, x: Var) -> Var {
        let n = self.value(x).fold(0.0, |a, &e| a + e * e).sqrt();
        let v = if n > 0.0 {
            self.value(x) / n
        } else {
            Mat::zeros(self.shape(x))
        };
        let rg = self.rg(x);
        self.push(v, Op::Normalize(x), rg)
    }

    /// Mean binary cross-entropy of logits against `targets` (row-major).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.len(), targets.len(), "bce target count");
        let total: f64 = l
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let v = Mat::from_elem((1, 1), total / targets.len() as f64);
        let rg = self.rg(logits);
        self.push(v, Op::BceWithLogits(logits, targets.to_vec()), rg)
    }

    /// Records a scalar computed outside the tape whose gradient with respect
    /// to `input` is `local_grad` (same shape as `input`).
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Mat) -> Var {
        assert_eq!(local_grad.dim(), self.shape(input), "scalar_fn gradient shape");
        let rg = self.rg(input);
        self.push(
            Mat::from_elem((1, 1), value),
            Op::ScalarFn(input, local_grad),
            rg,
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        if !self.rg(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |v: Var, d: Mat, grads: &mut [Option<Mat>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)), grads);
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(x, r) => {
                acc(*x, g.clone(), grads);
                if self.rg(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                if self.rg(*b) {
                    acc(*b, -g, grads);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b), grads);
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a), grads);
                }
            }
            Op::MulRow(x, r) => {
                if self.rg(*x) {
                    acc(*x, g * self.value(*r), grads);
                }
                if self.rg(*r) {
                    let d = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*r, d, grads);
                }
            }
            Op::Scale(x, k) => acc(*x, g * *k, grads),
            Op::Logit(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &p| *d /= p * (1.0 - p));
                acc(*x, d, grads);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                acc(*x, d, grads);
            }
            Op::Sin(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| *d *= v.cos());
                acc(*x, d, grads);
            }
            Op::Cos(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| *d *= -v.sin());
                acc(*x, d, grads);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*x, d, grads);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |e, &yv| *e -= yv * dot);
                }
                acc(*x, d, grads);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let n = xhat.ncols() as f64;
                let mut d = Mat::zeros(xhat.dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    let mut dr = d.row_mut(r);
                    for c in 0..xhat.ncols() {
                        dr[c] = inv / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                    }
                }
                acc(*x, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        acc(*p, g.slice(s![.., start..start + w]).to_owned(), grads);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.rg(*p) {
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned(), grads);
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let mut d = Mat::zeros(self.shape(*x));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, d, grads);
            }
            Op::SelectRows(x, rows) => {
                let mut d = Mat::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*x, d, grads);
            }
            Op::Transpose(x) => acc(*x, g.t().to_owned(), grads),
            Op::Sum(x) => acc(*x, Mat::from_elem(self.shape(*x), g[[0, 0]]), grads),
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let mut d = Mat::zeros((rows, cols));
                let scaled = g.row(0).mapv(|e| e / rows as f64);
                for mut r in d.rows_mut() {
                    r.assign(&scaled);
                }
                acc(*x, d, grads);
            }
            Op::Normalize(x) => {
                let n = self.value(*x).fold(0.0, |a, &e| a + e * e).sqrt();
                let d = if n > 0.0 {
                    let y = &node.value;
                    let dot = (y * g).sum();
                    (g - &(y * dot)) / n
                } else {
                    Mat::zeros(self.shape(*x))
                };
                acc(*x, d, grads);
            }
            Op::L2Norm(x) => {
                let n = node.value[[0, 0]];
                let d = if n > 0.0 {
                    self.value(*x) * (g[[0, 0]] / n)
                } else {
                    Mat::zeros(self.shape(*x))
                };
                acc(*x, d, grads);
            }
            Op::MaxCols(x, arg) => {
                let mut d = Mat::zeros(self.shape(*x));
                for (r, &c) in arg.iter().enumerate() {
                    d[[r, c]] = g[[r, 0]];
                }
                acc(*x, d, grads);
            }
            Op::BceWithLogits(x, targets) => {
                let count = targets.len() as f64;
                let mut d = self.value(*x).clone();
                for (e, t) in d.iter_mut().zip(targets) {
                    *e = (sigmoid(*e) - t) / count * g[[0, 0]];
                }
                acc(*x, d, grads);
            }
            Op::ScalarFn(x, local) => acc(*x, local * g[[0, 0]], grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(f)/d(input) for a scalar-valued builder.
    fn check<F>(input: Mat, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get_or_zeros(x, input.dim());
        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |m: Mat| {
                let mut t = Tape::new();
                let v = t.param(m);
                let o = build(&mut t, v);
                t.scalar(o)
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / scale < tol,
                "entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn matmul_and_transposed_matmul() {
        let w = array![[0.2, -0.4], [0.9, 0.1], [-0.3, 0.5]];
        check(
            sample(),
            |t, x| {
                let c = t.constant(w.clone());
                let y = t.matmul(x, c);
                let y = t.mul(y, y);
                t.sum(y)
            },
            1e-6,
        );
        check(
            sample(),
            |t, x| {
                let y = t.matmul_t(x, x);
                let y = t.sin(y);
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_layer_norm_and_rows() {
        check(
            sample(),
            |t, x| {
                let s = t.softmax_rows(x);
                let c = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
                let y = t.mul(s, c);
                t.sum(y)
            },
            1e-6,
        );
        check(
            sample(),
            |t, x| {
                let n = t.layer_norm_rows(x);
                let c = t.row(&[0.3, -2.0, 1.5]);
                let y = t.mul_row(n, c);
                let y = t.cos(y);
                t.sum(y)
            },
            1e-5,
        );
        check(
            sample(),
            |t, x| {
                let m = t.mean_rows(x);
                let sel = t.select_rows(x, &[1, 1, 0]);
                let sel = t.add_row(sel, m);
                let tr = t.transpose(sel);
                let y = t.sigmoid(tr);
                let y = t.logit(y);
                let y = t.sigmoid(y);
                let y = t.concat_cols(&[y, tr]);
                let y = t.slice_cols(y, 1, 3);
                let y = t.concat_rows(&[y, y]);
                let y = t.mul(y, y);
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn norms_and_bce() {
        check(
            sample(),
            |t, x| {
                let n = t.l2_norm(x);
                let a = t.abs(x);
                let s = t.sum(a);
                let y = t.mul(n, s);
                t.scale(y, 0.5)
            },
            1e-6,
        );
        check(
            sample(),
            |t, x| {
                let u = t.normalize(x);
                let c = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
                let y = t.mul(u, c);
                t.sum(y)
            },
            1e-6,
        );
        check(
            sample(),
            |t, x| t.bce_with_logits(x, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            1e-6,
        );
    }

    #[test]
    fn row_max() {
        check(
            sample(),
            |t, x| {
                let m = t.max_cols(x);
                let m = t.mul(m, m);
                t.sum(m)
            },
            1e-6,
        );
    }

    #[test]
    fn relu_is_zero_on_negative_side() {
        let mut t = Tape::new();
        let x = t.param(array![[-1.0, 0.0, 2.0]]);
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let y = t.mul(c, p);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
