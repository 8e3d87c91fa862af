//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! Every node holds a row-major matrix. Rows are batch entries, so a whole
//! minibatch flows through one graph. The primitive set is:
//!
//! | primitive     | value                                   |
//! |---------------|-----------------------------------------|
//! | `add`         | `a + b` (row/column broadcast of size-1 axes) |
//! | `mul`         | `a ⊙ b` (same broadcast rules)          |
//! | `matvec`      | `x·Wᵀ` for `x: n×in`, `W: out×in`       |
//! | `tanh`, `exp`, `sin` | elementwise                      |
//! | `log`         | elementwise, floored at `1e-300`, error for `x ≤ 0` |
//! | `log_sum_exp` | row-wise over columns, `n×m → n×1`      |
//! | `affine`      | `α·a + β` with constant `α, β`          |
//! | `sum`         | row sums (`n×m → n×1`) or total (`→ 1×1`) |
//!
//! Column selection and scattering move values without arithmetic. Anything
//! else (`sub`, `square`, `mean`) is a composition of the above.

use super::matrix::Matrix;
use super::param::ParamSlot;
use crate::error::{Error, Result};

/// Smallest argument `log` accepts before flooring.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param { offset: usize },
    Const,
    Add(Var, Var),
    Mul(Var, Var),
    MatVec { x: Var, w: Var },
    Tanh(Var),
    Sin(Var),
    Exp(Var),
    Log(Var),
    Affine { a: Var, scale: f64 },
    LogSumExp(Var),
    SumCols(Var),
    SumAll(Var),
    SelectCols { a: Var, cols: Vec<usize> },
    ScatterCols { parts: Vec<(Var, Vec<usize>)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// A single-use computation graph over a borrowed flat parameter vector.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

fn checked(primitive: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NumericOverflow { primitive })
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(format!(
            "{what}: cannot broadcast {}x{} with {}x{}",
            a.0, a.1, b.0, b.1
        ))),
    }
}

#[inline]
fn bget(m: &Matrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows() == 1 { 0 } else { r };
    let cc = if m.cols() == 1 { 0 } else { c };
    m.get(rr, cc)
}

/// Sum a gradient over the axes along which an operand of `shape` was broadcast.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..grad.rows() {
        let rr = if shape.0 == 1 { 0 } else { r };
        for c in 0..grad.cols() {
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + grad.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "expected a scalar, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m.get(0, 0))
    }

    /// Trainable leaf reading `rows×cols` parameters starting at `offset`.
    pub fn param_range(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let end = offset + rows * cols;
        if end > self.params.len() {
            return Err(Error::shape(format!(
                "parameter range {offset}..{end} exceeds {} parameters",
                self.params.len()
            )));
        }
        let m = Matrix::new(rows, cols, self.params[offset..end].to_vec())?;
        let m = checked("param", m)?;
        Ok(self.push(Op::Param { offset }, m))
    }

    pub fn param(&mut self, slot: &ParamSlot) -> Result<Var> {
        self.param_range(slot.offset, slot.rows, slot.cols)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, m: Matrix) -> Result<Var> {
        let m = checked("const", m)?;
        Ok(self.push(Op::Const, m))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Matrix::scalar(v))
    }

    fn elementwise2(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (ma, mb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(ma.shape(), mb.shape(), name)?;
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, f(bget(ma, r, c), bget(mb, r, c)));
            }
        }
        checked(name, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.elementwise2(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), m))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.elementwise2(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), m))
    }

    /// Batched matrix-vector product: each row of `x` times `Wᵀ`.
    pub fn matvec(&mut self, x: Var, w: Var) -> Result<Var> {
        let (mx, mw) = (self.value(x), self.value(w));
        if mx.cols() != mw.cols() {
            return Err(Error::shape(format!(
                "matvec: input width {} does not match weight width {}",
                mx.cols(),
                mw.cols()
            )));
        }
        let (n, inner, out_w) = (mx.rows(), mx.cols(), mw.rows());
        let mut out = Matrix::zeros(n, out_w);
        for r in 0..n {
            let xr = mx.row(r);
            for o in 0..out_w {
                let wr = mw.row(o);
                let mut acc = 0.0;
                for i in 0..inner {
                    acc += xr[i] * wr[i];
                }
                out.set(r, o, acc);
            }
        }
        let out = checked("matvec", out)?;
        Ok(self.push(Op::MatVec { x, w }, out))
    }

    fn map1(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| f(v)).collect();
        checked(name, Matrix::new(src.rows(), src.cols(), data)?)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let m = self.map1(a, "tanh", f64::tanh)?;
        Ok(self.push(Op::Tanh(a), m))
    }

    /// Elementwise sine; needed by periodic energy surfaces.
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let m = self.map1(a, "sin", f64::sin)?;
        Ok(self.push(Op::Sin(a), m))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let m = self.map1(a, "exp", f64::exp)?;
        Ok(self.push(Op::Exp(a), m))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let m = self.map1(a, "log", |v| v.max(LOG_FLOOR).ln())?;
        Ok(self.push(Op::Log(a), m))
    }

    /// `scale·a + shift` for constants `scale` and `shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let m = self.map1(a, "affine", |v| scale * v + shift)?;
        Ok(self.push(Op::Affine { a, scale }, m))
    }

    /// Row-wise `log Σ_j exp(a_ij)`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.cols() == 0 {
            return Err(Error::shape("log_sum_exp over zero columns"));
        }
        let data = src.iter_rows().map(log_sum_exp).collect();
        let m = checked("log_sum_exp", Matrix::new(src.rows(), 1, data)?)?;
        Ok(self.push(Op::LogSumExp(a), m))
    }

    /// Row sums, `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = src.iter_rows().map(|r| r.iter().sum()).collect();
        let m = checked("sum", Matrix::new(src.rows(), 1, data)?)?;
        Ok(self.push(Op::SumCols(a), m))
    }

    /// Sum of all entries, `→ 1×1`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let m = checked("sum", Matrix::scalar(s))?;
        Ok(self.push(Op::SumAll(a), m))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&c) = cols.iter().find(|&&c| c >= src.cols()) {
            return Err(Error::shape(format!(
                "column {c} out of range for width {}",
                src.cols()
            )));
        }
        let mut out = Matrix::zeros(src.rows(), cols.len());
        for r in 0..src.rows() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(r, j, src.get(r, c));
            }
        }
        Ok(self.push(
            Op::SelectCols {
                a,
                cols: cols.to_vec(),
            },
            out,
        ))
    }

    /// Assemble a `rows×width` matrix from parts whose columns land at the given
    /// destination indices. Every destination column must be written exactly once.
    pub fn scatter_cols(&mut self, parts: &[(Var, &[usize])], width: usize) -> Result<Var> {
        let rows = parts
            .first()
            .map(|(v, _)| self.value(*v).rows())
            .ok_or_else(|| Error::shape("scatter_cols with no parts"))?;
        let mut written = vec![false; width];
        let mut out = Matrix::zeros(rows, width);
        for (v, dest) in parts {
            let src = self.value(*v);
            if src.rows() != rows || src.cols() != dest.len() {
                return Err(Error::shape(format!(
                    "scatter part is {}x{}, expected {rows}x{}",
                    src.rows(),
                    src.cols(),
                    dest.len()
                )));
            }
            for (j, &c) in dest.iter().enumerate() {
                if c >= width || written[c] {
                    return Err(Error::shape(format!("scatter column {c} invalid or repeated")));
                }
                written[c] = true;
                for r in 0..rows {
                    out.set(r, c, src.get(r, j));
                }
            }
        }
        if written.iter().any(|w| !w) {
            return Err(Error::shape("scatter leaves columns unset"));
        }
        let parts = parts.iter().map(|(v, d)| (*v, d.to_vec())).collect();
        Ok(self.push(Op::ScatterCols { parts }, out))
    }

    /// Side-by-side concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, blocks: &[Var]) -> Result<Var> {
        let mut dests = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for &b in blocks {
            let w = self.value(b).cols();
            dests.push((start..start + w).collect::<Vec<_>>());
            start += w;
        }
        let parts: Vec<(Var, &[usize])> = blocks
            .iter()
            .zip(&dests)
            .map(|(&b, d)| (b, d.as_slice()))
            .collect();
        self.scatter_cols(&parts, start)
    }

    // Compositions.

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().len();
        if n == 0 {
            return Err(Error::shape("mean of an empty matrix"));
        }
        let s = self.sum_all(a)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Gradient of the scalar node `out` with respect to the tape's parameter vector.
    pub fn backward(&self, out: Var) -> Result<Vec<f64>> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::shape("backward requires a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));
        let mut flat = vec![0.0; self.params.len()];

        fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param { offset } => {
                    for (f, x) in flat[*offset..].iter_mut().zip(g.data()) {
                        *f += x;
                    }
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    let ga = reduce_to(&g, self.value(*a).shape());
                    let gb = reduce_to(&g, self.value(*b).shape());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    let mut db = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gv = g.get(r, c);
                            da.set(r, c, gv * bget(mb, r, c));
                            db.set(r, c, gv * bget(ma, r, c));
                        }
                    }
                    accumulate(&mut grads, *a, reduce_to(&da, ma.shape()));
                    accumulate(&mut grads, *b, reduce_to(&db, mb.shape()));
                }
                Op::MatVec { x, w } => {
                    let (mx, mw) = (self.value(*x), self.value(*w));
                    let (n, inner, out_w) = (mx.rows(), mx.cols(), mw.rows());
                    let mut dx = Matrix::zeros(n, inner);
                    let mut dw = Matrix::zeros(out_w, inner);
                    for r in 0..n {
                        let gr = g.row(r);
                        let dxr = dx.row_mut(r);
                        for o in 0..out_w {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = mw.row(o);
                            for i in 0..inner {
                                dxr[i] += go * wr[i];
                            }
                        }
                    }
                    for o in 0..out_w {
                        let dwr = dw.row_mut(o);
                        for r in 0..n {
                            let go = g.get(r, o);
                            if go == 0.0 {
                                continue;
                            }
                            let xr = mx.row(r);
                            for i in 0..inner {
                                dwr[i] += go * xr[i];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let mut d = g;
                    for (dv, x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *dv *= x.cos();
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let mut d = g;
                    for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let mut d = g;
                    for (dv, &x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *dv = if x >= LOG_FLOOR { *dv / x } else { 0.0 };
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Affine { a, scale } => {
                    let mut d = g;
                    for dv in d.data_mut() {
                        *dv *= scale;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSumExp(a) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let (lse, gr) = (node.value.get(r, 0), g.get(r, 0));
                        for c in 0..src.cols() {
                            d.set(r, c, gr * (src.get(r, c) - lse).exp());
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        d.row_mut(r).fill(g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let src = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Matrix::filled(src.rows(), src.cols(), g.get(0, 0)),
                    );
                }
                Op::SelectCols { a, cols } => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            let v = d.get(r, c) + g.get(r, j);
                            d.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ScatterCols { parts } => {
                    for (v, dest) in parts {
                        let mut d = Matrix::zeros(g.rows(), dest.len());
                        for r in 0..g.rows() {
                            for (j, &c) in dest.iter().enumerate() {
                                d.set(r, j, g.get(r, c));
                            }
                        }
                        accumulate(&mut grads, *v, d);
                    }
                }
            }
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(flat)
    }
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
