//! Reverse-mode differentiation over a recorded tape of matrix primitives.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes from last to first, so gradients are accumulated in the
//! exact reverse of the forward order. Nodes whose inputs carry no gradient
//! are skipped, which keeps frozen sub-graphs free during training.

use crate::error::{Error, Result};
use crate::numerics::matrix::{
    gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, normalize_row_into, sigmoid, softmax_row_into,
    Matrix,
};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubScalar(Var, Var),
    RowScale(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ColSums(Var),
    Sum(Var),
    Pick(Var, usize, usize),
    ForceFirstOne(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Also counts the multiply-accumulates performed by
/// its matrix products.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0, grad_enabled: true }
    }

    /// Tape that never tracks gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), macs: 0, grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by `matmul`/`matmul_nt` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (unless the tape is inference-only).
    pub fn variable(&mut self, value: Matrix<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::numerics::matrix::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).shape();
        self.macs += (m * k * value.cols()) as u64;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::numerics::matrix::matmul_nt(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).shape();
        self.macs += (m * k * value.cols()) as u64;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} onto {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `a − s` for a `1×1` node `s`.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("sub_scalar expects a 1x1 operand".into()));
        }
        let sv = self.value(s).get(0, 0);
        let value = self.value(a).map(|v| v - sv);
        Ok(self.push(value, Op::SubScalar(a, s), &[a, s]))
    }

    /// Multiplies row `i` of `a` by `scales[i]` (`scales` is `n×1`).
    pub fn row_scale(&mut self, a: Var, scales: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(scales));
        if s.cols() != 1 || s.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "row_scale: {:?} scales for {:?}",
                s.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let f = s.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(value, Op::RowScale(a, scales), &[a, scales]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::numerics::matrix::softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row softmax restricted to the columns where `keep` is true; other
    /// columns receive probability exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if keep.len() != x.cols() || !keep.iter().any(|&k| k) {
            return Err(Error::Shape("masked softmax needs one kept column per input column".into()));
        }
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_row_into(x.row(r), Some(keep), value.row_mut(r));
        }
        Ok(self.push(value, Op::MaskedSoftmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let input = self.value(x);
        let cols = input.cols();
        if self.value(gain).shape() != (1, cols) || self.value(bias).shape() != (1, cols) {
            return Err(Error::Shape("layer_norm gain/bias must be 1 x cols".into()));
        }
        let mut xhat = Matrix::zeros(input.rows(), cols);
        let mut inv_std = Vec::with_capacity(input.rows());
        for r in 0..input.rows() {
            inv_std.push(normalize_row_into(input.row(r), xhat.row_mut(r)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for ((v, &gv), &bv) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::Shape(format!("row {bad} out of range for {} rows", x.rows())));
        }
        let value = x.select_rows(rows);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols needs equal row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let out = value.row_mut(r);
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column sums of an `r×c` node as a `c×1` column.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![T::zero(); x.cols()];
        for r in 0..x.rows() {
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(Matrix::column_vector(out), Op::ColSums(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let x = self.value(a);
        if r >= x.rows() || c >= x.cols() {
            return Err(Error::Shape(format!("pick ({r},{c}) from {:?}", x.shape())));
        }
        let value = Matrix::scalar(x.get(r, c));
        Ok(self.push(value, Op::Pick(a, r, c), &[a]))
    }

    /// Replaces entry `(0,0)` with one; that entry passes no gradient.
    pub fn force_first_one(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        if !value.is_empty() {
            value.data_mut()[0] = T::one();
        }
        self.push(value, Op::ForceFirstOne(a), &[a])
    }

    /// Gradients of the `1×1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a 1x1 loss".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut order = Vec::new();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, order })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).shape();
                let n = val(b).cols();
                if wants(a) {
                    gemm_nt(g.data(), val(b).data(), acc!(a).data_mut(), m, n, k);
                }
                if wants(b) {
                    gemm_tn(val(a).data(), g.data(), acc!(b).data_mut(), m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = val(a).shape();
                let n = val(b).rows();
                if wants(a) {
                    gemm_nn(g.data(), val(b).data(), acc!(a).data_mut(), m, n, k);
                }
                if wants(b) {
                    gemm_tn(g.data(), val(a).data(), acc!(b).data_mut(), m, n, k);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc!(a).add_assign(g);
                }
                if wants(b) {
                    acc!(b).add_assign(g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc!(a).add_assign(g);
                }
                if wants(b) {
                    let gb = acc!(b);
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let ga = acc!(a);
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(val(b).data()) {
                        *o += gv * bv;
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(val(a).data()) {
                        *o += gv * av;
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    acc!(a).add_assign(g);
                }
                if wants(row) {
                    let gr = acc!(row);
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::SubScalar(a, s) => {
                if wants(a) {
                    acc!(a).add_assign(g);
                }
                if wants(s) {
                    acc!(s).data_mut()[0] -= g.sum();
                }
            }
            &Op::RowScale(a, s) => {
                let (x, sv) = (val(a), val(s));
                if wants(a) {
                    let ga = acc!(a);
                    for r in 0..g.rows() {
                        let f = sv.get(r, 0);
                        for (o, &gv) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += gv * f;
                        }
                    }
                }
                if wants(s) {
                    let gs = acc!(s);
                    for r in 0..g.rows() {
                        let dot: T = g.row(r).iter().zip(x.row(r)).map(|(&p, &q)| p * q).sum();
                        gs.data_mut()[r] += dot;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    let ga = acc!(a);
                    for (o, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * c;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * y * (T::one() - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * (T::one() - y * y);
                    }
                }
            }
            &Op::Gelu(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(val(a).data()) {
                        *o += gv * gelu_grad(x);
                    }
                }
            }
            &Op::Exp(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * y;
                    }
                }
            }
            &Op::Softmax(a) | &Op::MaskedSoftmax(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), node.value.row(r));
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((o, &gv), &y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), node.value.row(r));
                        let total: T = gr.iter().copied().sum();
                        for ((o, &gv), &y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += gv - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                if wants(bias) {
                    let gb = acc!(bias);
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if wants(gain) {
                    let gg = acc!(gain);
                    for r in 0..g.rows() {
                        for ((o, &v), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += v * h;
                        }
                    }
                }
                if wants(x) {
                    let gamma = val(gain).data();
                    let n = T::lit(g.cols() as f64);
                    let gx = acc!(x);
                    let mut dxhat = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for ((d, &v), &gm) in dxhat.iter_mut().zip(g.row(r)).zip(gamma) {
                            *d = v * gm;
                        }
                        let hr = xhat.row(r);
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dh: T = dxhat.iter().zip(hr).map(|(&p, &q)| p * q).sum();
                        let k = inv_std[r] / n;
                        for ((o, &d), &h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(hr) {
                            *o += k * (n * d - sum_d - h * sum_dh);
                        }
                    }
                }
            }
            Op::SelectRows(a, rows) => {
                let a = *a;
                if wants(a) {
                    let ga = acc!(a);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::ColSums(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for r in 0..ga.rows() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let s = g.get(0, 0);
                    acc!(a).data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            &Op::Pick(a, r, c) => {
                if wants(a) {
                    let ga = acc!(a);
                    let v = ga.get(r, c) + g.get(0, 0);
                    ga.set(r, c, v);
                }
            }
            &Op::ForceFirstOne(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for (i, (o, &v)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if i > 0 {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'g, T: Scalar>(
    grads: &'g mut [Option<Matrix<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'g mut Matrix<T> {
    let (r, c) = nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node, `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Node indices in the order `backward` processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}
