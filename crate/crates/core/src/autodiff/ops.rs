use ndarray::{s, Array2, ArrayD, Axis, Ix2, IxDyn};

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `t` over the axes that were broadcast to reach its shape from
/// `target`.
pub(crate) fn sum_to_shape(t: &Tensor, target: &[usize]) -> Tensor {
    if t.shape() == target {
        return t.clone();
    }
    let mut r = t.clone();
    while r.ndim() > target.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &d) in target.iter().enumerate() {
        if d == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if broadcast_shape(a.shape(), b.shape()).is_none() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        Ok(self.tape.push_op(f(&a, &b), op))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.push_op(v, op)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div(self.id, rhs.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = par::matmul(as2(&a), as2(&b)).into_dyn();
        Ok(self.tape.push_op(out, Op::MatMul(self.id, rhs.id)))
    }

    /// Transpose of a rank-2 node.
    pub fn t(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("transpose", a.shape(), &[]));
        }
        let out = as2(&a).reversed_axes().as_standard_layout().into_owned();
        Ok(self.tape.push_op(out.into_dyn(), Op::Transpose(self.id)))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Var<'t> {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.tape.push_op(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(Error::shape("sum_axis", a.shape(), &[axis]));
        }
        let v = a.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Ok(self.tape.push_op(v, Op::SumAxis(self.id)))
    }

    /// Reduces by summation to a shape this node was broadcast from.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        match broadcast_shape(a.shape(), shape) {
            Some(b) if b == a.shape() => {}
            _ => return Err(Error::shape("sum_to", a.shape(), shape)),
        }
        if a.shape() == shape {
            return Ok(self);
        }
        Ok(self.tape.push_op(sum_to_shape(&a, shape), Op::SumTo(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        let v = a
            .broadcast(IxDyn(shape))
            .ok_or_else(|| Error::shape("broadcast_to", a.shape(), shape))?
            .to_owned();
        Ok(self.tape.push_op(v, Op::BroadcastTo(self.id)))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        self.unary(|x| x.powi(n), Op::Powi(self.id, n))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(stable_sigmoid, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(stable_softplus, Op::Softplus(self.id))
    }

    /// `x` for `x > 0`, `slope · x` otherwise. Second derivative is zero
    /// almost everywhere.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let a = self.value();
        let mask = a.mapv(|x| if x > 0.0 { 1.0 } else { slope });
        let out = &*a * &mask;
        let m = self.tape.constant(mask);
        self.tape.push_op(out, Op::Masked(self.id, m.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        let mask = a.mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
        let out = a.mapv(|x| x.clamp(lo, hi));
        let m = self.tape.constant(mask);
        self.tape.push_op(out, Op::Masked(self.id, m.id))
    }

    /// Columns `start..end` of a rank-2 node.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || start > end || end > a.shape()[1] {
            return Err(Error::shape("slice_cols", a.shape(), &[start, end]));
        }
        let v = as2(&a).slice(s![.., start..end]).to_owned().into_dyn();
        Ok(self.tape.push_op(v, Op::SliceCols(self.id, start)))
    }

    /// Embeds a rank-2 node into `width` zero columns starting at `start`.
    pub fn pad_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || start + a.shape()[1] > width {
            return Err(Error::shape("pad_cols", a.shape(), &[start, width]));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = Array2::<f64>::zeros((rows, width));
        out.slice_mut(s![.., start..start + cols]).assign(&as2(&a));
        Ok(self
            .tape
            .push_op(out.into_dyn(), Op::PadCols(self.id, start)))
    }

    /// Row-wise squared L2 norm of a rank-2 node: shape `(rows, 1)`.
    pub fn sq_norm_rows(self) -> Result<Var<'t>> {
        self.square().sum_axis(1)
    }

    /// Squared L2 norm of all elements.
    pub fn sq_norm(self) -> Var<'t> {
        self.square().sum()
    }
}

/// Concatenates rank-2 nodes along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
    let tape: &'t Tape = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].shape().first().copied().unwrap_or(0);
    for v in &values {
        if v.ndim() != 2 || v.shape()[0] != rows {
            return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
        }
    }
    let views: Vec<_> = values.iter().map(|v| as2(v)).collect();
    let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
    Ok(tape.push_op(
        out.into_dyn(),
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    ))
}
