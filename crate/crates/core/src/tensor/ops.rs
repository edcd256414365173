//! Forward/backward primitives. Each forward has a matching `*_backward`
//! that maps the output gradient to exact analytic input gradients.

use super::{DiffNode, Shape, Tensor, MAX_RANK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Max,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }

    /// (∂/∂a, ∂/∂b). Max ties send the whole gradient to `a`.
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Tensor {
    a.map(|x| op.apply(x))
}

pub fn unary_backward(op: UnaryOp, input: &Tensor, output: &Tensor, grad: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad.data())
        .map(|((&x, &y), &g)| g * op.derivative(x, y))
        .collect();
    Tensor {
        shape: input.shape().clone(),
        data,
    }
}

fn broadcast_shape(a: &Shape, b: &Shape) -> Result<Shape> {
    if a.rank() != b.rank() {
        return Err(Error::shape(format!(
            "cannot broadcast {a} with {b}: rank differs"
        )));
    }
    let dims = a
        .dims()
        .iter()
        .zip(b.dims())
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a} with {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Shape::new(&dims)
}

/// Strides of `shape` (padded to rank 4) with zeros where it is broadcast
/// against `out`.
fn broadcast_strides(shape: &Shape, out: &Shape) -> [usize; MAX_RANK] {
    let dims = shape.padded();
    let out_dims = out.padded();
    let mut strides = [0; MAX_RANK];
    let mut acc = 1;
    for ax in (0..MAX_RANK).rev() {
        strides[ax] = if dims[ax] == 1 && out_dims[ax] != 1 {
            0
        } else {
            acc
        };
        acc *= dims[ax];
    }
    strides
}

/// Visits every position of `out` in row-major order, yielding the linear
/// offsets into the two broadcast operands.
fn for_each_broadcast(
    out: &Shape,
    sa: [usize; MAX_RANK],
    sb: [usize; MAX_RANK],
    mut f: impl FnMut(usize, usize, usize),
) {
    let d = out.padded();
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                for i3 in 0..d[3] {
                    let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2] + i3 * sa[3];
                    let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2] + i3 * sb[3];
                    f(k, oa, ob);
                    k += 1;
                }
            }
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape().clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; out_shape.numel()];
    for_each_broadcast(&out_shape, sa, sb, |k, oa, ob| {
        data[k] = op.apply(a.data()[oa], b.data()[ob]);
    });
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Gradients for both operands; broadcast operands receive the sum over the
/// axes they were stretched along.
pub fn binary_backward(
    op: BinaryOp,
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    grad.expect_shape(out_shape.dims())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut ga = Tensor::zeros_like(a);
    let mut gb = Tensor::zeros_like(b);
    for_each_broadcast(&out_shape, sa, sb, |k, oa, ob| {
        let (da, db) = op.partials(a.data[oa], b.data[ob]);
        ga.data[oa] += grad.data[k] * da;
        gb.data[ob] += grad.data[k] * db;
    });
    Ok((ga, gb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// Node-level elementwise op: forward value of `op` applied to `a` (and `b`).
pub fn elementwise(op: Elementwise, a: &DiffNode, b: Option<&DiffNode>) -> Result<DiffNode> {
    let value = match (op, b) {
        (Elementwise::Unary(u), None) => unary(u, &a.value),
        (Elementwise::Binary(bop), Some(b)) => binary(bop, &a.value, &b.value)?,
        (Elementwise::Unary(_), Some(_)) => {
            return Err(Error::argument("unary op given a second operand"))
        }
        (Elementwise::Binary(_), None) => {
            return Err(Error::argument("binary op missing its second operand"))
        }
    };
    Ok(DiffNode {
        requires_grad: a.requires_grad || b.is_some_and(|b| b.requires_grad),
        ..DiffNode::new(value)
    })
}

/// Pushes `out.grad` back into the operands' gradient buffers.
pub fn elementwise_backward(
    op: Elementwise,
    out: &DiffNode,
    a: &mut DiffNode,
    b: Option<&mut DiffNode>,
) -> Result<()> {
    match (op, b) {
        (Elementwise::Unary(u), None) => {
            let g = unary_backward(u, &a.value, &out.value, &out.grad);
            a.accumulate(&g)
        }
        (Elementwise::Binary(bop), Some(b)) => {
            let (ga, gb) = binary_backward(bop, &a.value, &b.value, &out.grad)?;
            a.accumulate(&ga)?;
            b.accumulate(&gb)
        }
        _ => Err(Error::argument("operand count does not match op arity")),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {} · {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// Returns (g·bᵀ, aᵀ·g).
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    grad.expect_shape(&[m, n])?;
    let mut ga = vec![0.0; m * k];
    gemm_nt(grad.data(), b.data(), &mut ga, m, n, k);
    let mut gb = vec![0.0; k * n];
    gemm_tn(a.data(), grad.data(), &mut gb, m, k, n);
    Ok((Tensor::from_vec(&[m, k], ga)?, Tensor::from_vec(&[k, n], gb)?))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "transpose input")?;
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn reduced_layout(a: &Tensor, axes: &[usize]) -> Result<(Shape, [usize; MAX_RANK], usize)> {
    if axes.is_empty() {
        return Err(Error::argument("reduction needs at least one axis"));
    }
    let rank = a.shape().rank();
    let mut dims = a.dims().to_vec();
    for &ax in axes {
        if ax >= rank {
            return Err(Error::argument(format!(
                "axis {ax} out of range for {}",
                a.shape()
            )));
        }
        dims[ax] = 1;
    }
    let out_shape = Shape::new(&dims)?;
    let count = a.numel() / out_shape.numel();
    let strides = broadcast_strides(&out_shape, a.shape());
    Ok((out_shape, strides, count))
}

/// Reduction keeping reduced axes as extent 1.
pub fn reduce(op: ReduceOp, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (out_shape, so, count) = reduced_layout(a, axes)?;
    let init = match op {
        ReduceOp::Mean => 0.0,
        ReduceOp::Max => f64::NEG_INFINITY,
    };
    let mut data = vec![init; out_shape.numel()];
    let identity = broadcast_strides(a.shape(), a.shape());
    for_each_broadcast(a.shape(), identity, so, |k, _, o| match op {
        ReduceOp::Mean => data[o] += a.data[k],
        ReduceOp::Max => {
            if a.data[k] > data[o] {
                data[o] = a.data[k];
            }
        }
    });
    if op == ReduceOp::Mean {
        let inv = count as f64;
        data.iter_mut().for_each(|v| *v /= inv);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Mean spreads g/count uniformly; max routes g to the first argmax in
/// row-major order.
pub fn reduce_backward(op: ReduceOp, a: &Tensor, axes: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (out_shape, so, count) = reduced_layout(a, axes)?;
    grad.expect_shape(out_shape.dims())?;
    let identity = broadcast_strides(a.shape(), a.shape());
    let mut ga = Tensor::zeros_like(a);
    match op {
        ReduceOp::Mean => {
            let inv = 1.0 / count as f64;
            for_each_broadcast(a.shape(), identity, so, |k, _, o| {
                ga.data[k] = grad.data[o] * inv;
            });
        }
        ReduceOp::Max => {
            let mut best = vec![(f64::NEG_INFINITY, usize::MAX); out_shape.numel()];
            for_each_broadcast(a.shape(), identity, so, |k, _, o| {
                if a.data[k] > best[o].0 || best[o].1 == usize::MAX {
                    best[o] = (a.data[k], k);
                }
            });
            for (o, &(_, k)) in best.iter().enumerate() {
                ga.data[k] = grad.data[o];
            }
        }
    }
    Ok(ga)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_activations() {
        assert_eq!(UnaryOp::Sigmoid.apply(0.0), 0.5);
        assert_eq!(UnaryOp::Relu.apply(-3.2), 0.0);
        assert_eq!(UnaryOp::Relu.apply(1.5), 1.5);
        assert!((sigmoid(-800.0)).is_finite());
    }

    #[test]
    fn elementwise_max() {
        let out = binary(BinaryOp::Max, &t(&[2], &[1.0, 5.0]), &t(&[2], &[4.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            binary(BinaryOp::Add, &a, &b),
            Err(Error::Shape(_))
        ));
        let c = Tensor::zeros(&[6]).unwrap();
        assert!(binary(BinaryOp::Add, &a, &c).is_err());
    }

    #[test]
    fn broadcast_backward_sums_stretched_axes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let g = Tensor::full(&[2, 3], 1.0).unwrap();
        let (ga, gb) = binary_backward(BinaryOp::Mul, &a, &b, &g).unwrap();
        assert_eq!(gb.data(), &[5.0, 7.0, 9.0]);
        assert_eq!(ga.data(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn add_backward_is_identity_on_each_operand() {
        let a = t(&[3], &[0.1, -0.4, 0.9]);
        let b = t(&[3], &[0.5, 0.5, -2.0]);
        let g = t(&[3], &[1.5, -2.0, 0.25]);
        let (ga, gb) = binary_backward(BinaryOp::Add, &a, &b, &g).unwrap();
        assert_eq!(ga, g);
        assert_eq!(gb, g);
    }

    #[test]
    fn node_level_backward_accumulates() {
        let mut a = DiffNode::new(t(&[2], &[1.0, -1.0]));
        let mut b = DiffNode::new(t(&[2], &[3.0, 2.0]));
        let op = Elementwise::Binary(BinaryOp::Mul);
        let mut out = elementwise(op, &a, Some(&b)).unwrap();
        assert_eq!(out.value.data(), &[3.0, -2.0]);
        out.grad.fill(1.0);
        elementwise_backward(op, &out, &mut a, Some(&mut b)).unwrap();
        elementwise_backward(op, &out, &mut a, Some(&mut b)).unwrap();
        assert_eq!(a.grad.data(), &[6.0, 4.0]);
        assert_eq!(b.grad.data(), &[2.0, -2.0]);
        assert!(elementwise(op, &a, None).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let any = t(&[3, 4], &[1.5; 12]);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 4]).unwrap());
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
        assert!(matches!(matmul(&row, &row), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce(ReduceOp::Mean, &m, &[0, 1]).unwrap().data(), &[2.5]);
        let v = t(&[3], &[1.0, 7.0, 3.0]);
        assert_eq!(reduce(ReduceOp::Max, &v, &[0]).unwrap().data(), &[7.0]);
        let k = Tensor::full(&[2, 3, 4], -1.25).unwrap();
        for axes in [&[0][..], &[1, 2], &[0, 1, 2]] {
            assert!(reduce(ReduceOp::Mean, &k, axes)
                .unwrap()
                .data()
                .iter()
                .all(|&x| x == -1.25));
        }
        assert!(matches!(
            reduce(ReduceOp::Mean, &m, &[]),
            Err(Error::Argument(_))
        ));
        assert!(reduce(ReduceOp::Mean, &m, &[2]).is_err());
    }

    #[test]
    fn reduce_max_tie_goes_to_first_index() {
        let v = t(&[1, 4], &[2.0, 5.0, 5.0, 1.0]);
        let g = t(&[1, 1], &[3.0]);
        let ga = reduce_backward(ReduceOp::Max, &v, &[1], &g).unwrap();
        assert_eq!(ga.data(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_keeps_unreduced_axes() {
        let a = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let r = reduce(ReduceOp::Mean, &a, &[1]).unwrap();
        assert_eq!(r.dims(), &[2, 1, 2]);
        assert_eq!(r.data(), &[2.0, 3.0, 6.0, 7.0]);
    }
}
