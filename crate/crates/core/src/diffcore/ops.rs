//! Forward kernels for every primitive the tape records.
//!
//! Each function is a pure map from input tensors to an output tensor and can
//! be used directly when no gradient is needed.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `out = op(a) · op(b) + beta · out` for row-major `a` (`a_rows × a_cols`) and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k, rsa, csa) = if ta {
        (a_cols, a_rows, 1isize, a_cols as isize)
    } else {
        (a_rows, a_cols, a_cols as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if tb {
        (b_cols, b_rows, 1isize, b_cols as isize)
    } else {
        (b_rows, b_cols, b_cols as isize, 1isize)
    };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch count, rows, cols of a rank-2 or rank-3 matmul operand.
fn mat_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [g, r, c] => Some((g, r, c)),
        _ => None,
    }
}

/// Matrix product `op(a) · op(b)`; rank-3 operands are multiplied batch by batch.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let bad = || {
        Error::shape(
            "matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ),
        )
    };
    let (ga, ar, ac) = mat_dims(a).ok_or_else(bad)?;
    let (gb, br, bc) = mat_dims(b).ok_or_else(bad)?;
    if a.rank() != b.rank() || ga != gb {
        return Err(bad());
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(bad());
    }
    let mut out = vec![0.0; ga * m * n];
    for g in 0..ga {
        gemm(
            &a.data()[g * ar * ac..(g + 1) * ar * ac],
            ar,
            ac,
            ta,
            &b.data()[g * br * bc..(g + 1) * br * bc],
            br,
            bc,
            tb,
            &mut out[g * m * n..(g + 1) * m * n],
            0.0,
        );
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![ga, m, n]
    };
    Tensor::new(shape, out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("subtract", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("multiply", a, b, |x, y| x * y)
}

/// Adds `row` to every row of `x` (`x` viewed as `rows × row.len()`).
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    if row.rank() != 1 || x.cols() != row.len() {
        return Err(Error::shape(
            "add_row",
            format!("{:?} + row {:?}", x.shape(), row.shape()),
        ));
    }
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(row.len()) {
        for (o, b) in r.iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Multiplies row `i` of `x` by `col[i]`.
pub fn mul_col(x: &Tensor, col: &Tensor) -> Result<Tensor> {
    if col.rank() != 1 || x.rows() != col.len() {
        return Err(Error::shape(
            "mul_col",
            format!("{:?} * col {:?}", x.shape(), col.shape()),
        ));
    }
    let c = x.cols();
    let mut out = x.clone();
    for (r, s) in out.data_mut().chunks_mut(c).zip(col.data()) {
        for o in r {
            *o *= s;
        }
    }
    Ok(out)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    map(x, |v| v * c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    map(x, |v| v + c)
}

pub fn exp(x: &Tensor) -> Tensor {
    map(x, f64::exp)
}

pub fn ln(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain("ln", format!("nonpositive input {}", v)));
    }
    Ok(map(x, f64::ln))
}

pub fn square(x: &Tensor) -> Tensor {
    map(x, |v| v * v)
}

pub fn sqrt(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain("sqrt", format!("nonpositive input {}", v)));
    }
    Ok(map(x, f64::sqrt))
}

pub fn recip(x: &Tensor) -> Result<Tensor> {
    if x.data().contains(&0.0) {
        return Err(Error::domain("recip", "division by zero"));
    }
    Ok(map(x, f64::recip))
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn clamp_min(x: &Tensor, floor: f64) -> Tensor {
    map(x, |v| v.max(floor))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::shape(
            op,
            format!("axis {} out of range for {:?}", axis, x.shape()),
        ));
    }
    Ok(())
}

/// Sums over `axis`, dropping it (a rank-1 input yields shape `[1]`).
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.len() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?}", x.shape(), shape),
        ));
    }
    Tensor::new(shape.to_vec(), x.data().to_vec())
}

fn check_permutation(x: &Tensor, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; x.rank()];
    let ok = axes.len() == x.rank()
        && axes.iter().all(|&a| {
            a < seen.len() && !std::mem::replace(&mut seen[a], true)
        });
    if !ok {
        return Err(Error::shape(
            "permute",
            format!("axes {:?} invalid for {:?}", axes, x.shape()),
        ));
    }
    Ok(())
}

/// Walks the output of a permutation in row-major order and yields, for each
/// output position, the matching flat input offset.
pub(crate) fn permute_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_permutation(x, axes)?;
    let data = permute_offsets(x.shape(), axes)
        .into_iter()
        .map(|o| x.data()[o])
        .collect();
    Tensor::new(axes.iter().map(|&a| x.shape()[a]).collect::<Vec<_>>(), data)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("transpose", format!("rank-2 input required, got {:?}", x.shape())));
    }
    permute(x, &[1, 0])
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("[{}, {}) out of range on axis {} of {:?}", start, start + len, axis, x.shape()),
        ));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    check_axis("concat", first, axis)?;
    for x in xs {
        let compatible = x.rank() == first.rank()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {}", x.shape(), first.shape(), axis),
            ));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Copies rows of a matrix; indices may repeat.
pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 || indices.is_empty() {
        return Err(Error::shape(
            "gather_rows",
            format!("rank-2 input and nonempty index list required, got {:?}", x.shape()),
        ));
    }
    x.select_rows(indices)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let l = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation used by layer norm.
pub(crate) fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let l = row.len() as f64;
    let mean = row.iter().sum::<f64>() / l;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let l = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [l] || beta.shape() != [l] {
        return Err(Error::shape(
            "layer_norm",
            format!("input {:?}, scale {:?}, shift {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        let (mean, inv) = layer_norm_stats(row);
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Squared Euclidean distances between the rows of `a` (`n × d`) and `b` (`m × d`).
pub fn cross_sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(
            "cross_sqdist",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            out.push(sq_dist(ai, b.row(j)));
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let y = layer_norm(
            &t(&[3], &[1.0, 1.0, 1.0]),
            &t(&[3], &[1.0; 3]),
            &t(&[3], &[0.0; 3]),
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let c = matmul(
            &Tensor::ones(vec![2, 3]).unwrap(),
            &Tensor::ones(vec![3, 2]).unwrap(),
            false,
            false,
        )
        .unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_transpose_flags_match_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        let direct = matmul(&a, &b, false, true).unwrap();
        let explicit = matmul(&a, &transpose(&b).unwrap(), false, false).unwrap();
        assert_eq!(direct, explicit);
        let left = matmul(&a, &b, true, false).unwrap();
        let left_explicit = matmul(&transpose(&a).unwrap(), &b, false, false).unwrap();
        assert_eq!(left, left_explicit);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let err = matmul(
            &Tensor::ones(vec![2, 3]).unwrap(),
            &Tensor::ones(vec![2, 2]).unwrap(),
            false,
            false,
        )
        .unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn ln_and_sqrt_reject_nonpositive() {
        assert!(matches!(ln(&t(&[2], &[1.0, 0.0])), Err(Error::Domain { .. })));
        assert!(matches!(sqrt(&t(&[1], &[-1.0])), Err(Error::Domain { .. })));
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn slice_then_concat_restores() {
        let x = t(&[2, 5], &(0..10).map(f64::from).collect::<Vec<_>>());
        let a = slice(&x, 1, 0, 2).unwrap();
        let b = slice(&x, 1, 2, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
    }

    #[test]
    fn sum_axis_middle() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let s = sum_axis(&x, 1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 6.0, 12.0, 14.0]);
    }
}
