//! Dense kernels behind every block operation: transpose, GEMM, transpose.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

pub(crate) fn permute(a: ArrayViewD<'_, f64>, perm: &[usize]) -> ArrayD<f64> {
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return a.to_owned();
    }
    a.permuted_axes(IxDyn(perm)).as_standard_layout().into_owned()
}

/// Copies `a` into a row-major matrix with `rows` modes first.
pub(crate) fn matricize(a: ArrayViewD<'_, f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    let shape = a.shape();
    let r: usize = rows.iter().map(|&m| shape[m]).product();
    let c: usize = cols.iter().map(|&m| shape[m]).product();
    let perm: Vec<usize> = rows.iter().chain(cols).copied().collect();
    let data = permute(a, &perm).into_raw_vec_and_offset().0;
    Array2::from_shape_vec((r, c), data).expect("matricized size")
}

pub(crate) fn from_matrix(m: Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    let m = if m.is_standard_layout() { m } else { m.as_standard_layout().into_owned() };
    let data = m.into_raw_vec_and_offset().0;
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape size")
}

/// `c += a * b`.
pub(crate) fn gemm_acc(c: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

/// Contracts `a_axes` of `a` against `b_axes` of `b`; the result keeps the
/// free modes of `a` followed by the free modes of `b`.
pub(crate) fn tensordot(
    a: ArrayViewD<'_, f64>,
    b: ArrayViewD<'_, f64>,
    a_axes: &[usize],
    b_axes: &[usize],
) -> ArrayD<f64> {
    let a_free: Vec<usize> = (0..a.ndim()).filter(|m| !a_axes.contains(m)).collect();
    let b_free: Vec<usize> = (0..b.ndim()).filter(|m| !b_axes.contains(m)).collect();
    let mut out_shape: Vec<usize> = a_free.iter().map(|&m| a.shape()[m]).collect();
    out_shape.extend(b_free.iter().map(|&m| b.shape()[m]));
    let am = matricize(a.view(), &a_free, a_axes);
    let bm = matricize(b.view(), b_axes, &b_free);
    let mut c = Array2::zeros((am.nrows(), bm.ncols()));
    gemm_acc(&mut c, &am, &bm);
    from_matrix(c, &out_shape)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
