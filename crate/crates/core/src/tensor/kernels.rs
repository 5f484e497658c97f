use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is stored as `[m, k]` (or `[k, m]` when `ta`), `b` as
/// `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
