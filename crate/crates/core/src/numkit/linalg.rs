//! Dense linear-algebra helpers for the linear probe.

use super::tensor::{matmul, transpose, Tensor};

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower-triangular factor `L` with `L L^T = a`.
///
/// Panics if `a` is not square or not positive definite.
pub fn cholesky(a: &Tensor) -> Tensor {
    let n = a.rows();
    assert_eq!(a.cols(), n, "cholesky needs a square matrix");
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite (pivot {s} at {i})");
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    l
}

/// Solve `a x = b` for SPD `a` via Cholesky; `b` may have multiple columns.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    assert_eq!(b.rows(), n, "dimension mismatch in solve_spd");
    let l = cholesky(a);
    let m = b.cols();
    let mut x = b.clone();
    // Forward substitution: L y = b.
    for col in 0..m {
        for i in 0..n {
            let mut s = x.at(i, col);
            for k in 0..i {
                s -= l.at(i, k) * x.at(k, col);
            }
            x.set(i, col, s / l.at(i, i));
        }
    }
    // Back substitution: L^T x = y.
    for col in 0..m {
        for i in (0..n).rev() {
            let mut s = x.at(i, col);
            for k in i + 1..n {
                s -= l.at(k, i) * x.at(k, col);
            }
            x.set(i, col, s / l.at(i, i));
        }
    }
    x
}

/// Ridge regression: minimize `||X w - Y||^2 + alpha ||w||^2` column-wise.
/// `x` is `[n, d]`, `y` is `[n, c]`; returns `w` of shape `[d, c]`.
pub fn ridge_fit(x: &Tensor, y: &Tensor, alpha: f64) -> Tensor {
    assert!(alpha > 0.0, "ridge penalty must be positive");
    assert_eq!(x.rows(), y.rows(), "sample count mismatch");
    let xt = transpose(x);
    let mut gram = matmul(&xt, x);
    let d = gram.rows();
    for i in 0..d {
        let v = gram.at(i, i);
        gram.set(i, i, v + alpha);
    }
    let rhs = matmul(&xt, y);
    solve_spd(&gram, &rhs)
}
