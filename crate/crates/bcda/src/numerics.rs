//! Dense linear algebra for the broad critic: regularized least squares,
//! ridge pseudoinverse, and the block update that extends a pseudoinverse
//! when columns are appended to the design matrix.
//!
//! All routines operate on row-major `Array2<f64>` values and return finite
//! results or an error; none of them mutate their inputs.

use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};

/// Block width used by the factorization and triangular solves.
const BLOCK: usize = 48;

/// Relative threshold deciding the residual branch of the column-append
/// update: `C` counts as zero when `||C||_F <= 1e-9 * (1 + ||H||_F)`.
pub fn residual_tolerance(h_new: &ArrayView2<f64>) -> f64 {
    1e-9 * (1.0 + frobenius_norm(h_new))
}

pub fn frobenius_norm(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ensure_finite(m: &Array2<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!(
            "non-finite entries produced by {context}"
        )))
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// The factorization is blocked: diagonal panels are factored column by
/// column and the trailing submatrix is updated with matrix products, so the
/// bulk of the work runs at gemm speed.
pub struct SpdFactor {
    l: Array2<f64>,
}

impl SpdFactor {
    pub fn new(g: Array2<f64>) -> Result<Self> {
        let n = g.nrows();
        if g.ncols() != n {
            return Err(Error::dims("cholesky", format!("{n}x{n}"), format!("{n}x{}", g.ncols())));
        }
        let mut l = g;
        let mut k = 0;
        while k < n {
            let nb = BLOCK.min(n - k);
            // Factor the panel l[k.., k..k+nb] in place.
            for j in k..k + nb {
                let mut diag = l[[j, j]];
                for t in k..j {
                    diag -= l[[j, t]] * l[[j, t]];
                }
                if diag <= 0.0 || !diag.is_finite() {
                    return Err(Error::NumericalFailure(format!(
                        "cholesky pivot {j} is non-positive ({diag:.3e})"
                    )));
                }
                let pivot = diag.sqrt();
                l[[j, j]] = pivot;
                for i in j + 1..n {
                    let mut v = l[[i, j]];
                    for t in k..j {
                        v -= l[[i, t]] * l[[j, t]];
                    }
                    l[[i, j]] = v / pivot;
                }
            }
            // Trailing update: for each later block column c,
            // l[c.., c] -= l[c.., panel] * l[c, panel]^T.
            let mut c = k + nb;
            while c < n {
                let cb = BLOCK.min(n - c);
                let panel_rows = l.slice(s![c..n, k..k + nb]).to_owned();
                let panel_diag = l.slice(s![c..c + cb, k..k + nb]).to_owned();
                let mut target = l.slice_mut(s![c..n, c..c + cb]);
                general_mat_mul(-1.0, &panel_rows, &panel_diag.t(), 1.0, &mut target);
                c += cb;
            }
            k += nb;
        }
        // Zero the strict upper triangle so the factor is usable as-is.
        for i in 0..n {
            for j in i + 1..n {
                l[[i, j]] = 0.0;
            }
        }
        Ok(SpdFactor { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L L^T X = B` for all columns of `B` at once.
    pub fn solve(&self, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(Error::dims("spd solve", n, b.nrows()));
        }
        let mut x = b.to_owned();
        self.forward_sub(&mut x);
        self.backward_sub(&mut x);
        ensure_finite(&x, "spd solve")?;
        Ok(x)
    }

    // Forward substitution, blocked so off-diagonal work is matrix products.
    fn forward_sub(&self, x: &mut Array2<f64>) {
        let n = self.dim();
        let mut k = 0;
        while k < n {
            let nb = BLOCK.min(n - k);
            for j in k..k + nb {
                let pivot = self.l[[j, j]];
                let row = x.row(j).mapv(|v| v / pivot);
                x.row_mut(j).assign(&row);
                for i in j + 1..k + nb {
                    let lij = self.l[[i, j]];
                    if lij != 0.0 {
                        let rj = x.row(j).to_owned();
                        x.row_mut(i).scaled_add(-lij, &rj);
                    }
                }
            }
            if k + nb < n {
                let lower = self.l.slice(s![k + nb..n, k..k + nb]).to_owned();
                let solved = x.slice(s![k..k + nb, ..]).to_owned();
                let mut rest = x.slice_mut(s![k + nb..n, ..]);
                general_mat_mul(-1.0, &lower, &solved, 1.0, &mut rest);
            }
            k += nb;
        }
    }

    // Backward substitution with L^T.
    fn backward_sub(&self, x: &mut Array2<f64>) {
        let n = self.dim();
        let mut k = n;
        while k > 0 {
            let nb = BLOCK.min(k);
            let start = k - nb;
            for j in (start..k).rev() {
                let pivot = self.l[[j, j]];
                let row = x.row(j).mapv(|v| v / pivot);
                x.row_mut(j).assign(&row);
                for i in (start..j).rev() {
                    let lji = self.l[[j, i]];
                    if lji != 0.0 {
                        let rj = x.row(j).to_owned();
                        x.row_mut(i).scaled_add(-lji, &rj);
                    }
                }
            }
            if start > 0 {
                let lower = self.l.slice(s![start..k, 0..start]).to_owned();
                let solved = x.slice(s![start..k, ..]).to_owned();
                let mut rest = x.slice_mut(s![0..start, ..]);
                general_mat_mul(-1.0, &lower.t(), &solved, 1.0, &mut rest);
            }
            k = start;
        }
    }
}

/// Regularized Gram matrix `A^T A + lambda I`, factored.
pub fn gram_factor(a: &ArrayView2<f64>, lambda: f64) -> Result<SpdFactor> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "ridge regularization must be positive, got {lambda}"
        )));
    }
    let p = a.ncols();
    let mut g = a.t().dot(a);
    for i in 0..p {
        g[[i, i]] += lambda;
    }
    SpdFactor::new(g)
}

/// Ridge regression solve: the unique minimizer of
/// `||A W - Y||_F^2 + lambda ||W||_F^2`, computed from the regularized
/// normal equations `(A^T A + lambda I) W = A^T Y`.
pub fn ridge_solve(a: &ArrayView2<f64>, y: &ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if a.nrows() != y.nrows() {
        return Err(Error::dims("ridge_solve rows", a.nrows(), y.nrows()));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::dims("ridge_solve shape", "N>=1, p>=1", format!("{}x{}", a.nrows(), a.ncols())));
    }
    let factor = gram_factor(a, lambda)?;
    let rhs = a.t().dot(y);
    factor.solve(&rhs.view())
}

/// Ridge pseudoinverse `(A^T A + lambda I)^{-1} A^T`. Converges to the
/// Moore-Penrose pseudoinverse as `lambda -> 0`.
pub fn pinv_ridge(a: &ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let factor = gram_factor(a, lambda)?;
    pinv_from_factor(&factor, a)
}

/// Materializes the ridge pseudoinverse from an existing Gram factorization,
/// avoiding a second factorization when the factor is already at hand.
pub fn pinv_from_factor(factor: &SpdFactor, a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if factor.dim() != a.ncols() {
        return Err(Error::dims("pinv_from_factor", factor.dim(), a.ncols()));
    }
    let at = a.t().to_owned();
    factor.solve(&at.view())
}

/// Which branch of the residual test the column-append update took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendBranch {
    /// New columns carry signal outside the span of the old ones.
    ResidualNonZero,
    /// New columns are (numerically) linear combinations of the old ones.
    ResidualZero,
}

/// Result of extending a pseudoinverse by appended columns.
pub struct ColumnAppend {
    /// Pseudoinverse of `[A | H_new]`, shape `(p+q) x N`.
    pub a_pinv_new: Array2<f64>,
    /// `D = A^+ H_new`, shape `p x q`.
    pub d: Array2<f64>,
    /// `B^T`, shape `q x N`.
    pub b_t: Array2<f64>,
    pub branch: AppendBranch,
}

/// Extends the ridge pseudoinverse of `A` to that of `[A | H_new]` without
/// refactoring the augmented matrix.
///
/// With `D = A^+ H_new` and `C = H_new - A D`, the new bottom block is
/// `B^T = C^+` when the residual is non-zero, otherwise
/// `B^T = (I + D^T D)^{-1} D^T A^+`; the new pseudoinverse is the stack
/// `[A^+ - D B^T ; B^T]`.
pub fn pinv_append_columns(
    a: &ArrayView2<f64>,
    a_pinv: &ArrayView2<f64>,
    h_new: &ArrayView2<f64>,
    lambda: f64,
) -> Result<ColumnAppend> {
    let (n, p) = (a.nrows(), a.ncols());
    let q = h_new.ncols();
    if h_new.nrows() != n {
        return Err(Error::dims("pinv_append_columns rows", n, h_new.nrows()));
    }
    if a_pinv.nrows() != p || a_pinv.ncols() != n {
        return Err(Error::dims(
            "pinv_append_columns pinv shape",
            format!("{p}x{n}"),
            format!("{}x{}", a_pinv.nrows(), a_pinv.ncols()),
        ));
    }
    if q == 0 {
        return Err(Error::dims("pinv_append_columns q", ">=1", 0));
    }

    let d = a_pinv.dot(h_new);
    let mut c = h_new.to_owned();
    general_mat_mul(-1.0, a, &d, 1.0, &mut c);

    let (b_t, branch) = if frobenius_norm(&c.view()) > residual_tolerance(h_new) {
        (pinv_ridge(&c.view(), lambda)?, AppendBranch::ResidualNonZero)
    } else {
        // (I + D^T D)^{-1} D^T A^+
        let mut g = d.t().dot(&d);
        for i in 0..q {
            g[[i, i]] += 1.0;
        }
        let factor = SpdFactor::new(g)?;
        let rhs = d.t().dot(a_pinv);
        (factor.solve(&rhs.view())?, AppendBranch::ResidualZero)
    };

    let mut a_pinv_new = Array2::zeros((p + q, n));
    {
        let mut top = a_pinv_new.slice_mut(s![0..p, ..]);
        top.assign(a_pinv);
        general_mat_mul(-1.0, &d, &b_t, 1.0, &mut top);
    }
    a_pinv_new.slice_mut(s![p.., ..]).assign(&b_t);
    ensure_finite(&a_pinv_new, "pinv_append_columns")?;

    Ok(ColumnAppend {
        a_pinv_new,
        d,
        b_t,
        branch,
    })
}
