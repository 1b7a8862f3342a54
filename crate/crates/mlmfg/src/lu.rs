//! Dense LU solves with an explicit pivot-quality check, so that singular or
//! numerically collapsed systems surface as errors instead of NaN results.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("linear solve failed: {0}")]
pub struct Singular(pub &'static str);

fn check_pivots(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Result<(), Singular> {
    let u = lu.u();
    let n = u.nrows().min(u.ncols());
    let mut max_piv = 0.0f64;
    let mut min_piv = f64::INFINITY;
    for i in 0..n {
        let p = u[(i, i)].abs();
        if !p.is_finite() {
            return Err(Singular("non-finite pivot"));
        }
        max_piv = max_piv.max(p);
        min_piv = min_piv.min(p);
    }
    if max_piv == 0.0 || min_piv <= (n as f64) * f64::EPSILON * max_piv {
        return Err(Singular("pivot failure (matrix numerically singular)"));
    }
    Ok(())
}

pub(crate) fn solve(a: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, Singular> {
    let lu = a.lu();
    check_pivots(&lu)?;
    let sol = lu.solve(rhs).ok_or(Singular("back-substitution failed"))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Singular("non-finite solution"));
    }
    Ok(sol)
}

pub(crate) fn solve_matrix(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, Singular> {
    let lu = a.lu();
    check_pivots(&lu)?;
    let sol = lu.solve(rhs).ok_or(Singular("back-substitution failed"))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Singular("non-finite solution"));
    }
    Ok(sol)
}
