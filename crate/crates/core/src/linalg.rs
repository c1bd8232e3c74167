use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition number from singular values; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a square system after checking its conditioning.
pub(crate) fn solve_checked(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    context: &str,
) -> Result<(DVector<f64>, f64)> {
    if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let condition = condition_number(m);
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned {
            condition,
            context: context.to_string(),
        });
    }
    let x = m.clone().lu().solve(b).ok_or_else(|| Error::IllConditioned {
        condition,
        context: context.to_string(),
    })?;
    Ok((x, condition))
}

/// Inverse of a square matrix after the same conditioning check.
pub(crate) fn inverse_checked(m: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let condition = condition_number(m);
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned {
            condition,
            context: context.to_string(),
        });
    }
    let inv = m.clone().try_inverse().ok_or_else(|| Error::IllConditioned {
        condition,
        context: context.to_string(),
    })?;
    Ok((inv, condition))
}
