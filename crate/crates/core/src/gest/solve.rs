//! The per-stage G-estimating equations. Contrasts are linear in ψ and the
//! treatment-free model is linear in β, so each stage is a square linear
//! system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, solve_checked, MAX_CONDITION};

/// `Σ_i a_i b_i x_i y_i'` for row-wise designs.
fn weighted_cross(x: &DMatrix<f64>, weights: &DVector<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = y.clone();
    for (mut row, w) in scaled.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    x.tr_mul(&scaled)
}

fn check_rows(n: usize, parts: &[(&str, usize)]) -> Result<()> {
    for (name, len) in parts {
        if *len != n {
            return Err(Error::Dimension(format!("{name} has {len} rows, expected {n}")));
        }
    }
    Ok(())
}

/// Solves Σ λ_i w_i (target_i - π_i λ_i'ψ) = 0 for ψ, with `target` the
/// pseudo outcome already shifted by the treatment-free term.
pub fn solve_psi(
    lambda: &DMatrix<f64>,
    residual_indicator: &DVector<f64>,
    expected: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = lambda.nrows();
    check_rows(
        n,
        &[
            ("indicator residual", residual_indicator.len()),
            ("expected treatment", expected.len()),
            ("target", target.len()),
        ],
    )?;
    let m = weighted_cross(lambda, &residual_indicator.component_mul(expected), lambda);
    let b = lambda.tr_mul(&residual_indicator.component_mul(target));
    solve_checked(&m, &b, "contrast estimating equation").map(|(psi, _)| psi)
}

/// Everything one stage's estimating equations need, as n-row arrays.
#[derive(Debug, Clone, Copy)]
pub struct StageSystem<'a> {
    /// λ rows, which are the contrast design rows.
    pub contrast: &'a DMatrix<f64>,
    pub treatment_free: &'a DMatrix<f64>,
    /// The indicator whose assignment was modelled (A, or the proxy).
    pub indicator: &'a DVector<f64>,
    /// Fitted Pr(indicator = 1 | history).
    pub propensity: &'a DVector<f64>,
    /// Treatment multiplying the contrast: A itself, or its adherence probability.
    pub expected: &'a DVector<f64>,
    /// Pseudo outcome from the following stage.
    pub response: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSolution {
    pub psi: DVector<f64>,
    pub beta: DVector<f64>,
    /// Condition number of Σ λ w π λ'.
    pub contrast_condition: f64,
    /// Condition number of the joint (ψ, β) system.
    pub system_condition: f64,
}

/// Solves the G-estimating equation jointly with the least-squares
/// equations of the treatment-free model:
///
/// Σ λ (z - p) (Ṽ - π λ'ψ - D β) = 0 and Σ D (Ṽ - π λ'ψ - D β) = 0.
pub fn solve_stage(sys: &StageSystem<'_>) -> Result<StageSolution> {
    let n = sys.contrast.nrows();
    check_rows(
        n,
        &[
            ("treatment-free design", sys.treatment_free.nrows()),
            ("indicator", sys.indicator.len()),
            ("propensity", sys.propensity.len()),
            ("expected treatment", sys.expected.len()),
            ("response", sys.response.len()),
        ],
    )?;
    let (p, q) = (sys.contrast.ncols(), sys.treatment_free.ncols());
    let w = sys.indicator - sys.propensity;
    let wpi = w.component_mul(sys.expected);

    let m = weighted_cross(sys.contrast, &wpi, sys.contrast);
    let contrast_condition = condition_number(&m);
    if contrast_condition > MAX_CONDITION {
        return Err(Error::IllConditioned {
            condition: contrast_condition,
            context: "contrast estimating equation".into(),
        });
    }

    let mut a = DMatrix::zeros(p + q, p + q);
    a.view_mut((0, 0), (p, p)).copy_from(&m);
    a.view_mut((0, p), (p, q))
        .copy_from(&weighted_cross(sys.contrast, &w, sys.treatment_free));
    a.view_mut((p, 0), (q, p))
        .copy_from(&weighted_cross(sys.treatment_free, sys.expected, sys.contrast));
    a.view_mut((p, p), (q, q))
        .copy_from(&sys.treatment_free.tr_mul(sys.treatment_free));
    let mut b = DVector::zeros(p + q);
    b.rows_mut(0, p)
        .copy_from(&sys.contrast.tr_mul(&w.component_mul(sys.response)));
    b.rows_mut(p, q)
        .copy_from(&sys.treatment_free.tr_mul(sys.response));

    let (x, system_condition) = solve_checked(&a, &b, "joint contrast and treatment-free system")?;
    Ok(StageSolution {
        psi: x.rows(0, p).into_owned(),
        beta: x.rows(p, q).into_owned(),
        contrast_condition,
        system_condition,
    })
}
