//! Logistic and linear regression for the nuisance models, with
//! per-observation scores so the fits can be stacked with the
//! G-estimating equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;

/// Inverse logit, evaluated without overflow for large |x|.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub family: Family,
}

impl GlmFit {
    /// Fitted means: probabilities for logistic fits, the linear predictor otherwise.
    pub fn predict(&self, design: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_columns(design, self.coefficients.len())?;
        let eta = design * &self.coefficients;
        Ok(match self.family {
            Family::Logistic => eta.map(expit),
            Family::Linear => eta,
        })
    }

    /// Expected information X'WX, unscaled by n.
    pub fn information(
        &self,
        design: &DMatrix<f64>,
        weights: Option<&[f64]>,
    ) -> Result<DMatrix<f64>> {
        let mu = self.predict(design)?;
        let w = resolve_weights(weights, design.nrows())?;
        let var: Vec<f64> = match self.family {
            Family::Logistic => mu.iter().zip(&w).map(|(m, w)| w * m * (1.0 - m)).collect(),
            Family::Linear => w,
        };
        Ok(weighted_gram(design, &var))
    }

    /// Model-based covariance of the coefficients, the inverse information.
    pub fn covariance(&self, design: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let info = self.information(design, weights)?;
        info.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::RankDeficient("information matrix is not positive definite".into()))
    }
}

fn check_columns(design: &DMatrix<f64>, p: usize) -> Result<()> {
    if design.ncols() != p {
        return Err(Error::Dimension(format!(
            "design has {} columns, fit has {p} coefficients",
            design.ncols()
        )));
    }
    Ok(())
}

fn check_shape(design: &DMatrix<f64>, response: &[f64]) -> Result<()> {
    let (n, p) = design.shape();
    if n != response.len() {
        return Err(Error::Dimension(format!(
            "design has {n} rows, response has {}",
            response.len()
        )));
    }
    if p == 0 || n < p {
        return Err(Error::Dimension(format!(
            "need at least as many rows as columns, got {n}x{p}"
        )));
    }
    if design.iter().chain(response).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design or response".into()));
    }
    Ok(())
}

fn resolve_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() != n => Err(Error::Dimension(format!(
            "{} weights for {n} rows",
            w.len()
        ))),
        Some(w) if w.iter().any(|v| !v.is_finite() || *v < 0.0) => {
            Err(Error::InvalidData("weights must be finite and non-negative".into()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

fn weighted_gram(design: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut scaled = design.clone();
    for (mut row, wi) in scaled.row_iter_mut().zip(w) {
        row *= wi.sqrt();
    }
    scaled.tr_mul(&scaled)
}

/// Column rank check on R from a QR decomposition, relative to its largest diagonal.
fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    let r = design.clone().qr().r();
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if let Some(k) = diag.iter().position(|d| *d <= RANK_TOL * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "column {} is (numerically) a combination of earlier columns",
            k + 1
        )));
    }
    Ok(())
}

/// Maximum-likelihood logistic regression by iteratively reweighted least squares.
///
/// Complete separation is reported as non-convergence. Quasi-complete
/// separation converges once the score is negligible, leaving some fitted
/// probabilities numerically at 0 or 1.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<GlmFit> {
    check_shape(design, response)?;
    if response.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::InvalidData("logistic response must be 0 or 1".into()));
    }
    let w = resolve_weights(weights, design.nrows())?;
    check_rank(design)?;

    let p = design.ncols();
    let mut beta = DVector::zeros(p);
    let fail = |iterations: usize, beta: &DVector<f64>, reason: &str| Error::NonConvergence {
        iterations,
        coefficient_norm: beta.norm(),
        reason: reason.into(),
    };

    for iter in 1..=MAX_ITERATIONS {
        let mu = (design * &beta).map(expit);
        let resid: DVector<f64> =
            DVector::from_iterator(mu.len(), response.iter().zip(mu.iter()).zip(&w).map(|((y, m), w)| w * (y - m)));
        let score = design.tr_mul(&resid);
        let var: Vec<f64> = mu.iter().zip(&w).map(|(m, w)| w * m * (1.0 - m)).collect();
        let info = weighted_gram(design, &var);
        let step = info
            .cholesky()
            .map(|c| c.solve(&score))
            .ok_or_else(|| fail(iter, &beta, "information matrix became singular (separation)"))?;
        beta += &step;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(fail(iter, &beta, "coefficients diverged"));
        }

        let mu = (design * &beta).map(expit);
        let max_resid = response
            .iter()
            .zip(mu.iter())
            .zip(&w)
            .filter(|(_, w)| **w > 0.0)
            .map(|((y, m), _)| (y - m).abs())
            .fold(0.0, f64::max);
        if max_resid < 1e-6 {
            return Err(fail(iter, &beta, "complete separation: every response is fitted exactly"));
        }
        let resid = DVector::from_iterator(
            mu.len(),
            response.iter().zip(mu.iter()).zip(&w).map(|((y, m), w)| w * (y - m)),
        );
        let score_norm = design.tr_mul(&resid).amax();
        if score_norm < SCORE_TOL || step.amax() < STEP_TOL {
            return Ok(GlmFit {
                coefficients: beta,
                converged: true,
                iterations: iter,
                family: Family::Logistic,
            });
        }
    }
    Err(fail(MAX_ITERATIONS, &beta, "iteration cap reached"))
}

/// Ordinary least squares through a QR decomposition.
pub fn fit_linear(design: &DMatrix<f64>, response: &[f64]) -> Result<GlmFit> {
    check_shape(design, response)?;
    check_rank(design)?;
    let qr = design.clone().qr();
    let qty = qr.q().tr_mul(&DVector::from_column_slice(response));
    let coefficients = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    Ok(GlmFit {
        coefficients,
        converged: true,
        iterations: 1,
        family: Family::Linear,
    })
}

/// Per-observation score contributions, row i = x_i (y_i - mu_i) w_i.
pub fn score_rows(
    fit: &GlmFit,
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    if design.nrows() != response.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, response has {}",
            design.nrows(),
            response.len()
        )));
    }
    let w = resolve_weights(weights, design.nrows())?;
    let mu = fit.predict(design)?;
    let mut out = design.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= (response[i] - mu[i]) * w[i];
    }
    Ok(out)
}
