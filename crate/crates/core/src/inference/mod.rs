//! Sandwich variance for stacked estimating equations, Wald intervals and
//! the nonparametric bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gest::{estimate_regime, EstimationConfig, RegimeFit, StackedEquations};
use crate::linalg::inverse_checked;
use crate::model::Dataset;
use crate::par::map_indexed;
use crate::rng::stream;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Central-difference Jacobian; column k uses h = step·max(1, |θ_k|).
pub fn numerical_jacobian<F>(f: F, theta: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let base = f(theta)?;
    let mut jac = DMatrix::zeros(base.len(), theta.len());
    let mut point = theta.clone();
    for k in 0..theta.len() {
        // Round the step so that θ ± h are exact and the divisor is exact.
        let h = (theta[k] + step * theta[k].abs().max(1.0)) - theta[k];
        point[k] = theta[k] + h;
        let up = f(&point)?;
        point[k] = theta[k] - h;
        let down = f(&point)?;
        point[k] = theta[k];
        if up.len() != base.len() || down.len() != base.len() {
            return Err(Error::Dimension("function output length changed".into()));
        }
        let col = (up - down) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Jacobian column {k}")));
        }
        jac.set_column(k, &col);
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichResult {
    pub sigma_theta: DMatrix<f64>,
    pub sigma_psi: DMatrix<f64>,
    pub psi_indices: Vec<usize>,
    pub bread_condition: f64,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Mean Jacobian of the stacked scores at θ̂ together with its inverse.
fn bread_parts<F>(scores: &F, theta_hat: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let jac = numerical_jacobian(|t| scores(t).map(|s| column_means(&s)), theta_hat, DEFAULT_STEP)?;
    let (inv, condition) = inverse_checked(&jac, "sandwich bread")?;
    Ok((jac, inv, condition))
}

/// Sandwich covariance of θ̂ from per-individual scores:
/// Σ = A⁻¹ B A⁻ᵀ / n with A the mean Jacobian and B the mean outer product.
pub fn sandwich<F>(scores: F, theta_hat: &DVector<f64>, psi_indices: &[usize]) -> Result<SandwichResult>
where
    F: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let s = scores(theta_hat)?;
    let n = s.nrows();
    if n == 0 {
        return Err(Error::InvalidData("no observations".into()));
    }
    if s.ncols() != theta_hat.len() {
        return Err(Error::Dimension(format!(
            "{} score columns for {} parameters",
            s.ncols(),
            theta_hat.len()
        )));
    }
    let (_, inv, bread_condition) = bread_parts(&scores, theta_hat)?;
    let meat = s.tr_mul(&s) / n as f64;
    let sigma_theta = symmetrize(&(&inv * meat * inv.transpose() / n as f64));
    Ok(SandwichResult {
        sigma_psi: sigma_theta.select_rows(psi_indices).select_columns(psi_indices),
        sigma_theta,
        psi_indices: psi_indices.to_vec(),
        bread_condition,
    })
}

/// Adherence directions whose information is below this fraction of the
/// largest eigenvalue of their block are held fixed in the sandwich.
pub const ADHERENCE_INFORMATION_TOL: f64 = 1e-7;

/// Orthonormal basis of the adherence directions that carry information.
///
/// A quasi-separated validation sample drives some fitted probabilities to 0
/// or 1; the coefficient direction responsible has no information and no
/// influence on any other score, so it is held at its boundary estimate.
fn informative_basis(jacobian: &DMatrix<f64>, range: &std::ops::Range<usize>) -> DMatrix<f64> {
    let block = jacobian.view((range.start, range.start), (range.len(), range.len()));
    let info = -(block + block.transpose()) * 0.5;
    let eig = info.symmetric_eigen();
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > ADHERENCE_INFORMATION_TOL * largest)
        .collect();
    eig.eigenvectors.select_columns(&keep)
}

/// Sandwich covariance for a fitted regime, Ψ ordered stage 1 first.
///
/// With external adherence coefficients and their covariance V, adds the
/// delta-method term (A⁻¹ B_α) V (A⁻¹ B_α)ᵀ, B_α the mean Jacobian of the
/// scores in those coefficients.
pub fn regime_sandwich(data: &Dataset, fit: &RegimeFit) -> Result<SandwichResult> {
    let eq = StackedEquations::new(data, fit)?;
    let theta = eq.theta_hat().clone();
    let dim = theta.len();
    let psi_indices = eq.psi_indices();
    let mean_scores = |t: &DVector<f64>| eq.scores(t).map(|s| column_means(&s));

    // Θ = Θ̂ + T φ, with T the identity outside the adherence blocks.
    let mut keep_cols: Vec<DMatrix<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut ranges = eq.adherence_ranges();
    ranges.sort_by_key(|r| r.start);
    if !ranges.is_empty() {
        let jac = numerical_jacobian(mean_scores, &theta, DEFAULT_STEP)?;
        for r in &ranges {
            let basis = informative_basis(&jac, r);
            blocks.push((r.clone(), basis.ncols()));
            keep_cols.push(basis);
        }
    }
    let reduced_dim = dim - blocks.iter().map(|(r, k)| r.len() - k).sum::<usize>();
    let mut transform = DMatrix::zeros(dim, reduced_dim);
    let mut reduced_psi = Vec::with_capacity(psi_indices.len());
    let (mut row, mut col) = (0, 0);
    let mut next_block = 0;
    while row < dim {
        if next_block < blocks.len() && blocks[next_block].0.start == row {
            let (r, k) = &blocks[next_block];
            transform
                .view_mut((r.start, col), (r.len(), *k))
                .copy_from(&keep_cols[next_block]);
            row += r.len();
            col += k;
            next_block += 1;
        } else {
            transform[(row, col)] = 1.0;
            if psi_indices.contains(&row) {
                reduced_psi.push((row, col));
            }
            row += 1;
            col += 1;
        }
    }
    // Ψ positions in the reduced parameterisation, in Ψ order.
    let reduced_psi: Vec<usize> = psi_indices
        .iter()
        .map(|p| reduced_psi.iter().find(|(r, _)| r == p).map(|(_, c)| *c).expect("Ψ is never reduced"))
        .collect();

    let reduced_scores = |phi: &DVector<f64>| eq.scores(&(&theta + &transform * phi)).map(|s| s * &transform);
    let phi_hat = DVector::zeros(reduced_dim);
    let reduced = sandwich(reduced_scores, &phi_hat, &reduced_psi)?;
    let mut result = SandwichResult {
        sigma_theta: symmetrize(&(&transform * &reduced.sigma_theta * transform.transpose())),
        sigma_psi: reduced.sigma_psi,
        psi_indices,
        bread_condition: reduced.bread_condition,
    };
    if let Some((alpha, cov)) = eq.external_adherence() {
        let scores = |t: &DVector<f64>| eq.scores(t);
        let (_, inv, _) = bread_parts(&scores, &theta)?;
        let b = numerical_jacobian(
            |a| eq.scores_with_external(&theta, a).map(|s| column_means(&s)),
            &alpha,
            DEFAULT_STEP,
        )?;
        let g = &inv * b;
        result.sigma_theta = symmetrize(&(&result.sigma_theta + &g * cov * g.transpose()));
        result.sigma_psi = result
            .sigma_theta
            .select_rows(&result.psi_indices)
            .select_columns(&result.psi_indices);
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    WaldSandwich,
    BootstrapPercentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub estimate: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub intervals: Vec<Interval>,
    pub level: f64,
    pub method: IntervalMethod,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("confidence level {level} is not in (0, 1)")))
    }
}

/// Two-sided normal quantile for `level`, e.g. 1.959964 for 0.95.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// ψ̂_k ± z·√Σ_kk.
pub fn wald_intervals(psi_hat: &[f64], sigma_psi: &DMatrix<f64>, level: f64) -> Result<IntervalSet> {
    check_level(level)?;
    if sigma_psi.shape() != (psi_hat.len(), psi_hat.len()) {
        return Err(Error::Dimension(format!(
            "{} estimates with a {}x{} covariance",
            psi_hat.len(),
            sigma_psi.nrows(),
            sigma_psi.ncols()
        )));
    }
    let z = normal_quantile(level);
    let intervals = psi_hat
        .iter()
        .enumerate()
        .map(|(k, &est)| {
            let var = sigma_psi[(k, k)];
            if var < 0.0 || !var.is_finite() {
                return Err(Error::NonFinite(format!("variance {var} for parameter {k}")));
            }
            let half = z * var.sqrt();
            Ok(Interval {
                lower: est - half,
                estimate: est,
                upper: est + half,
            })
        })
        .collect::<Result<_>>()?;
    Ok(IntervalSet {
        intervals,
        level,
        method: IntervalMethod::WaldSandwich,
    })
}

/// Linear-interpolation quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub intervals: IntervalSet,
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub failures: usize,
}

/// Percentile bootstrap over individuals for any estimator of a parameter
/// vector. `estimator` receives the resampled row indices.
pub fn bootstrap_indices<F>(
    n: usize,
    estimate: &[f64],
    replicates: usize,
    level: f64,
    seed: u64,
    jobs: Option<usize>,
    estimator: F,
) -> Result<BootstrapResult>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync + Send,
{
    check_level(level)?;
    if replicates < 2 {
        return Err(Error::InvalidSpec("bootstrap needs at least 2 replicates".into()));
    }
    if n == 0 {
        return Err(Error::InvalidData("no observations to resample".into()));
    }
    let results = map_indexed(replicates, jobs, |b| {
        let mut rng = stream(seed, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        estimator(&idx)
    });
    let ok: Vec<Vec<f64>> = results
        .into_iter()
        .filter_map(|r| r.ok().filter(|v| v.len() == estimate.len() && v.iter().all(|x| x.is_finite())))
        .collect();
    let failures = replicates - ok.len();
    if failures as f64 > MAX_FAILURE_RATE * replicates as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: replicates,
            context: "bootstrap replicates".into(),
        });
    }
    let alpha = (1.0 - level) / 2.0;
    let intervals = (0..estimate.len())
        .map(|k| {
            let mut col: Vec<f64> = ok.iter().map(|r| r[k]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            Interval {
                lower: quantile_sorted(&col, alpha),
                estimate: estimate[k],
                upper: quantile_sorted(&col, 1.0 - alpha),
            }
        })
        .collect();
    Ok(BootstrapResult {
        intervals: IntervalSet {
            intervals,
            level,
            method: IntervalMethod::BootstrapPercentile,
        },
        replicates: ok,
        failures,
    })
}

/// Bootstrap of the whole estimation pipeline, refitting every nuisance
/// model on each resample of individuals.
pub fn bootstrap(
    data: &Dataset,
    config: &EstimationConfig,
    replicates: usize,
    level: f64,
    seed: u64,
    jobs: Option<usize>,
) -> Result<BootstrapResult> {
    let fit = estimate_regime(data, config)?;
    bootstrap_indices(data.len(), &fit.psi(), replicates, level, seed, jobs, |idx| {
        estimate_regime(&data.select(idx), config).map(|f| f.psi())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_logistic, score_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn jacobian_of_linear_and_quadratic_maps() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let theta = DVector::from_vec(vec![0.3, -1.2, 5.0]);
        let j = numerical_jacobian(|t| Ok(&a * t), &theta, DEFAULT_STEP).unwrap();
        assert!((j - &a).amax() < 1e-8);

        let f = |t: &DVector<f64>| Ok(DVector::from_vec(vec![t[0] * t[0], t[0] * t[1]]));
        let j = numerical_jacobian(f, &DVector::from_vec(vec![1.0, 2.0]), DEFAULT_STEP).unwrap();
        let exact = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 2.0, 1.0]);
        assert!((j - exact).amax() < 1e-6);
    }

    #[test]
    fn sample_mean_sandwich_is_variance_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..500).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 3.0 + 2.0 * e }).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let scores = |t: &DVector<f64>| Ok(DMatrix::from_fn(x.len(), 1, |i, _| x[i] - t[0]));
        let res = sandwich(scores, &DVector::from_element(1, mean), &[0]).unwrap();
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let diff = (res.sigma_psi[(0, 0)] - var / n).abs();
        assert!(diff < 1e-10, "{diff:e}");
    }

    #[test]
    fn logistic_sandwich_close_to_inverse_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 5000;
        let design = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(rng.random::<f64>() < crate::glm::expit(-0.4 + 0.8 * design[(i, 1)])))
            .collect();
        let fit = fit_logistic(&design, &y, None).unwrap();
        let scores = |t: &DVector<f64>| {
            let f = crate::glm::GlmFit { coefficients: t.clone(), ..fit.clone() };
            score_rows(&f, &design, &y, None)
        };
        let res = sandwich(scores, &fit.coefficients, &[0, 1]).unwrap();
        let model = fit.covariance(&design, None).unwrap();
        for k in 0..2 {
            let ratio = res.sigma_theta[(k, k)] / model[(k, k)];
            assert!((ratio - 1.0).abs() < 0.15, "{ratio}");
        }
    }

    #[test]
    fn wald_examples() {
        let set = wald_intervals(&[1.0], &DMatrix::from_element(1, 1, 0.25), 0.95).unwrap();
        assert!((set.intervals[0].lower - 0.020018).abs() < 1e-5);
        assert!((set.intervals[0].upper - 1.979982).abs() < 1e-5);
        let set = wald_intervals(&[2.0], &DMatrix::zeros(1, 1), 0.9).unwrap();
        assert_eq!(set.intervals[0].width(), 0.0);
        assert!(wald_intervals(&[2.0], &DMatrix::from_element(1, 1, -1.0), 0.9).is_err());
        assert!(wald_intervals(&[2.0], &DMatrix::zeros(1, 1), 1.0).is_err());
    }

    #[test]
    fn bootstrap_identical_rows_gives_zero_width() {
        let values = vec![3.0; 25];
        let est = |idx: &[usize]| Ok(vec![idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64]);
        let res = bootstrap_indices(25, &[3.0], 50, 0.95, 1, Some(1), est).unwrap();
        assert_eq!(res.intervals.intervals[0].width(), 0.0);
    }

    #[test]
    fn bootstrap_is_deterministic_and_job_independent() {
        let values: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let est = |idx: &[usize]| Ok(vec![idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64]);
        let a = bootstrap_indices(40, &[0.0], 200, 0.9, 5, Some(1), est).unwrap();
        let b = bootstrap_indices(40, &[0.0], 200, 0.9, 5, Some(4), est).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_failure_threshold() {
        let est = |idx: &[usize]| {
            if idx[0] % 4 == 0 {
                Err(Error::NonFinite("x".into()))
            } else {
                Ok(vec![1.0])
            }
        };
        let err = bootstrap_indices(8, &[1.0], 100, 0.95, 3, None, est).unwrap_err();
        assert!(matches!(err, Error::TooManyFailures { .. }));
    }
}
