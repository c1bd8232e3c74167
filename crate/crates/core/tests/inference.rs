use dtr_core::gest::*;
use dtr_core::inference::*;
use dtr_core::rng::stream;
use dtr_core::simulation::*;
use nalgebra::{DMatrix, DVector};

fn s1(n: usize, seed: u64) -> dtr_core::model::Dataset {
    add_model_covariates(&generate_s1(n, 1.0, 0.3, &mut stream(seed, 0)), 1.0).unwrap()
}

fn fitted_config() -> EstimationConfig {
    estimator_config(Scenario::S1, Estimator::ModifiedFitted, 1.0, TreatmentFreeIndicator::Actual, false)
}

/// Plain working models, usable on small samples.
fn simple_config() -> EstimationConfig {
    let stages = vec![
        StageModelSpec::parse(1, "1 + X[1]", "1 + X[1]", "1 + X[1]", Some("1 + X[1] + Astar[1]")).unwrap(),
        StageModelSpec::parse(2, "1 + X[2] + A[1]", "1 + X[1] + X[2] + A[1]", "1 + X[2]", Some("1 + X[2] + Astar[2]")).unwrap(),
    ];
    EstimationConfig::new(EstimationMode::ModifiedPrescribed, stages).with_adherence(AdherenceSource::Fitted)
}

fn mean_scores(eq: &StackedEquations<'_>, t: &DVector<f64>) -> dtr_core::Result<DVector<f64>> {
    let s = eq.scores(t)?;
    Ok(DVector::from_iterator(s.ncols(), s.column_iter().map(|c| c.sum() / s.nrows() as f64)))
}

#[test]
fn stacked_jacobian_is_step_consistent() {
    let data = s1(50, 1);
    let config = simple_config();
    let fit = estimate_regime(&data, &config).unwrap();
    let eq = StackedEquations::new(&data, &fit).unwrap();
    let a = numerical_jacobian(|t| mean_scores(&eq, t), eq.theta_hat(), 1e-6).unwrap();
    let b = numerical_jacobian(|t| mean_scores(&eq, t), eq.theta_hat(), 1e-7).unwrap();
    let scale = a.amax();
    assert!((a - b).amax() < 1e-4 * scale);
}

#[test]
fn point_estimates_solve_the_stack() {
    let data = s1(800, 2);
    let fit = estimate_regime(&data, &fitted_config()).unwrap();
    let eq = StackedEquations::new(&data, &fit).unwrap();
    assert!(mean_scores(&eq, eq.theta_hat()).unwrap().amax() < 1e-6);
    assert_eq!(eq.labels().len(), eq.dim());
    let psi: Vec<f64> = eq.psi_indices().iter().map(|&k| eq.theta_hat()[k]).collect();
    assert_eq!(psi, fit.psi());
}

#[test]
fn sandwich_is_symmetric_positive_semidefinite() {
    let data = s1(1000, 3);
    let fit = estimate_regime(&data, &fitted_config()).unwrap();
    let res = regime_sandwich(&data, &fit).unwrap();
    let s = &res.sigma_theta;
    assert!((s - s.transpose()).amax() <= 1e-8 * s.amax());
    let trace = s.trace();
    assert!(s.clone().symmetric_eigen().eigenvalues.iter().all(|&e| e >= -1e-8 * trace));
    let idx = res.psi_indices.clone();
    assert_eq!(res.sigma_psi, s.select_rows(&idx).select_columns(&idx));
    assert_eq!(res.sigma_psi.nrows(), 5);
}

#[test]
fn variance_scales_with_inverse_sample_size() {
    let mean_diag = |n: usize| {
        let mut total = 0.0;
        for seed in 0..8 {
            let data = s1(n, 100 + seed);
            let fit = estimate_regime(&data, &fitted_config()).unwrap();
            total += regime_sandwich(&data, &fit).unwrap().sigma_psi.diagonal().mean();
        }
        total / 8.0
    };
    let ratio = mean_diag(2000) / mean_diag(4000);
    assert!((ratio - 2.0).abs() < 0.4, "{ratio}");
}

#[test]
fn external_covariance_inflates_variance() {
    let data = s1(1500, 4);
    let fitted = estimate_regime(&data, &fitted_config()).unwrap();
    let coefficients: Vec<DVector<f64>> = fitted.stages.iter().map(|s| s.alpha.clone().unwrap()).collect();
    let base = EstimationConfig {
        adherence: None,
        ..fitted_config()
    };
    let with = |covariance: Option<DMatrix<f64>>| {
        let config = base.clone().with_adherence(AdherenceSource::External {
            coefficients: coefficients.clone(),
            covariance,
        });
        let fit = estimate_regime(&data, &config).unwrap();
        assert_eq!(fit.psi(), fitted.psi());
        regime_sandwich(&data, &fit).unwrap().sigma_psi
    };
    let fixed = with(None);
    let zero = with(Some(DMatrix::zeros(6, 6)));
    assert!((&fixed - &zero).amax() < 1e-12);
    let inflated = with(Some(DMatrix::identity(6, 6) * 0.01));
    for k in 0..5 {
        assert!(inflated[(k, k)] > fixed[(k, k)]);
    }
}

#[test]
fn bootstrap_over_the_full_pipeline_is_reproducible() {
    let data = s1(400, 5);
    let config = simple_config();
    let a = bootstrap(&data, &config, 40, 0.9, 77, Some(1)).unwrap();
    let b = bootstrap(&data, &config, 40, 0.9, 77, Some(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.intervals.intervals.len(), 5);
    assert_eq!(a.intervals.method, IntervalMethod::BootstrapPercentile);
    assert!(a.intervals.intervals.iter().all(|iv| iv.lower <= iv.upper));
    assert!(bootstrap(&data, &config, 1, 0.9, 77, None).is_err());
}
