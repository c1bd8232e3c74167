//! Monte Carlo replication engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gest::estimate_regime;
use crate::inference::{regime_sandwich, wald_intervals};
use crate::model::{Dataset, ProxyKind};
use crate::par::map_indexed;
use crate::rng::stream;

use super::models::{add_model_covariates, estimator_config, stage_two_lag_coefficient, Estimator};
use super::scenarios::{generate_s1, generate_s3, generate_s4, TreatmentFreeIndicator};

/// Largest tolerated share of failed replicates for any one estimator.
pub const MAX_FAILURE_RATE: f64 = 0.05;
pub const COVERAGE_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Prescribed proxy, varied ψ22.
    S1,
    /// As `S1` with ψ22 = 0, used to vary the validation fraction.
    S2,
    /// Coverage scenario.
    S3,
    /// Reported proxy, varied stage-2 A_1 coefficient.
    S4,
}

impl Scenario {
    pub fn proxy_kind(self) -> ProxyKind {
        match self {
            Scenario::S4 => ProxyKind::Reported,
            _ => ProxyKind::Prescribed,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
            Scenario::S4 => "s4",
        }
    }

    /// Contrast parameters the data are generated with, stage 1 first.
    pub fn truth(self, varied: f64) -> Vec<f64> {
        match self {
            Scenario::S1 | Scenario::S2 => vec![1.0, 1.0, 1.0, 1.0, varied],
            Scenario::S3 => vec![1.0, 1.0, 1.0, 1.0, -1.0],
            Scenario::S4 => vec![1.0, 1.0, 1.0, varied],
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" => Ok(Scenario::S1),
            "s2" => Ok(Scenario::S2),
            "s3" => Ok(Scenario::S3),
            "s4" => Ok(Scenario::S4),
            other => Err(Error::InvalidSpec(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub validation_fraction: f64,
    /// ψ22 for s1 and the stage-2 A_1 coefficient for s4; s2 requires 0 and
    /// s3 ignores it.
    pub varied_param: f64,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    /// Record Wald-sandwich coverage of the truth.
    #[serde(default)]
    pub coverage: bool,
    #[serde(default)]
    pub exact_pseudo_outcomes: bool,
    #[serde(default)]
    pub s3_treatment_free_indicator: TreatmentFreeIndicator,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, validation_fraction: f64, varied_param: f64, replications: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            validation_fraction,
            varied_param,
            replications,
            seed,
            estimators: Estimator::ALL.to_vec(),
            coverage: false,
            exact_pseudo_outcomes: false,
            s3_treatment_free_indicator: TreatmentFreeIndicator::default(),
        }
    }

    pub fn with_estimators(mut self, estimators: &[Estimator]) -> Self {
        self.estimators = estimators.to_vec();
        self
    }

    pub fn with_coverage(mut self, coverage: bool) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidSpec(format!("sample size {} is too small", self.n)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidSpec("at least one replication is required".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "validation fraction {} is not in (0, 1]",
                self.validation_fraction
            )));
        }
        if !self.varied_param.is_finite() {
            return Err(Error::InvalidSpec("varied parameter must be finite".into()));
        }
        if self.scenario == Scenario::S2 && self.varied_param != 0.0 {
            return Err(Error::InvalidSpec("scenario s2 fixes the varied parameter at 0".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidSpec("no estimators requested".into()));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::InvalidSpec("estimator listed twice".into()));
        }
        Ok(())
    }

    /// Generated data for one replicate, before model covariates are added.
    pub fn generate(&self, replicate: usize) -> Dataset {
        let mut rng = stream(self.seed, replicate as u64);
        let (n, p) = (self.n, self.validation_fraction);
        match self.scenario {
            Scenario::S1 => generate_s1(n, self.varied_param, p, &mut rng),
            Scenario::S2 => generate_s1(n, 0.0, p, &mut rng),
            Scenario::S3 => generate_s3(n, p, self.s3_treatment_free_indicator, &mut rng),
            Scenario::S4 => generate_s4(n, self.varied_param, p, &mut rng),
        }
    }

    pub fn truth(&self) -> Vec<f64> {
        self.scenario.truth(self.varied_param)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub stage: usize,
    pub term: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Divisor R, so that mse = bias² + variance.
    pub variance: f64,
    pub mse: f64,
    pub mse_x100: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub parameters: Vec<ParameterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub replicate: usize,
    pub estimator: Estimator,
    pub stage: usize,
    pub parameter: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub config: ScenarioConfig,
    pub estimators: Vec<EstimatorSummary>,
    /// Per-replicate estimates in replicate, estimator, parameter order.
    #[serde(skip)]
    pub raw: Vec<RawEstimate>,
}

impl ReplicationSummary {
    pub fn estimator(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == estimator)
    }
}

struct ReplicateFit {
    psi: Vec<f64>,
    labels: Vec<(usize, String)>,
    covered: Option<Vec<bool>>,
}

fn run_replicate(config: &ScenarioConfig, replicate: usize, truth: &[f64]) -> Vec<Result<ReplicateFit>> {
    let lag = stage_two_lag_coefficient(config.scenario, config.varied_param);
    let data = match add_model_covariates(&config.generate(replicate), lag) {
        Ok(d) => d,
        Err(e) => return config.estimators.iter().map(|_| Err(e.clone())).collect(),
    };
    config
        .estimators
        .iter()
        .map(|&estimator| {
            let est = estimator_config(
                config.scenario,
                estimator,
                config.varied_param,
                config.s3_treatment_free_indicator,
                config.exact_pseudo_outcomes,
            );
            let fit = estimate_regime(&data, &est)?;
            let psi = fit.psi();
            let covered = if config.coverage {
                let sandwich = regime_sandwich(&data, &fit)?;
                let set = wald_intervals(&psi, &sandwich.sigma_psi, COVERAGE_LEVEL)?;
                Some(set.intervals.iter().zip(truth).map(|(iv, &t)| iv.contains(t)).collect())
            } else {
                None
            };
            Ok(ReplicateFit {
                labels: fit.psi_labels(),
                psi,
                covered,
            })
        })
        .collect()
}

/// Runs all replicates on the global thread pool.
pub fn run_replications(config: &ScenarioConfig) -> Result<ReplicationSummary> {
    run_replications_with_jobs(config, None)
}

/// Runs all replicates with at most `jobs` threads. Results do not depend
/// on `jobs`.
pub fn run_replications_with_jobs(config: &ScenarioConfig, jobs: Option<usize>) -> Result<ReplicationSummary> {
    match run_replications_lenient(config, jobs)? {
        (summary, None) => Ok(summary),
        (_, Some(breach)) => Err(breach),
    }
}

/// As [`run_replications_with_jobs`], but a breach of the failure threshold
/// is returned next to the summary instead of replacing it. Estimators
/// with no successful replicate have no parameter summaries.
pub fn run_replications_lenient(
    config: &ScenarioConfig,
    jobs: Option<usize>,
) -> Result<(ReplicationSummary, Option<Error>)> {
    config.validate()?;
    let truth = config.truth();
    let per_replicate = map_indexed(config.replications, jobs, |r| run_replicate(config, r, &truth));

    let mut raw = Vec::new();
    let mut breach = None;
    let mut summaries = Vec::with_capacity(config.estimators.len());
    for (e, &estimator) in config.estimators.iter().enumerate() {
        let fits: Vec<(usize, &ReplicateFit)> = per_replicate
            .iter()
            .enumerate()
            .filter_map(|(r, fits)| fits[e].as_ref().ok().map(|f| (r, f)))
            .collect();
        let failures = config.replications - fits.len();
        if (failures as f64 > MAX_FAILURE_RATE * config.replications as f64 || fits.is_empty()) && breach.is_none() {
            let first = per_replicate.iter().find_map(|fits| fits[e].as_ref().err());
            breach = Some(Error::TooManyFailures {
                failed: failures,
                total: config.replications,
                context: match first {
                    Some(err) => format!("{estimator} replicates (first error: {err})"),
                    None => format!("{estimator} replicates"),
                },
            });
        }
        let parameters = fits
            .first()
            .map_or(&[][..], |(_, f)| &f.labels[..])
            .iter()
            .enumerate()
            .map(|(k, (stage, term))| {
                let values: Vec<f64> = fits.iter().map(|(_, f)| f.psi[k]).collect();
                let coverage = config.coverage.then(|| {
                    let hits = fits
                        .iter()
                        .filter(|(_, f)| f.covered.as_ref().is_some_and(|c| c[k]))
                        .count();
                    hits as f64 / fits.len() as f64
                });
                summarize(*stage, term, truth[k], &values, coverage)
            })
            .collect();
        for (r, fit) in &fits {
            raw.extend(fit.labels.iter().zip(&fit.psi).map(|((stage, term), &value)| RawEstimate {
                replicate: *r,
                estimator,
                stage: *stage,
                parameter: term.clone(),
                value,
            }));
        }
        summaries.push(EstimatorSummary {
            estimator,
            successes: fits.len(),
            failures,
            parameters,
        });
    }
    raw.sort_by_key(|r| (r.replicate, config.estimators.iter().position(|&e| e == r.estimator)));
    let summary = ReplicationSummary {
        config: config.clone(),
        estimators: summaries,
        raw,
    };
    Ok((summary, breach))
}

fn summarize(stage: usize, term: &str, truth: f64, values: &[f64], coverage: Option<f64>) -> ParameterSummary {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
    let bias = mean - truth;
    let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / r;
    let sample_var = if values.len() > 1 { variance * r / (r - 1.0) } else { 0.0 };
    ParameterSummary {
        stage,
        term: term.to_string(),
        truth,
        mean,
        bias,
        variance,
        mse,
        mse_x100: 100.0 * mse,
        mc_se: (sample_var / r).sqrt(),
        coverage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_decomposition_and_identical_reruns() {
        let config = ScenarioConfig::new(Scenario::S1, 300, 0.3, 1.0, 6, 11);
        let a = run_replications_with_jobs(&config, Some(1)).unwrap();
        let b = run_replications_with_jobs(&config, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw, b.raw);
        for est in &a.estimators {
            assert_eq!(est.successes + est.failures, 6);
            for p in &est.parameters {
                assert!((p.mse - (p.bias * p.bias + p.variance)).abs() < 1e-12);
            }
        }
        assert_eq!(a.raw.len(), 6 * 4 * 5);
    }

    #[test]
    fn summary_statistics_by_hand() {
        let s = summarize(1, "1", 1.0, &[0.5, 1.5, 2.0], Some(1.0));
        assert!((s.mean - 4.0 / 3.0).abs() < 1e-15);
        assert!((s.bias - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.mse - (0.25 + 0.25 + 1.0) / 3.0).abs() < 1e-15);
        assert!((s.mse_x100 - 50.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let ok = ScenarioConfig::new(Scenario::S2, 100, 0.2, 0.0, 1, 1);
        assert!(ok.validate().is_ok());
        assert!(ScenarioConfig { varied_param: 1.0, ..ok.clone() }.validate().is_err());
        assert!(ScenarioConfig { replications: 0, ..ok.clone() }.validate().is_err());
        assert!(ScenarioConfig { validation_fraction: 0.0, ..ok.clone() }.validate().is_err());
        assert!(ScenarioConfig { estimators: vec![], ..ok.clone() }.validate().is_err());
        assert!("s9".parse::<Scenario>().unwrap_err().to_string().contains("unknown scenario"));
    }

    #[test]
    fn truth_vectors() {
        assert_eq!(Scenario::S3.truth(5.0), vec![1.0, 1.0, 1.0, 1.0, -1.0]);
        assert_eq!(Scenario::S4.truth(-1.0), vec![1.0, 1.0, 1.0, -1.0]);
    }
}
