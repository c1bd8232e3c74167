//! Estimation settings used by the replication engine for each scenario.
//!
//! Treatment-free models are correctly specified so every estimator is
//! judged on its handling of the treatment indicator alone. Under the regret
//! form they need positive parts of the contrasts, which are added to the
//! generated data as extra covariates:
//!
//! | name | stage | value |
//! |------|-------|-------|
//! | `P`  | 1 | max(1 + X_1, 0) |
//! | `I`  | 1 | I(1 + X_1 > 0) |
//! | `Q0` | 2 | max(1 + X_2, 0) |
//! | `Q1` | 2 | max(1 + X_2 + ψ22, 0) |

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gest::{AdherenceSource, EstimationConfig, EstimationMode, StageModelSpec};
use crate::model::{Dataset, ProxyKind, Trajectory};

use super::scenarios::{
    prescribed_adherence_probability, reported_adherence_probability, TreatmentFreeIndicator, COVARIATE,
};
use super::Scenario;

/// The four estimators compared in the simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Modified G-estimation with the true adherence probabilities.
    ModifiedKnown,
    /// Modified G-estimation with adherence fitted on the validation sample.
    ModifiedFitted,
    /// Standard G-estimation treating the proxy as the treatment.
    NaiveProxy,
    /// Standard G-estimation on the true treatment, the infeasible benchmark.
    StandardActual,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::ModifiedKnown,
        Estimator::ModifiedFitted,
        Estimator::NaiveProxy,
        Estimator::StandardActual,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::ModifiedKnown => "modified-known",
            Estimator::ModifiedFitted => "modified-fitted",
            Estimator::NaiveProxy => "naive-proxy",
            Estimator::StandardActual => "standard-actual",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Estimator {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.label() == s.trim())
            .ok_or_else(|| crate::Error::InvalidSpec(format!("unknown estimator '{s}'")))
    }
}

fn x(t: &Trajectory, stage: usize) -> f64 {
    t.stages[stage - 1].covariate(COVARIATE).unwrap_or(f64::NAN)
}

/// Adds the positive-part covariates listed in the module docs. `psi22` is
/// the A_1 coefficient of the stage-2 contrast.
pub fn add_model_covariates(data: &Dataset, psi22: f64) -> Result<Dataset> {
    data.with_covariate("P", 1, |t| (1.0 + x(t, 1)).max(0.0))?
        .with_covariate("I", 1, |t| f64::from(1.0 + x(t, 1) > 0.0))?
        .with_covariate("Q0", 2, |t| (1.0 + x(t, 2)).max(0.0))?
        .with_covariate("Q1", 2, |t| (1.0 + x(t, 2) + psi22).max(0.0))
}

/// The stage-2 A_1 coefficient each scenario generates with.
pub fn stage_two_lag_coefficient(scenario: Scenario, varied: f64) -> f64 {
    match scenario {
        Scenario::S1 | Scenario::S2 | Scenario::S4 => varied,
        Scenario::S3 => -1.0,
    }
}

/// Contrast, treatment-free, assignment and adherence models per stage.
pub fn scenario_models(scenario: Scenario, varied: f64, indicator: TreatmentFreeIndicator) -> Vec<StageModelSpec> {
    let psi22 = stage_two_lag_coefficient(scenario, varied);
    let parse = |stage: usize, c: &str, tf: &str, a: &str, adh: &str| {
        StageModelSpec::parse(stage, c, tf, a, Some(adh)).expect("built-in models are valid")
    };
    match scenario {
        Scenario::S1 | Scenario::S2 | Scenario::S3 => {
            // -max(C_2, 0) = -Q0 + A_1·Q0 - A_1·Q1, which is just -Q0 when ψ22 = 0.
            let lagged = if psi22 == 0.0 { "" } else { " + A[1]*Q0[2] + A[1]*Q1[2]" };
            let (tf1, tf2) = match (scenario, indicator) {
                (Scenario::S3, TreatmentFreeIndicator::Actual) => (
                    "1 + X[1] + P[1] + I[1]".to_string(),
                    format!("1 + X[1] + P[1] + I[1] + A[1] + A[1]*X[1] + Q0[2]{lagged}"),
                ),
                (Scenario::S3, TreatmentFreeIndicator::Prescribed) => (
                    "1 + X[1] + P[1] + Astar[1]".to_string(),
                    format!("1 + X[1] + P[1] + Astar[1] + A[1] + A[1]*X[1] + Q0[2]{lagged}"),
                ),
                _ => (
                    "1 + X[1] + P[1]".to_string(),
                    format!("1 + X[1] + P[1] + A[1] + A[1]*X[1] + Q0[2]{lagged}"),
                ),
            };
            vec![
                parse(1, "1 + X[1]", &tf1, "1 + X[1]", "1 + X[1] + Astar[1]"),
                parse(2, "1 + X[2] + A[1]", &tf2, "1 + X[2]", "1 + X[2] + Astar[2]"),
            ]
        }
        Scenario::S4 => {
            // X takes three values, so quadratic terms saturate every model.
            let asg = |j: usize| format!("1 + X[{j}] + X[{j}]*X[{j}]");
            let adh = |j: usize| {
                format!("1 + X[{j}] + X[{j}]*X[{j}] + Astar[{j}] + Astar[{j}]*X[{j}] + Astar[{j}]*X[{j}]*X[{j}]")
            };
            vec![
                parse(1, "1 + X[1]", "1 + X[1]", &asg(1), &adh(1)),
                parse(2, "1 + A[1]", "1 + X[1] + A[1] + A[1]*X[1]", &asg(2), &adh(2)),
            ]
        }
    }
}

/// The true adherence probability Pr(A_j = 1 | X_j, proxy) for a scenario.
pub fn known_adherence(scenario: Scenario) -> AdherenceSource {
    match scenario {
        Scenario::S4 => AdherenceSource::known(|t, j, _| {
            reported_adherence_probability(x(t, j), t.stages[j - 1].reported.unwrap_or(false))
        }),
        _ => AdherenceSource::known(|t, j, _| {
            prescribed_adherence_probability(x(t, j), t.stages[j - 1].prescribed.unwrap_or(false))
        }),
    }
}

/// Full estimation configuration for one estimator in one scenario.
pub fn estimator_config(
    scenario: Scenario,
    estimator: Estimator,
    varied: f64,
    indicator: TreatmentFreeIndicator,
    exact_pseudo_outcomes: bool,
) -> EstimationConfig {
    let models = scenario_models(scenario, varied, indicator);
    let modified = match scenario.proxy_kind() {
        ProxyKind::Prescribed => EstimationMode::ModifiedPrescribed,
        ProxyKind::Reported => EstimationMode::ModifiedReported,
    };
    match estimator {
        Estimator::ModifiedKnown => EstimationConfig::new(modified, models)
            .with_adherence(known_adherence(scenario))
            .with_exact_pseudo_outcomes(exact_pseudo_outcomes),
        Estimator::ModifiedFitted => EstimationConfig::new(modified, models)
            .with_adherence(AdherenceSource::Fitted)
            .with_exact_pseudo_outcomes(exact_pseudo_outcomes),
        Estimator::NaiveProxy => EstimationConfig::new(EstimationMode::StandardNaiveProxy, models),
        Estimator::StandardActual => EstimationConfig::new(EstimationMode::StandardActual, models),
    }
}
