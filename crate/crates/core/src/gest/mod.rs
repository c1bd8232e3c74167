//! Standard and modified G-estimation of optimal dynamic treatment regimes.
//!
//! Estimation runs by backward induction from stage K to stage 1. At each
//! stage the assignment model is fitted, the contrast and treatment-free
//! parameters are solved jointly, and pseudo outcomes for the previous stage
//! are formed. In the modified modes the modelled indicator is the recorded
//! proxy and the contrast is multiplied by the adherence probability
//! Pr(A = 1 | H*, A*) instead of the unobserved treatment.

mod problem;
mod pseudo;
mod solve;

pub use problem::StackedEquations;
pub use pseudo::{
    expected_optimal_gain, optimal_treatment, pseudo_outcome_exact, pseudo_outcome_modified,
    pseudo_outcome_standard,
};
pub use solve::{solve_psi, solve_stage, StageSolution, StageSystem};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{expit, GlmFit};
use crate::model::{
    build_design_row, Dataset, FeatureSpec, ProxyKind, RowContext, SpecRole, Substitution,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    /// Standard G-estimation on the actual treatments (as treated).
    StandardActual,
    /// Standard G-estimation with the proxy used as if it were the treatment.
    #[serde(alias = "naive-proxy")]
    StandardNaiveProxy,
    /// Modified G-estimation with prescribed treatments as the proxy.
    ModifiedPrescribed,
    /// Modified G-estimation with reported treatments as the proxy.
    ModifiedReported,
}

impl EstimationMode {
    pub const ALL: [EstimationMode; 4] = [
        EstimationMode::StandardActual,
        EstimationMode::StandardNaiveProxy,
        EstimationMode::ModifiedPrescribed,
        EstimationMode::ModifiedReported,
    ];

    pub fn is_modified(self) -> bool {
        matches!(
            self,
            EstimationMode::ModifiedPrescribed | EstimationMode::ModifiedReported
        )
    }

    /// Proxy read by `Astar[l]` and used as the modelled indicator.
    pub fn proxy_kind(self, dataset_kind: ProxyKind) -> ProxyKind {
        match self {
            EstimationMode::ModifiedPrescribed => ProxyKind::Prescribed,
            EstimationMode::ModifiedReported => ProxyKind::Reported,
            _ => dataset_kind,
        }
    }

    /// Resolution of `A[l]` in contrast and treatment-free models.
    pub fn contrast_substitution(self) -> Substitution {
        match self {
            EstimationMode::StandardActual => Substitution::UseActual,
            EstimationMode::StandardNaiveProxy => Substitution::UseProxy,
            _ => Substitution::UseExpected,
        }
    }

    /// Resolution of `A[l]` in assignment models.
    pub fn assignment_substitution(self) -> Substitution {
        match self {
            EstimationMode::StandardActual => Substitution::UseActual,
            _ => Substitution::UseProxy,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimationMode::StandardActual => "standard-actual",
            EstimationMode::StandardNaiveProxy => "standard-naive-proxy",
            EstimationMode::ModifiedPrescribed => "modified-prescribed",
            EstimationMode::ModifiedReported => "modified-reported",
        }
    }
}

impl fmt::Display for EstimationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive-proxy" => Ok(EstimationMode::StandardNaiveProxy),
            _ => EstimationMode::ALL
                .into_iter()
                .find(|m| m.label() == s)
                .ok_or_else(|| Error::InvalidSpec(format!("unknown estimation mode `{s}`"))),
        }
    }
}

/// Choice of λ in the G-estimating equation. Only the gradient of the
/// contrast in ψ is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaChoice {
    #[default]
    Gradient,
}

/// The four model specifications for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModelSpec {
    pub contrast: FeatureSpec,
    pub treatment_free: FeatureSpec,
    pub assignment: FeatureSpec,
    /// Needed whenever adherence probabilities are computed from coefficients.
    #[serde(default)]
    pub adherence: Option<FeatureSpec>,
    #[serde(default)]
    pub lambda: LambdaChoice,
}

impl StageModelSpec {
    /// Parses and validates the formulas for `stage`.
    pub fn parse(
        stage: usize,
        contrast: &str,
        treatment_free: &str,
        assignment: &str,
        adherence: Option<&str>,
    ) -> Result<Self> {
        let spec = Self {
            contrast: FeatureSpec::parse(contrast)?,
            treatment_free: FeatureSpec::parse(treatment_free)?,
            assignment: FeatureSpec::parse(assignment)?,
            adherence: adherence.map(FeatureSpec::parse).transpose()?,
            lambda: LambdaChoice::Gradient,
        };
        spec.validate(stage)?;
        Ok(spec)
    }

    pub fn validate(&self, stage: usize) -> Result<()> {
        self.contrast.validate(stage, SpecRole::Contrast)?;
        self.treatment_free.validate(stage, SpecRole::TreatmentFree)?;
        self.assignment.validate(stage, SpecRole::Assignment)?;
        if let Some(a) = &self.adherence {
            a.validate(stage, SpecRole::Adherence)?;
        }
        Ok(())
    }
}

/// Pr(A_j = 1 | history, proxy) for one trajectory and stage.
pub type AdherenceFn = Arc<dyn Fn(&Trajectory, usize, ProxyKind) -> f64 + Send + Sync>;

/// Where adherence probabilities come from.
#[derive(Clone)]
pub enum AdherenceSource {
    /// A known probability function; nothing is estimated.
    Known(AdherenceFn),
    /// Logistic models fitted on the validation rows.
    Fitted,
    /// Coefficients estimated elsewhere, one vector per stage, with an
    /// optional covariance for all of them concatenated in stage order.
    External {
        coefficients: Vec<DVector<f64>>,
        covariance: Option<DMatrix<f64>>,
    },
    /// Posited coefficients for a sensitivity analysis; carry no uncertainty.
    Sensitivity { coefficients: Vec<DVector<f64>> },
}

impl AdherenceSource {
    pub fn known<F>(f: F) -> Self
    where
        F: Fn(&Trajectory, usize, ProxyKind) -> f64 + Send + Sync + 'static,
    {
        AdherenceSource::Known(Arc::new(f))
    }

    fn fixed_coefficients(&self) -> Option<&[DVector<f64>]> {
        match self {
            AdherenceSource::External { coefficients, .. }
            | AdherenceSource::Sensitivity { coefficients } => Some(coefficients),
            _ => None,
        }
    }
}

impl fmt::Debug for AdherenceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdherenceSource::Known(_) => f.write_str("Known(..)"),
            AdherenceSource::Fitted => f.write_str("Fitted"),
            AdherenceSource::External {
                coefficients,
                covariance,
            } => f
                .debug_struct("External")
                .field("coefficients", coefficients)
                .field("covariance", covariance)
                .finish(),
            AdherenceSource::Sensitivity { coefficients } => f
                .debug_struct("Sensitivity")
                .field("coefficients", coefficients)
                .finish(),
        }
    }
}

/// Everything that determines an estimate apart from the data.
#[derive(Debug, Clone)]
pub struct EstimationConfig {
    pub mode: EstimationMode,
    /// One entry per stage, stage 1 first.
    pub stages: Vec<StageModelSpec>,
    pub adherence: Option<AdherenceSource>,
    /// Use the expected-gain pseudo outcome when a contrast depends on the
    /// previous stage's treatment (modified modes only).
    pub exact_pseudo_outcomes: bool,
}

impl EstimationConfig {
    pub fn new(mode: EstimationMode, stages: Vec<StageModelSpec>) -> Self {
        Self {
            mode,
            stages,
            adherence: None,
            exact_pseudo_outcomes: false,
        }
    }

    pub fn with_adherence(mut self, source: AdherenceSource) -> Self {
        self.adherence = Some(source);
        self
    }

    pub fn with_exact_pseudo_outcomes(mut self, exact: bool) -> Self {
        self.exact_pseudo_outcomes = exact;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub contrast_condition: f64,
    pub system_condition: f64,
    pub assignment_iterations: usize,
    pub adherence_iterations: Option<usize>,
    /// Fitted assignment probabilities outside (1e-12, 1 - 1e-12).
    pub positivity_warnings: usize,
    pub validation_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFit {
    pub stage: usize,
    pub psi: DVector<f64>,
    /// Treatment-free coefficients, modelling ν (so θ = -Dβ).
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Adherence coefficients used at this stage, fitted or supplied.
    pub alpha: Option<DVector<f64>>,
    pub diagnostics: StageDiagnostics,
}

#[derive(Debug, Clone)]
pub struct RegimeFit {
    pub mode: EstimationMode,
    pub proxy_kind: ProxyKind,
    /// Stage 1 first.
    pub stages: Vec<StageFit>,
    /// `pseudo_outcomes[j - 1]` is the response used at stage j, Ṽ_{j+1};
    /// the last entry is the observed outcome.
    pub pseudo_outcomes: Vec<DVector<f64>>,
    config: EstimationConfig,
}

impl PartialEq for RegimeFit {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.proxy_kind == other.proxy_kind
            && self.stages == other.stages
            && self.pseudo_outcomes == other.pseudo_outcomes
    }
}

impl RegimeFit {
    pub fn config(&self) -> &EstimationConfig {
        &self.config
    }

    pub fn stage(&self, stage: usize) -> &StageFit {
        &self.stages[stage - 1]
    }

    /// All contrast parameters, stage 1 first.
    pub fn psi(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.psi.iter().copied()).collect()
    }

    /// `(stage, term label)` for each entry of [`RegimeFit::psi`].
    pub fn psi_labels(&self) -> Vec<(usize, String)> {
        self.config
            .stages
            .iter()
            .enumerate()
            .flat_map(|(j, s)| s.contrast.term_labels().into_iter().map(move |l| (j + 1, l)))
            .collect()
    }

    /// Adherence probability for stage `stage` of one trajectory.
    pub fn adherence_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64> {
        match &self.config.adherence {
            None => Err(Error::MissingAdherence { stage }),
            Some(AdherenceSource::Known(f)) => Ok(f(traj, stage, self.proxy_kind)),
            Some(_) => {
                let spec = self.config.stages[stage - 1]
                    .adherence
                    .as_ref()
                    .ok_or(Error::MissingAdherence { stage })?;
                let alpha = self.stages[stage - 1]
                    .alpha
                    .as_ref()
                    .ok_or(Error::MissingAdherence { stage })?;
                let ctx = RowContext::new(Substitution::UseProxy, self.proxy_kind);
                let row = build_design_row(spec, traj, stage, &ctx)?;
                Ok(expit(row.iter().zip(alpha.iter()).map(|(x, a)| x * a).sum()))
            }
        }
    }

    /// Estimated contrast at `stage` for a (possibly partial) history.
    pub fn contrast_value(&self, history: &Trajectory, stage: usize) -> Result<f64> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::StageOutOfRange(format!(
                "stage {stage} of a {}-stage regime",
                self.stages.len()
            )));
        }
        let spec = &self.config.stages[stage - 1].contrast;
        let substitution = self.mode.contrast_substitution();
        let mut expected = vec![f64::NAN; stage];
        for (s, src) in spec.terms().iter().flat_map(|t| t.treatment_refs()) {
            let needs = src == crate::model::TreatmentSource::Expected
                || (src == crate::model::TreatmentSource::Actual
                    && substitution == Substitution::UseExpected);
            if needs && expected[s - 1].is_nan() {
                expected[s - 1] = self.adherence_probability(history, s)?;
            }
        }
        let ctx = RowContext::new(substitution, self.proxy_kind).with_expected(&expected);
        let row = build_design_row(spec, history, stage, &ctx)?;
        Ok(row
            .iter()
            .zip(self.stages[stage - 1].psi.iter())
            .map(|(x, p)| x * p)
            .sum())
    }
}

/// Recommended treatment at `stage`: treat iff the estimated contrast is positive.
pub fn recommend(fit: &RegimeFit, history: &Trajectory, stage: usize) -> Result<bool> {
    fit.contrast_value(history, stage).map(optimal_treatment)
}

/// Logistic model for the actual treatment given history and proxy, fitted
/// on the validation rows at `stage`.
pub fn fit_adherence(
    data: &Dataset,
    stage: usize,
    spec: &FeatureSpec,
    proxy_kind: ProxyKind,
) -> Result<GlmFit> {
    problem::fit_adherence_model(data, stage, spec, proxy_kind).map(|(fit, _)| fit)
}

/// Runs the full backward induction.
pub fn estimate_regime(data: &Dataset, config: &EstimationConfig) -> Result<RegimeFit> {
    problem::Problem::new(data, config)?.estimate()
}

/// One estimate per grid point, each treating its adherence coefficients
/// as known. Failures are returned in place rather than aborting the sweep.
pub fn sensitivity_sweep(
    data: &Dataset,
    base: &EstimationConfig,
    grid: &[Vec<DVector<f64>>],
) -> Result<Vec<Result<RegimeFit>>> {
    if grid.is_empty() {
        return Err(Error::InvalidSpec("sensitivity grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|coefficients| {
            let config = EstimationConfig {
                adherence: Some(AdherenceSource::Sensitivity {
                    coefficients: coefficients.clone(),
                }),
                ..base.clone()
            };
            estimate_regime(data, &config)
        })
        .collect())
}
