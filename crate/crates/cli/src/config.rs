//! Analysis configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dtr_core::gest::{AdherenceSource, EstimationConfig, EstimationMode, StageModelSpec};
use dtr_core::model::ProxyKind;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Key under which a bound known-adherence column is stored with the
/// stage covariates. Formula names cannot start with `@`.
pub const KNOWN_ADHERENCE_KEY: &str = "@known_adherence";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// CSV file; relative paths resolve against the config file's directory.
    pub input: PathBuf,
    pub stages: usize,
    #[serde(default)]
    pub id: Option<String>,
    pub outcome: String,
    /// Defaults to the kind implied by `mode`, else prescribed.
    #[serde(default)]
    pub proxy_kind: Option<ProxyKind>,
    /// Column bindings, stage 1 first.
    pub columns: Vec<StageColumns>,
    /// Model formulas, stage 1 first.
    pub models: Vec<StageModels>,
    pub mode: EstimationMode,
    #[serde(default)]
    pub adherence: Option<AdherenceConfig>,
    #[serde(default)]
    pub exact_pseudo_outcomes: bool,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageColumns {
    /// Formula name to CSV column.
    #[serde(default)]
    pub covariates: BTreeMap<String, String>,
    #[serde(default)]
    pub proxy: Option<String>,
    #[serde(default)]
    pub actual: Option<String>,
    /// 0/1 column marking rows whose actual treatment may be used to fit
    /// the adherence model. Without it, every row with an actual treatment
    /// is a validation row.
    #[serde(default)]
    pub validation: Option<String>,
    /// Pr(A = 1 | history, proxy), for `"source": "known"`.
    #[serde(default)]
    pub known_adherence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModels {
    pub contrast: String,
    pub treatment_free: String,
    pub assignment: String,
    #[serde(default)]
    pub adherence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdherenceConfig {
    Fitted,
    Known,
    External {
        coefficients: Vec<Vec<f64>>,
        #[serde(default)]
        covariance: Option<Vec<Vec<f64>>>,
    },
    Sensitivity {
        coefficients: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMethod {
    #[default]
    None,
    WaldSandwich,
    BootstrapPercentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default)]
    pub method: InferenceMethod,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_level() -> f64 {
    0.95
}

fn default_replicates() -> usize {
    1000
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            method: InferenceMethod::None,
            level: default_level(),
            replicates: default_replicates(),
        }
    }
}

impl AnalysisConfig {
    /// Reads and validates a config file, resolving `input` against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: AnalysisConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::user(format!(
                "config {}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if config.input.is_relative() {
            if let Some(dir) = path.parent() {
                config.input = dir.join(&config.input);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.stages == 0 {
            return Err(CliError::user("config: `stages` must be at least 1"));
        }
        if self.columns.len() != self.stages || self.models.len() != self.stages {
            return Err(CliError::user(format!(
                "config: {} stages but {} column bindings and {} model entries",
                self.stages,
                self.columns.len(),
                self.models.len()
            )));
        }
        self.dataset_proxy_kind()?;
        for (j, cols) in self.columns.iter().enumerate() {
            let stage = j + 1;
            if self.mode == EstimationMode::StandardActual && cols.actual.is_none() {
                return Err(CliError::user(format!(
                    "config: mode standard-actual needs an `actual` column at stage {stage}"
                )));
            }
            if self.mode != EstimationMode::StandardActual && cols.proxy.is_none() {
                return Err(CliError::user(format!(
                    "config: mode {} needs a `proxy` column at stage {stage}",
                    self.mode
                )));
            }
            if cols.validation.is_some() && cols.actual.is_none() {
                return Err(CliError::user(format!(
                    "config: stage {stage} binds a validation flag but no `actual` column"
                )));
            }
            if matches!(self.adherence, Some(AdherenceConfig::Known)) && cols.known_adherence.is_none() {
                return Err(CliError::user(format!(
                    "config: known adherence needs a `known_adherence` column at stage {stage}"
                )));
            }
            if let Some(name) = cols.covariates.keys().find(|k| !valid_name(k)) {
                return Err(CliError::user(format!(
                    "config: `{name}` at stage {stage} is not a valid covariate name"
                )));
            }
        }
        if !(self.inference.level > 0.0 && self.inference.level < 1.0) {
            return Err(CliError::user(format!(
                "config: inference level {} is not in (0, 1)",
                self.inference.level
            )));
        }
        if self.inference.method == InferenceMethod::BootstrapPercentile && self.inference.replicates < 2 {
            return Err(CliError::user("config: bootstrap needs at least 2 replicates"));
        }
        self.estimation_config()?;
        Ok(())
    }

    /// The proxy kind the data are loaded as.
    pub fn dataset_proxy_kind(&self) -> CliResult<ProxyKind> {
        let implied = match self.mode {
            EstimationMode::ModifiedPrescribed => Some(ProxyKind::Prescribed),
            EstimationMode::ModifiedReported => Some(ProxyKind::Reported),
            _ => None,
        };
        match (implied, self.proxy_kind) {
            (Some(a), Some(b)) if a != b => Err(CliError::user(format!(
                "config: mode {} conflicts with proxy_kind {b:?}",
                self.mode
            ))),
            (Some(a), _) => Ok(a),
            (None, b) => Ok(b.unwrap_or_default()),
        }
    }

    pub fn stage_models(&self) -> CliResult<Vec<StageModelSpec>> {
        self.models
            .iter()
            .enumerate()
            .map(|(j, m)| {
                StageModelSpec::parse(
                    j + 1,
                    &m.contrast,
                    &m.treatment_free,
                    &m.assignment,
                    m.adherence.as_deref(),
                )
                .map_err(|e| CliError::user(format!("config: stage {} models: {e}", j + 1)))
            })
            .collect()
    }

    /// The estimation settings this config describes.
    pub fn estimation_config(&self) -> CliResult<EstimationConfig> {
        let stages = self.stage_models()?;
        let vectors = |rows: &[Vec<f64>], what: &str| -> CliResult<Vec<DVector<f64>>> {
            if rows.len() != self.stages {
                return Err(CliError::user(format!(
                    "config: {what} adherence needs {} coefficient vectors, got {}",
                    self.stages,
                    rows.len()
                )));
            }
            for (j, (row, spec)) in rows.iter().zip(&stages).enumerate() {
                let want = spec.adherence.as_ref().map_or(0, |s| s.len());
                if row.len() != want {
                    return Err(CliError::user(format!(
                        "config: stage {} adherence model has {want} terms but {} coefficients were given",
                        j + 1,
                        row.len()
                    )));
                }
            }
            Ok(rows.iter().map(|r| DVector::from_vec(r.clone())).collect())
        };
        let adherence = match &self.adherence {
            None => None,
            Some(AdherenceConfig::Fitted) => Some(AdherenceSource::Fitted),
            Some(AdherenceConfig::Known) => Some(AdherenceSource::known(|t, j, _| {
                t.stages[j - 1].covariate(KNOWN_ADHERENCE_KEY).unwrap_or(f64::NAN)
            })),
            Some(AdherenceConfig::External {
                coefficients,
                covariance,
            }) => {
                let coefficients = vectors(coefficients, "external")?;
                let dim: usize = coefficients.iter().map(|c| c.len()).sum();
                let covariance = match covariance {
                    None => None,
                    Some(rows) => {
                        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                            return Err(CliError::user(format!(
                                "config: external adherence covariance must be {dim} x {dim}"
                            )));
                        }
                        Some(DMatrix::from_fn(dim, dim, |r, c| rows[r][c]))
                    }
                };
                Some(AdherenceSource::External {
                    coefficients,
                    covariance,
                })
            }
            Some(AdherenceConfig::Sensitivity { coefficients }) => Some(AdherenceSource::Sensitivity {
                coefficients: vectors(coefficients, "sensitivity")?,
            }),
        };
        if self.mode.is_modified() != adherence.is_some() {
            return Err(CliError::user(if self.mode.is_modified() {
                format!("config: mode {} needs an `adherence` source", self.mode)
            } else {
                format!("config: mode {} takes no `adherence` source", self.mode)
            }));
        }
        let mut config = EstimationConfig::new(self.mode, stages).with_exact_pseudo_outcomes(self.exact_pseudo_outcomes);
        config.adherence = adherence;
        Ok(config)
    }
}

fn valid_name(name: &str) -> bool {
    if ["A", "Astar", "EA", "log"].contains(&name) {
        return false;
    }
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
