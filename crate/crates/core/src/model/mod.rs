//! Longitudinal data types and the formula language used to describe
//! per-stage models.
//!
//! Stages are numbered from 1 everywhere in the public API, matching the
//! `NAME[stage]` references of the formula language.

mod design;
mod formula;

pub use design::{build_design_row, DesignTemplate, RowContext, Substitution};
pub use formula::{Factor, FeatureSpec, SpecRole, Term, Transform, TreatmentSource};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which error-prone treatment indicator stands in for the actual treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    /// The prescribed treatment, an antecedent of the actual treatment.
    #[default]
    Prescribed,
    /// The self-reported treatment, a descendant of the actual treatment.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub covariates: BTreeMap<String, f64>,
    pub prescribed: Option<bool>,
    pub actual: Option<bool>,
    pub reported: Option<bool>,
}

impl StageRecord {
    pub fn proxy(&self, kind: ProxyKind) -> Option<bool> {
        match kind {
            ProxyKind::Prescribed => self.prescribed,
            ProxyKind::Reported => self.reported,
        }
    }

    pub fn covariate(&self, name: &str) -> Option<f64> {
        self.covariates.get(name).copied()
    }
}

/// One individual's record over all stages, plus the terminal outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub stages: Vec<StageRecord>,
    pub outcome: f64,
}

impl Trajectory {
    pub fn stage(&self, stage: usize) -> Result<&StageRecord> {
        stage
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| {
                Error::StageOutOfRange(format!(
                    "stage {stage} requested from a history of {} stages",
                    self.stages.len()
                ))
            })
    }

    pub fn actual(&self, stage: usize) -> Result<bool> {
        self.stage(stage)?
            .actual
            .ok_or(Error::MissingActual { stage })
    }

    pub fn proxy(&self, stage: usize, kind: ProxyKind) -> Result<bool> {
        self.stage(stage)?
            .proxy(kind)
            .ok_or(Error::MissingProxy { stage })
    }
}

/// A validated collection of trajectories sharing one stage layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    validation: Vec<Vec<bool>>,
    proxy_kind: ProxyKind,
}

impl Dataset {
    /// Builds a dataset, rejecting ragged or inconsistent input.
    ///
    /// `validation[i][j]` marks whether individual `i`'s actual treatment at
    /// stage `j + 1` may be used to fit adherence models.
    pub fn new(
        trajectories: Vec<Trajectory>,
        validation: Vec<Vec<bool>>,
        proxy_kind: ProxyKind,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InvalidData("dataset has no trajectories".into()))?;
        let k = first.stages.len();
        if k == 0 {
            return Err(Error::InvalidData("trajectories must have at least one stage".into()));
        }
        let schema: Vec<Vec<&String>> = first
            .stages
            .iter()
            .map(|s| s.covariates.keys().collect())
            .collect();
        if validation.len() != trajectories.len() {
            return Err(Error::InvalidData(format!(
                "{} validation rows for {} trajectories",
                validation.len(),
                trajectories.len()
            )));
        }
        for (i, (t, flags)) in trajectories.iter().zip(&validation).enumerate() {
            if t.stages.len() != k {
                return Err(Error::InvalidData(format!(
                    "trajectory {} (`{}`) has {} stages, expected {k}",
                    i,
                    t.id,
                    t.stages.len()
                )));
            }
            if !t.outcome.is_finite() {
                return Err(Error::InvalidData(format!(
                    "trajectory `{}` has a non-finite outcome",
                    t.id
                )));
            }
            if flags.len() != k {
                return Err(Error::InvalidData(format!(
                    "trajectory `{}` has {} validation flags, expected {k}",
                    t.id,
                    flags.len()
                )));
            }
            for (j, (rec, names)) in t.stages.iter().zip(&schema).enumerate() {
                if rec.covariates.len() != names.len()
                    || !rec.covariates.keys().zip(names).all(|(a, b)| a == *b)
                {
                    return Err(Error::InvalidData(format!(
                        "trajectory `{}` stage {} covariate names differ from the first trajectory",
                        t.id,
                        j + 1
                    )));
                }
                if let Some((name, _)) = rec.covariates.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "trajectory `{}` stage {} covariate `{name}` is not finite",
                        t.id,
                        j + 1
                    )));
                }
                if flags[j] && rec.actual.is_none() {
                    return Err(Error::InvalidData(format!(
                        "trajectory `{}` stage {} is flagged for validation without an actual treatment",
                        t.id,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self {
            trajectories,
            validation,
            proxy_kind,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of stages K.
    pub fn stages(&self) -> usize {
        self.trajectories[0].stages.len()
    }

    pub fn proxy_kind(&self) -> ProxyKind {
        self.proxy_kind
    }

    pub fn is_validation(&self, individual: usize, stage: usize) -> bool {
        self.validation[individual][stage - 1]
    }

    pub fn validation_flags(&self) -> &[Vec<bool>] {
        &self.validation
    }

    pub fn validation_count(&self, stage: usize) -> usize {
        self.validation.iter().filter(|f| f[stage - 1]).count()
    }

    /// Covariate names recorded at `stage`.
    pub fn covariate_names(&self, stage: usize) -> Vec<&str> {
        self.trajectories[0].stages[stage - 1]
            .covariates
            .keys()
            .map(String::as_str)
            .collect()
    }

    /// Dataset made of the listed individuals, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            validation: indices.iter().map(|&i| self.validation[i].clone()).collect(),
            proxy_kind: self.proxy_kind,
        }
    }

    /// Adds a covariate computed from each trajectory at `stage`.
    pub fn with_covariate<F>(&self, name: &str, stage: usize, f: F) -> Result<Dataset>
    where
        F: Fn(&Trajectory) -> f64,
    {
        if stage == 0 || stage > self.stages() {
            return Err(Error::StageOutOfRange(format!("stage {stage}")));
        }
        let mut out = self.clone();
        for t in &mut out.trajectories {
            let v = f(t);
            t.stages[stage - 1].covariates.insert(name.to_string(), v);
        }
        Dataset::new(out.trajectories, out.validation, out.proxy_kind)
    }

    pub fn with_proxy_kind(mut self, kind: ProxyKind) -> Dataset {
        self.proxy_kind = kind;
        self
    }

    pub fn into_parts(self) -> (Vec<Trajectory>, Vec<Vec<bool>>, ProxyKind) {
        (self.trajectories, self.validation, self.proxy_kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: f64, a: Option<bool>) -> StageRecord {
        StageRecord {
            covariates: [("X".to_string(), x)].into_iter().collect(),
            prescribed: Some(true),
            actual: a,
            reported: None,
        }
    }

    fn traj(id: &str, k: usize) -> Trajectory {
        Trajectory {
            id: id.into(),
            stages: (0..k).map(|_| rec(1.0, Some(true))).collect(),
            outcome: 0.0,
        }
    }

    #[test]
    fn ragged_stage_counts_are_rejected() {
        let err = Dataset::new(
            vec![traj("a", 2), traj("b", 1)],
            vec![vec![false; 2], vec![false; 1]],
            ProxyKind::Prescribed,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn validation_requires_actual() {
        let mut t = traj("a", 1);
        t.stages[0].actual = None;
        let err = Dataset::new(vec![t], vec![vec![true]], ProxyKind::Prescribed).unwrap_err();
        assert!(err.to_string().contains("validation"));
    }

    #[test]
    fn covariate_schema_must_match() {
        let mut b = traj("b", 1);
        b.stages[0].covariates.insert("Z".into(), 2.0);
        let err = Dataset::new(
            vec![traj("a", 1), b],
            vec![vec![false], vec![false]],
            ProxyKind::Prescribed,
        )
        .unwrap_err();
        assert!(err.to_string().contains("covariate names"));
    }

    #[test]
    fn non_finite_outcome_rejected() {
        let mut t = traj("a", 1);
        t.outcome = f64::NAN;
        assert!(Dataset::new(vec![t], vec![vec![false]], ProxyKind::Prescribed).is_err());
    }

    #[test]
    fn select_repeats_rows() {
        let d = Dataset::new(
            vec![traj("a", 1), traj("b", 1)],
            vec![vec![true], vec![false]],
            ProxyKind::Prescribed,
        )
        .unwrap();
        let s = d.select(&[1, 1, 0]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.trajectories()[0].id, "b");
        assert!(s.is_validation(2, 1));
        assert_eq!(s.validation_count(1), 1);
    }
}
