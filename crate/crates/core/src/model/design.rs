use nalgebra::DMatrix;

use super::formula::{Factor, FeatureSpec, Transform, TreatmentSource};
use super::{Dataset, ProxyKind, Trajectory};
use crate::error::{Error, Result};

/// How `A[l]` references are resolved when building a design row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substitution {
    UseActual,
    UseProxy,
    UseExpected,
}

/// Everything needed to turn a trajectory into design values.
///
/// `expected[l - 1]` holds Pr(A_l = 1 | H*, A*_l) for this trajectory; it is
/// required by `EA[l]` references and by `A[l]` under [`Substitution::UseExpected`].
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub mode: Substitution,
    pub proxy_kind: ProxyKind,
    pub expected: Option<&'a [f64]>,
}

impl<'a> RowContext<'a> {
    pub fn new(mode: Substitution, proxy_kind: ProxyKind) -> Self {
        Self {
            mode,
            proxy_kind,
            expected: None,
        }
    }

    pub fn with_expected(mut self, expected: &'a [f64]) -> Self {
        self.expected = Some(expected);
        self
    }

    fn expected_at(&self, stage: usize) -> Result<f64> {
        self.expected
            .and_then(|e| e.get(stage - 1))
            .copied()
            .filter(|p| p.is_finite())
            .ok_or(Error::MissingAdherence { stage })
    }

    /// Whether a factor is resolved through the adherence probabilities.
    fn is_expected(&self, source: TreatmentSource) -> bool {
        match source {
            TreatmentSource::Expected => true,
            TreatmentSource::Actual => self.mode == Substitution::UseExpected,
            TreatmentSource::Proxy => false,
        }
    }
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn factor_value(factor: &Factor, traj: &Trajectory, ctx: &RowContext<'_>) -> Result<f64> {
    match factor {
        Factor::Constant => Ok(1.0),
        Factor::Covariate {
            name,
            stage,
            transform,
        } => {
            let v = traj
                .stage(*stage)?
                .covariate(name)
                .ok_or_else(|| Error::MissingCovariate {
                    name: name.clone(),
                    stage: *stage,
                })?;
            match transform {
                Transform::Identity => Ok(v),
                Transform::Log if v > 0.0 => Ok(v.ln()),
                Transform::Log => Err(Error::NonPositiveLog {
                    name: name.clone(),
                    stage: *stage,
                    value: v,
                }),
            }
        }
        Factor::Treatment { stage, source } => {
            if ctx.is_expected(*source) {
                return ctx.expected_at(*stage);
            }
            match source {
                TreatmentSource::Proxy => traj.proxy(*stage, ctx.proxy_kind).map(bit),
                _ => match ctx.mode {
                    Substitution::UseActual => traj.actual(*stage).map(bit),
                    _ => traj.proxy(*stage, ctx.proxy_kind).map(bit),
                },
            }
        }
    }
}

/// Evaluates every term of `spec` for one trajectory, in term order.
///
/// `stage` is the stage the model belongs to; references past it are rejected.
pub fn build_design_row(
    spec: &FeatureSpec,
    traj: &Trajectory,
    stage: usize,
    ctx: &RowContext<'_>,
) -> Result<Vec<f64>> {
    if spec.max_stage() > stage {
        return Err(Error::StageOutOfRange(format!(
            "model at stage {stage} references stage {}",
            spec.max_stage()
        )));
    }
    spec.terms()
        .iter()
        .map(|term| {
            term.factors
                .iter()
                .try_fold(1.0, |acc, f| Ok(acc * factor_value(f, traj, ctx)?))
        })
        .collect()
}

/// A design matrix split into a fixed part and the adherence probabilities
/// it multiplies, so it can be re-evaluated cheaply when those change.
///
/// Entry `(i, k)` equals `fixed[(i, k)] * prod(expected_i[l - 1] for l in
/// expected_stages[k])`.
#[derive(Debug, Clone)]
pub struct DesignTemplate {
    fixed: DMatrix<f64>,
    expected_stages: Vec<Vec<usize>>,
}

impl DesignTemplate {
    pub fn build(
        spec: &FeatureSpec,
        data: &Dataset,
        stage: usize,
        mode: Substitution,
        proxy_kind: ProxyKind,
    ) -> Result<Self> {
        if spec.max_stage() > stage {
            return Err(Error::StageOutOfRange(format!(
                "model at stage {stage} references stage {}",
                spec.max_stage()
            )));
        }
        let ctx = RowContext::new(mode, proxy_kind);
        let expected_stages: Vec<Vec<usize>> = spec
            .terms()
            .iter()
            .map(|t| {
                t.treatment_refs()
                    .filter(|(_, src)| ctx.is_expected(*src))
                    .map(|(s, _)| s)
                    .collect()
            })
            .collect();
        let n = data.len();
        let mut fixed = DMatrix::zeros(n, spec.len());
        for (i, traj) in data.trajectories().iter().enumerate() {
            for (k, term) in spec.terms().iter().enumerate() {
                let mut v = 1.0;
                for f in &term.factors {
                    if let Factor::Treatment { source, .. } = f {
                        if ctx.is_expected(*source) {
                            continue;
                        }
                    }
                    v *= factor_value(f, traj, &ctx)?;
                }
                fixed[(i, k)] = v;
            }
        }
        Ok(Self {
            fixed,
            expected_stages,
        })
    }

    pub fn nrows(&self) -> usize {
        self.fixed.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.fixed.ncols()
    }

    pub fn needs_expected(&self) -> bool {
        self.expected_stages.iter().any(|s| !s.is_empty())
    }

    /// Stages referenced through adherence probabilities, sorted and unique.
    pub fn expected_stages(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.expected_stages.iter().flatten().copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Full design. `expected[l - 1][i]` is individual `i`'s probability for stage `l`.
    pub fn evaluate(&self, expected: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let mut out = self.fixed.clone();
        for (k, stages) in self.expected_stages.iter().enumerate() {
            for &s in stages {
                let probs = expected
                    .get(s - 1)
                    .filter(|p| p.len() == self.nrows())
                    .ok_or(Error::MissingAdherence { stage: s })?;
                for (i, p) in probs.iter().enumerate() {
                    out[(i, k)] *= p;
                }
            }
        }
        Ok(out)
    }

    /// One row, with `expected[l - 1]` the probability for stage `l`.
    pub fn row(&self, i: usize, expected: &[f64]) -> Result<Vec<f64>> {
        self.expected_stages
            .iter()
            .enumerate()
            .map(|(k, stages)| {
                stages.iter().try_fold(self.fixed[(i, k)], |acc, &s| {
                    expected
                        .get(s - 1)
                        .map(|p| acc * p)
                        .ok_or(Error::MissingAdherence { stage: s })
                })
            })
            .collect()
    }

    /// The design when no adherence probabilities are involved.
    pub fn fixed(&self) -> Result<&DMatrix<f64>> {
        if self.needs_expected() {
            return Err(Error::MissingAdherence {
                stage: self.expected_stages()[0],
            });
        }
        Ok(&self.fixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StageRecord, Trajectory};
    use proptest::prelude::*;

    fn two_stage(x1: f64, x2: f64, a1: Option<bool>, astar1: bool) -> Trajectory {
        let rec = |x: f64, a: Option<bool>, s: bool| StageRecord {
            covariates: [("X".to_string(), x)].into_iter().collect(),
            prescribed: Some(s),
            actual: a,
            reported: None,
        };
        Trajectory {
            id: "t".into(),
            stages: vec![rec(x1, a1, astar1), rec(x2, Some(false), false)],
            outcome: 0.0,
        }
    }

    #[test]
    fn direct_covariate_row() {
        let spec = FeatureSpec::parse("1 + X[1]").unwrap();
        let t = two_stage(2.5, 0.0, Some(true), true);
        let ctx = RowContext::new(Substitution::UseActual, ProxyKind::Prescribed);
        assert_eq!(build_design_row(&spec, &t, 1, &ctx).unwrap(), vec![1.0, 2.5]);
    }

    #[test]
    fn expected_substitution() {
        let spec = FeatureSpec::parse("1 + X[2] + A[1]").unwrap();
        let t = two_stage(0.0, 1.7, None, true);
        let probs = [0.95];
        let ctx = RowContext::new(Substitution::UseExpected, ProxyKind::Prescribed)
            .with_expected(&probs);
        assert_eq!(build_design_row(&spec, &t, 2, &ctx).unwrap(), vec![1.0, 1.7, 0.95]);
    }

    #[test]
    fn actual_substitution() {
        let spec = FeatureSpec::parse("1 + X[2] + A[1]").unwrap();
        let t = two_stage(0.0, -0.3, Some(true), false);
        let ctx = RowContext::new(Substitution::UseActual, ProxyKind::Prescribed);
        assert_eq!(build_design_row(&spec, &t, 2, &ctx).unwrap(), vec![1.0, -0.3, 1.0]);
    }

    #[test]
    fn error_paths() {
        let t = two_stage(-1.0, 1.0, None, true);
        let actual = RowContext::new(Substitution::UseActual, ProxyKind::Prescribed);
        let spec = FeatureSpec::parse("A[1]").unwrap();
        assert_eq!(
            build_design_row(&spec, &t, 2, &actual).unwrap_err(),
            Error::MissingActual { stage: 1 }
        );
        let expected = RowContext::new(Substitution::UseExpected, ProxyKind::Prescribed);
        assert_eq!(
            build_design_row(&spec, &t, 2, &expected).unwrap_err(),
            Error::MissingAdherence { stage: 1 }
        );
        let log = FeatureSpec::parse("log(X[1])").unwrap();
        assert!(matches!(
            build_design_row(&log, &t, 1, &actual).unwrap_err(),
            Error::NonPositiveLog { .. }
        ));
        let missing = FeatureSpec::parse("Z[1]").unwrap();
        assert!(matches!(
            build_design_row(&missing, &t, 1, &actual).unwrap_err(),
            Error::MissingCovariate { .. }
        ));
        let reported = RowContext::new(Substitution::UseProxy, ProxyKind::Reported);
        assert_eq!(
            build_design_row(&FeatureSpec::parse("Astar[1]").unwrap(), &t, 1, &reported)
                .unwrap_err(),
            Error::MissingProxy { stage: 1 }
        );
    }

    #[test]
    fn proxy_mode_reads_prescribed() {
        let spec = FeatureSpec::parse("A[1] + Astar[1]*X[2]").unwrap();
        let t = two_stage(0.0, 3.0, Some(false), true);
        let ctx = RowContext::new(Substitution::UseProxy, ProxyKind::Prescribed);
        assert_eq!(build_design_row(&spec, &t, 2, &ctx).unwrap(), vec![1.0, 3.0]);
    }

    proptest! {
        // With A = A* and expected probabilities equal to A*, all three
        // substitution modes agree.
        #[test]
        fn modes_agree_under_perfect_adherence(x1 in -3.0..3.0f64, x2 in -3.0..3.0f64, a in any::<bool>()) {
            let spec = FeatureSpec::parse("1 + X[2] + A[1] + A[1]*X[1] + EA[1]").unwrap();
            let t = two_stage(x1, x2, Some(a), a);
            let probs = [if a { 1.0 } else { 0.0 }];
            let rows: Vec<Vec<f64>> = [Substitution::UseActual, Substitution::UseProxy, Substitution::UseExpected]
                .into_iter()
                .map(|m| {
                    let ctx = RowContext::new(m, ProxyKind::Prescribed).with_expected(&probs);
                    build_design_row(&spec, &t, 2, &ctx).unwrap()
                })
                .collect();
            prop_assert_eq!(&rows[0], &rows[1]);
            prop_assert_eq!(&rows[0], &rows[2]);
        }

        #[test]
        fn template_matches_scalar_rows(xs in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, any::<bool>(), 0.0..1.0f64), 1..20)) {
            let trajs: Vec<Trajectory> = xs.iter().map(|&(x1, x2, a, _)| two_stage(x1, x2, Some(a), !a)).collect();
            let n = trajs.len();
            let data = Dataset::new(trajs, vec![vec![false; 2]; n], ProxyKind::Prescribed).unwrap();
            let spec = FeatureSpec::parse("1 + X[2]*A[1] + EA[1]*X[1] + Astar[1]").unwrap();
            let probs: Vec<f64> = xs.iter().map(|v| v.3).collect();
            let tpl = DesignTemplate::build(&spec, &data, 2, Substitution::UseExpected, ProxyKind::Prescribed).unwrap();
            let m = tpl.evaluate(std::slice::from_ref(&probs)).unwrap();
            for (i, t) in data.trajectories().iter().enumerate() {
                let e = [probs[i]];
                let ctx = RowContext::new(Substitution::UseExpected, ProxyKind::Prescribed).with_expected(&e);
                let row = build_design_row(&spec, t, 2, &ctx).unwrap();
                for k in 0..spec.len() {
                    prop_assert!((m[(i, k)] - row[k]).abs() < 1e-15);
                }
                prop_assert_eq!(tpl.row(i, &e).unwrap(), row);
            }
        }
    }
}
