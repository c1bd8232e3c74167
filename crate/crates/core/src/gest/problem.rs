//! Designs and responses prepared once per dataset, shared by point
//! estimation and by the stacked estimating equations used for variance
//! estimation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::pseudo::{expected_optimal_gain, pseudo_outcome_modified};
use super::solve::{solve_stage, StageSystem};
use super::{
    AdherenceSource, EstimationConfig, EstimationMode, RegimeFit, StageDiagnostics, StageFit,
};
use crate::error::{Error, Result};
use crate::glm::{expit, fit_logistic, GlmFit};
use crate::model::{Dataset, DesignTemplate, FeatureSpec, ProxyKind, Substitution};

const POSITIVITY_EPS: f64 = 1e-12;

struct StageData {
    contrast: DesignTemplate,
    treatment_free: DesignTemplate,
    assignment: DMatrix<f64>,
    /// The indicator whose assignment is modelled: A or the proxy.
    indicator: DVector<f64>,
    /// Standard modes multiply the contrast by this; modified modes use the
    /// adherence probability instead.
    observed_treatment: Option<DVector<f64>>,
    /// Use the expected-gain pseudo outcome, lagging on the previous stage.
    exact: bool,
}

struct AdherenceDesign {
    /// All rows, for the probabilities.
    all: DMatrix<f64>,
    /// Validation rows only, for the fit.
    validation: DMatrix<f64>,
    validation_index: Vec<usize>,
    validation_actual: Vec<f64>,
}

enum Adherence {
    None,
    Known(Vec<Vec<f64>>),
    Fitted(Vec<AdherenceDesign>),
    Fixed {
        designs: Vec<AdherenceDesign>,
        coefficients: Vec<DVector<f64>>,
    },
}

pub(crate) struct Problem<'a> {
    config: &'a EstimationConfig,
    proxy_kind: ProxyKind,
    outcome: DVector<f64>,
    stages: Vec<StageData>,
    adherence: Adherence,
    validation_rows: Vec<usize>,
}

/// Positions of one stage's parameters inside Θ.
#[derive(Debug, Clone)]
struct StageLayout {
    alpha: Option<Range<usize>>,
    gamma: Range<usize>,
    beta: Range<usize>,
    psi: Range<usize>,
}

fn indicator_vec(values: impl Iterator<Item = Result<bool>>) -> Result<DVector<f64>> {
    let v: Vec<f64> = values.map(|b| b.map(f64::from)).collect::<Result<_>>()?;
    Ok(DVector::from_vec(v))
}

fn adherence_design(
    data: &Dataset,
    stage: usize,
    spec: &FeatureSpec,
    proxy_kind: ProxyKind,
) -> Result<AdherenceDesign> {
    let all = DesignTemplate::build(spec, data, stage, Substitution::UseProxy, proxy_kind)?
        .fixed()?
        .clone();
    let validation_index: Vec<usize> = (0..data.len())
        .filter(|&i| data.is_validation(i, stage))
        .collect();
    if validation_index.is_empty() {
        return Err(Error::InvalidData(format!(
            "no validation rows with the actual treatment at stage {stage}"
        )));
    }
    let validation = all.select_rows(&validation_index);
    let validation_actual = validation_index
        .iter()
        .map(|&i| data.trajectories()[i].actual(stage).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdherenceDesign {
        all,
        validation,
        validation_index,
        validation_actual,
    })
}

pub(crate) fn fit_adherence_model(
    data: &Dataset,
    stage: usize,
    spec: &FeatureSpec,
    proxy_kind: ProxyKind,
) -> Result<(GlmFit, usize)> {
    spec.validate(stage, crate::model::SpecRole::Adherence)?;
    let d = adherence_design(data, stage, spec, proxy_kind)?;
    let fit = fit_logistic(&d.validation, &d.validation_actual, None)?;
    Ok((fit, d.validation_index.len()))
}

impl<'a> Problem<'a> {
    pub(crate) fn new(data: &Dataset, config: &'a EstimationConfig) -> Result<Self> {
        let k = data.stages();
        if config.stages.len() != k {
            return Err(Error::InvalidSpec(format!(
                "{} stage specifications for a {k}-stage dataset",
                config.stages.len()
            )));
        }
        for (j, spec) in config.stages.iter().enumerate() {
            spec.validate(j + 1)?;
        }
        let mode = config.mode;
        let proxy_kind = mode.proxy_kind(data.proxy_kind());
        if mode.is_modified() && config.adherence.is_none() {
            return Err(Error::InvalidSpec(format!(
                "{mode} estimation needs an adherence source"
            )));
        }

        let adherence = Self::prepare_adherence(data, config, proxy_kind)?;

        let mut stages = Vec::with_capacity(k);
        for j in 1..=k {
            let spec = &config.stages[j - 1];
            let build = || -> Result<StageData> {
                let sub = mode.contrast_substitution();
                let contrast = DesignTemplate::build(&spec.contrast, data, j, sub, proxy_kind)?;
                let treatment_free =
                    DesignTemplate::build(&spec.treatment_free, data, j, sub, proxy_kind)?;
                let assignment = DesignTemplate::build(
                    &spec.assignment,
                    data,
                    j,
                    mode.assignment_substitution(),
                    proxy_kind,
                )?
                .fixed()?
                .clone();
                let trajs = data.trajectories();
                let indicator = match mode {
                    EstimationMode::StandardActual => {
                        indicator_vec(trajs.iter().map(|t| t.actual(j)))?
                    }
                    _ => indicator_vec(trajs.iter().map(|t| t.proxy(j, proxy_kind)))?,
                };
                let observed_treatment = (!mode.is_modified()).then(|| indicator.clone());
                let lagged = spec.contrast.substituted_treatment_stages();
                let exact = config.exact_pseudo_outcomes && mode.is_modified() && !lagged.is_empty();
                if exact && lagged != [j - 1] {
                    return Err(Error::InvalidSpec(format!(
                        "expected-gain pseudo outcomes need the contrast at stage {j} to depend on \
                         treatment at stage {} only, found stages {lagged:?}",
                        j - 1
                    )));
                }
                Ok(StageData {
                    contrast,
                    treatment_free,
                    assignment,
                    indicator,
                    observed_treatment,
                    exact,
                })
            };
            stages.push(build().map_err(|e| e.at_stage(j))?);
        }

        Ok(Self {
            config,
            proxy_kind,
            outcome: DVector::from_iterator(data.len(), data.trajectories().iter().map(|t| t.outcome)),
            stages,
            adherence,
            validation_rows: (1..=k).map(|j| data.validation_count(j)).collect(),
        })
    }

    fn prepare_adherence(
        data: &Dataset,
        config: &EstimationConfig,
        proxy_kind: ProxyKind,
    ) -> Result<Adherence> {
        let k = data.stages();
        let spec_at = |j: usize| {
            config.stages[j - 1].adherence.as_ref().ok_or_else(|| {
                Error::InvalidSpec(format!("stage {j} has no adherence model specification"))
            })
        };
        let designs = || -> Result<Vec<AdherenceDesign>> {
            (1..=k)
                .map(|j| adherence_design(data, j, spec_at(j)?, proxy_kind).map_err(|e| e.at_stage(j)))
                .collect()
        };
        Ok(match &config.adherence {
            None => Adherence::None,
            Some(AdherenceSource::Known(f)) => {
                let mut probs = Vec::with_capacity(k);
                for j in 1..=k {
                    let p: Vec<f64> = data.trajectories().iter().map(|t| f(t, j, proxy_kind)).collect();
                    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::InvalidData(format!(
                            "known adherence probability outside [0, 1] at stage {j}"
                        )));
                    }
                    probs.push(p);
                }
                Adherence::Known(probs)
            }
            Some(AdherenceSource::Fitted) => Adherence::Fitted(designs()?),
            Some(source) => {
                let coefficients = source.fixed_coefficients().unwrap_or_default().to_vec();
                if coefficients.len() != k {
                    return Err(Error::InvalidSpec(format!(
                        "{} adherence coefficient vectors for {k} stages",
                        coefficients.len()
                    )));
                }
                for (j, c) in coefficients.iter().enumerate() {
                    let len = spec_at(j + 1)?.len();
                    if c.len() != len {
                        return Err(Error::InvalidSpec(format!(
                            "stage {} adherence model has {len} terms but {} coefficients",
                            j + 1,
                            c.len()
                        )));
                    }
                }
                if let AdherenceSource::External {
                    covariance: Some(cov),
                    ..
                } = source
                {
                    let total: usize = coefficients.iter().map(|c| c.len()).sum();
                    if cov.shape() != (total, total) {
                        return Err(Error::InvalidSpec(format!(
                            "external adherence covariance is {}x{}, expected {total}x{total}",
                            cov.nrows(),
                            cov.ncols()
                        )));
                    }
                }
                // Only the full design is needed, so validation rows are optional here.
                let designs = (1..=k)
                    .map(|j| {
                        let spec = spec_at(j)?;
                        let all = DesignTemplate::build(spec, data, j, Substitution::UseProxy, proxy_kind)?
                            .fixed()?
                            .clone();
                        Ok(AdherenceDesign {
                            validation: DMatrix::zeros(0, all.ncols()),
                            all,
                            validation_index: Vec::new(),
                            validation_actual: Vec::new(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Adherence::Fixed {
                    designs,
                    coefficients,
                }
            }
        })
    }

    fn k(&self) -> usize {
        self.stages.len()
    }

    fn n(&self) -> usize {
        self.outcome.len()
    }

    fn layout(&self) -> (Vec<StageLayout>, usize) {
        let mut next = 0;
        let mut take = |len: usize| {
            let r = next..next + len;
            next += len;
            r
        };
        let mut layout: Vec<Option<StageLayout>> = vec![None; self.k()];
        for j in (1..=self.k()).rev() {
            let st = &self.stages[j - 1];
            let alpha = match &self.adherence {
                Adherence::Fitted(d) => Some(take(d[j - 1].all.ncols())),
                _ => None,
            };
            layout[j - 1] = Some(StageLayout {
                alpha,
                gamma: take(st.assignment.ncols()),
                beta: take(st.treatment_free.ncols()),
                psi: take(st.contrast.ncols()),
            });
        }
        (layout.into_iter().map(Option::unwrap).collect(), next)
    }

    /// Adherence probabilities per stage, from the given coefficients where
    /// they are parametric.
    fn expected(&self, alphas: &[Option<DVector<f64>>]) -> Vec<Vec<f64>> {
        match &self.adherence {
            Adherence::None => Vec::new(),
            Adherence::Known(p) => p.clone(),
            Adherence::Fitted(designs) | Adherence::Fixed { designs, .. } => designs
                .iter()
                .zip(alphas)
                .map(|(d, a)| {
                    let a = a.as_ref().expect("coefficients for every parametric stage");
                    (&d.all * a).iter().map(|&eta| expit(eta)).collect()
                })
                .collect(),
        }
    }

    fn treatment_weight(&self, j: usize, expected: &[Vec<f64>]) -> Result<DVector<f64>> {
        match &self.stages[j - 1].observed_treatment {
            Some(a) => Ok(a.clone()),
            None => expected
                .get(j - 1)
                .map(|p| DVector::from_column_slice(p))
                .ok_or(Error::MissingAdherence { stage: j }),
        }
    }

    /// Pseudo outcome for stage j - 1 from the stage-j response and fit.
    fn next_pseudo(
        &self,
        j: usize,
        lambda: &DMatrix<f64>,
        pi: &DVector<f64>,
        psi: &DVector<f64>,
        v: &DVector<f64>,
        expected: &[Vec<f64>],
    ) -> Result<DVector<f64>> {
        let st = &self.stages[j - 1];
        let c = lambda * psi;
        let next = if st.exact {
            let lag = j - 1;
            let forced = |value: f64| -> Result<DVector<f64>> {
                let mut e = expected.to_vec();
                e[lag - 1] = vec![value; self.n()];
                Ok(st.contrast.evaluate(&e)? * psi)
            };
            let (c1, c0) = (forced(1.0)?, forced(0.0)?);
            let pi_prev = &expected[lag - 1];
            DVector::from_fn(self.n(), |i, _| {
                v[i] - pi[i] * c[i] + expected_optimal_gain(pi_prev[i], c1[i], c0[i])
            })
        } else {
            DVector::from_fn(self.n(), |i, _| pseudo_outcome_modified(v[i], c[i] > 0.0, pi[i], c[i]))
        };
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("pseudo outcome at stage {}", j - 1)));
        }
        Ok(next)
    }

    pub(crate) fn estimate(&self) -> Result<RegimeFit> {
        let k = self.k();
        let mut alphas: Vec<Option<DVector<f64>>> = vec![None; k];
        let mut adherence_iterations = vec![None; k];
        match &self.adherence {
            Adherence::Fitted(designs) => {
                for (j, d) in designs.iter().enumerate() {
                    let fit = fit_logistic(&d.validation, &d.validation_actual, None)
                        .map_err(|e| e.at_stage(j + 1))?;
                    adherence_iterations[j] = Some(fit.iterations);
                    alphas[j] = Some(fit.coefficients);
                }
            }
            Adherence::Fixed { coefficients, .. } => {
                alphas = coefficients.iter().cloned().map(Some).collect();
            }
            _ => {}
        }
        let expected = self.expected(&alphas);

        let mut v = self.outcome.clone();
        let mut pseudo = vec![DVector::zeros(0); k];
        let mut fits = Vec::with_capacity(k);
        for j in (1..=k).rev() {
            let st = &self.stages[j - 1];
            let step = || -> Result<(StageFit, DVector<f64>)> {
                let lambda = st.contrast.evaluate(&expected)?;
                let d = st.treatment_free.evaluate(&expected)?;
                let gamma = fit_logistic(&st.assignment, st.indicator.as_slice(), None)?;
                let p = (&st.assignment * &gamma.coefficients).map(expit);
                let positivity_warnings = p
                    .iter()
                    .filter(|&&q| q <= POSITIVITY_EPS || q >= 1.0 - POSITIVITY_EPS)
                    .count();
                let pi = self.treatment_weight(j, &expected)?;
                let sol = solve_stage(&StageSystem {
                    contrast: &lambda,
                    treatment_free: &d,
                    indicator: &st.indicator,
                    propensity: &p,
                    expected: &pi,
                    response: &v,
                })?;
                let next = self.next_pseudo(j, &lambda, &pi, &sol.psi, &v, &expected)?;
                Ok((
                    StageFit {
                        stage: j,
                        psi: sol.psi,
                        beta: sol.beta,
                        gamma: gamma.coefficients,
                        alpha: alphas[j - 1].clone(),
                        diagnostics: StageDiagnostics {
                            contrast_condition: sol.contrast_condition,
                            system_condition: sol.system_condition,
                            assignment_iterations: gamma.iterations,
                            adherence_iterations: adherence_iterations[j - 1],
                            positivity_warnings,
                            validation_rows: self.validation_rows[j - 1],
                        },
                    },
                    next,
                ))
            };
            let (fit, next) = step().map_err(|e| e.at_stage(j))?;
            pseudo[j - 1] = std::mem::replace(&mut v, next);
            fits.push(fit);
        }
        fits.reverse();
        Ok(RegimeFit {
            mode: self.config.mode,
            proxy_kind: self.proxy_kind,
            stages: fits,
            pseudo_outcomes: pseudo,
            config: self.config.clone(),
        })
    }

    fn theta_from_fit(&self, fit: &RegimeFit, layout: &[StageLayout], dim: usize) -> DVector<f64> {
        let mut theta = DVector::zeros(dim);
        for (sf, l) in fit.stages.iter().zip(layout) {
            if let (Some(r), Some(a)) = (&l.alpha, &sf.alpha) {
                theta.rows_mut(r.start, r.len()).copy_from(a);
            }
            theta.rows_mut(l.gamma.start, l.gamma.len()).copy_from(&sf.gamma);
            theta.rows_mut(l.beta.start, l.beta.len()).copy_from(&sf.beta);
            theta.rows_mut(l.psi.start, l.psi.len()).copy_from(&sf.psi);
        }
        theta
    }

    /// Per-individual stacked scores at Θ, optionally overriding fixed
    /// external adherence coefficients (concatenated in stage order).
    fn scores(
        &self,
        layout: &[StageLayout],
        dim: usize,
        theta: &DVector<f64>,
        external: Option<&DVector<f64>>,
    ) -> Result<DMatrix<f64>> {
        let (n, k) = (self.n(), self.k());
        if theta.len() != dim {
            return Err(Error::Dimension(format!("Θ has {} entries, expected {dim}", theta.len())));
        }
        let mut out = DMatrix::zeros(n, dim);
        let alphas: Vec<Option<DVector<f64>>> = match &self.adherence {
            Adherence::Fitted(designs) => {
                for (d, l) in designs.iter().zip(layout) {
                    let r = l.alpha.clone().expect("fitted layout has α");
                    let a = theta.rows(r.start, r.len());
                    let mu = (&d.validation * a).map(expit);
                    for (row, &i) in d.validation_index.iter().enumerate() {
                        let resid = d.validation_actual[row] - mu[row];
                        for c in 0..r.len() {
                            out[(i, r.start + c)] = d.validation[(row, c)] * resid;
                        }
                    }
                }
                layout
                    .iter()
                    .map(|l| l.alpha.clone().map(|r| theta.rows(r.start, r.len()).into_owned()))
                    .collect()
            }
            Adherence::Fixed { coefficients, .. } => match external {
                Some(flat) => {
                    let mut offset = 0;
                    coefficients
                        .iter()
                        .map(|c| {
                            let a = flat.rows(offset, c.len()).into_owned();
                            offset += c.len();
                            Some(a)
                        })
                        .collect()
                }
                None => coefficients.iter().cloned().map(Some).collect(),
            },
            _ => vec![None; k],
        };
        let expected = self.expected(&alphas);

        let mut v = self.outcome.clone();
        for j in (1..=k).rev() {
            let st = &self.stages[j - 1];
            let l = &layout[j - 1];
            let gamma = theta.rows(l.gamma.start, l.gamma.len());
            let beta = theta.rows(l.beta.start, l.beta.len());
            let psi = theta.rows(l.psi.start, l.psi.len()).into_owned();
            let lambda = st.contrast.evaluate(&expected)?;
            let d = st.treatment_free.evaluate(&expected)?;
            let p = (&st.assignment * gamma).map(expit);
            let w = &st.indicator - &p;
            let pi = self.treatment_weight(j, &expected)?;
            let r = &v - (&lambda * &psi).component_mul(&pi) - &d * beta;
            for i in 0..n {
                for c in 0..l.gamma.len() {
                    out[(i, l.gamma.start + c)] = st.assignment[(i, c)] * w[i];
                }
                for c in 0..l.beta.len() {
                    out[(i, l.beta.start + c)] = d[(i, c)] * r[i];
                }
                for c in 0..l.psi.len() {
                    out[(i, l.psi.start + c)] = lambda[(i, c)] * w[i] * r[i];
                }
            }
            if j > 1 {
                v = self.next_pseudo(j, &lambda, &pi, &psi, &v, &expected)?;
            }
        }
        Ok(out)
    }
}

/// The stacked estimating equations of a fitted regime, as a function of
/// the parameter vector Θ.
///
/// Θ holds, for stages K down to 1, the fitted adherence coefficients (when
/// estimated from validation rows), then the assignment, treatment-free and
/// contrast coefficients. Known, external and sensitivity adherence
/// coefficients are held fixed.
pub struct StackedEquations<'a> {
    problem: Problem<'a>,
    layout: Vec<StageLayout>,
    dim: usize,
    theta_hat: DVector<f64>,
}

impl<'a> StackedEquations<'a> {
    pub fn new(data: &Dataset, fit: &'a RegimeFit) -> Result<Self> {
        let problem = Problem::new(data, fit.config())?;
        let (layout, dim) = problem.layout();
        let theta_hat = problem.theta_from_fit(fit, &layout, dim);
        Ok(Self {
            problem,
            layout,
            dim,
            theta_hat,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    /// Θ positions of the contrast parameters, stage 1 first.
    pub fn psi_indices(&self) -> Vec<usize> {
        self.layout.iter().flat_map(|l| l.psi.clone()).collect()
    }

    /// Θ positions of the fitted adherence coefficients, one range per
    /// stage that has them.
    pub fn adherence_ranges(&self) -> Vec<Range<usize>> {
        self.layout.iter().filter_map(|l| l.alpha.clone()).collect()
    }

    /// Names of the Θ entries, e.g. `psi[2]:X[2]`.
    pub fn labels(&self) -> Vec<String> {
        let mut labels = vec![String::new(); self.dim];
        for (j, (l, spec)) in self.layout.iter().zip(&self.problem.config.stages).enumerate() {
            let stage = j + 1;
            let mut put = |r: &Range<usize>, name: &str, terms: Vec<String>| {
                for (pos, t) in r.clone().zip(terms) {
                    labels[pos] = format!("{name}[{stage}]:{t}");
                }
            };
            if let (Some(r), Some(a)) = (&l.alpha, &spec.adherence) {
                put(r, "alpha", a.term_labels());
            }
            put(&l.gamma, "gamma", spec.assignment.term_labels());
            put(&l.beta, "beta", spec.treatment_free.term_labels());
            put(&l.psi, "psi", spec.contrast.term_labels());
        }
        labels
    }

    /// n x dim matrix of per-individual score contributions at Θ.
    pub fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.problem.scores(&self.layout, self.dim, theta, None)
    }

    /// External adherence coefficients (stage order) and their covariance,
    /// when supplied.
    pub fn external_adherence(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        match &self.problem.config.adherence {
            Some(AdherenceSource::External {
                coefficients,
                covariance: Some(cov),
            }) => {
                let flat: Vec<f64> = coefficients.iter().flat_map(|c| c.iter().copied()).collect();
                Some((DVector::from_vec(flat), cov.clone()))
            }
            _ => None,
        }
    }

    /// Scores with the external adherence coefficients replaced by `alpha`.
    pub fn scores_with_external(
        &self,
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.problem.scores(&self.layout, self.dim, theta, Some(alpha))
    }
}
