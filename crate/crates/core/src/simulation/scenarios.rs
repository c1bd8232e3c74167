//! Data generators for the four simulation studies.
//!
//! Outcomes use the regret form Y = ν + ε − Σ_j (A_j^opt − A_j)·C_j with
//! A_j^opt = I(C_j > 0), so the stated contrasts are the true blips at every
//! stage. ε ~ N(0, 2).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::glm::expit;
use crate::model::{Dataset, ProxyKind, StageRecord, Trajectory};

pub const COVARIATE: &str = "X";
const NOISE_SD: f64 = std::f64::consts::SQRT_2;

/// Pr(A = 1 | A*, X) in the first three scenarios.
pub fn prescribed_adherence_probability(x: f64, prescribed: bool) -> f64 {
    expit(-4.6 - 0.83 * x + 7.5 * f64::from(prescribed))
}

/// The same coefficients as a vector for the formula `1 + X[j] + Astar[j]`.
pub const PRESCRIBED_ADHERENCE_COEFFICIENTS: [f64; 3] = [-4.6, -0.83, 7.5];

/// Pr(A = 1 | X) in the reported-treatment scenario.
pub fn reported_treatment_probability(x: f64) -> f64 {
    0.5 + 0.3 * x
}

/// Pr(A** = 1 | A, X) in the reported-treatment scenario.
pub fn reporting_probability(x: f64, actual: bool) -> f64 {
    if actual {
        0.9 - 0.05 * x
    } else {
        0.05 + 0.045 * x + 0.005 * x * x
    }
}

/// Pr(A = 1 | A**, X) by Bayes' rule over the reporting mechanism.
pub fn reported_adherence_probability(x: f64, reported: bool) -> f64 {
    let prior = reported_treatment_probability(x);
    let like = |a: bool| {
        let p = reporting_probability(x, a);
        if reported {
            p
        } else {
            1.0 - p
        }
    };
    let treated = prior * like(true);
    treated / (treated + (1.0 - prior) * like(false))
}

/// Which indicator carries the 0.5 direct effect in the coverage scenario's
/// stage-2 treatment-free model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentFreeIndicator {
    /// 0.5·A_1: a genuine treatment effect, so stage-1 blips stay at truth.
    #[default]
    Actual,
    /// 0.5·A*_1: a direct effect of prescription (violates the condition that
    /// prescription carries no information once treatment is known).
    Prescribed,
}

fn bern<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn record(x: f64, prescribed: Option<bool>, actual: bool, reported: Option<bool>) -> StageRecord {
    StageRecord {
        covariates: BTreeMap::from([(COVARIATE.to_string(), x)]),
        prescribed,
        actual: Some(actual),
        reported,
    }
}

/// Marks `round(fraction · n)` individuals, chosen without replacement, as
/// validated at every stage. Drawn after the data so the same seed gives the
/// same data across validation fractions.
fn with_validation<R: Rng + ?Sized>(
    trajectories: Vec<Trajectory>,
    fraction: f64,
    kind: ProxyKind,
    rng: &mut R,
) -> Dataset {
    let n = trajectories.len();
    let k = trajectories[0].stages.len();
    let m = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut flags = vec![vec![false; k]; n];
    for i in sample(rng, n, m) {
        flags[i] = vec![true; k];
    }
    Dataset::new(trajectories, flags, kind).expect("generated data are well formed")
}

fn id(i: usize) -> String {
    format!("{}", i + 1)
}

/// Two-stage prescribed-treatment scenario with stage-2 contrast
/// 1 + X_2 + ψ22·A_1.
pub fn generate_s1<R: Rng + ?Sized>(n: usize, psi22: f64, validation_fraction: f64, rng: &mut R) -> Dataset {
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let x1d = Normal::new(1.0, 1.0).expect("valid sd");
    let x2d = Normal::new(1.0, 2.0).expect("valid sd");
    let trajectories = (0..n)
        .map(|i| {
            let x1 = x1d.sample(rng);
            let s1 = bern(rng, expit(x1));
            let a1 = bern(rng, prescribed_adherence_probability(x1, s1));
            let x2 = x2d.sample(rng);
            let s2 = bern(rng, expit(x2));
            let a2 = bern(rng, prescribed_adherence_probability(x2, s2));
            let eps = noise.sample(rng);
            let c1 = 1.0 + x1;
            let c2 = 1.0 + x2 + psi22 * f64::from(a1);
            let regret = |c: f64, a: bool| (f64::from(c > 0.0) - f64::from(a)) * c;
            Trajectory {
                id: id(i),
                stages: vec![record(x1, Some(s1), a1, None), record(x2, Some(s2), a2, None)],
                outcome: x1 + eps - regret(c1, a1) - regret(c2, a2),
            }
        })
        .collect();
    with_validation(trajectories, validation_fraction, ProxyKind::Prescribed, rng)
}

/// Coverage scenario: shifted assignment, stage-2 contrast 1 + X_2 − A_1 and
/// a 0.5 direct effect in the stage-2 treatment-free model.
pub fn generate_s3<R: Rng + ?Sized>(
    n: usize,
    validation_fraction: f64,
    indicator: TreatmentFreeIndicator,
    rng: &mut R,
) -> Dataset {
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let x1d = Normal::new(1.0, 1.0).expect("valid sd");
    let x2d = Normal::new(1.0, 2.0).expect("valid sd");
    let trajectories = (0..n)
        .map(|i| {
            let x1 = x1d.sample(rng);
            let s1 = bern(rng, expit(0.5 + x1));
            let a1 = bern(rng, prescribed_adherence_probability(x1, s1));
            let x2 = x2d.sample(rng);
            let s2 = bern(rng, expit(-0.5 + x2));
            let a2 = bern(rng, prescribed_adherence_probability(x2, s2));
            let eps = noise.sample(rng);
            let c1 = 1.0 + x1;
            let c2 = 1.0 + x2 - f64::from(a1);
            let opt = |c: f64| f64::from(c > 0.0);
            let outcome = match indicator {
                // The 0.5·A_1 term is part of the stage-1 blip, so the
                // stage-1 regret uses C_1 − 0.5 to keep the blip at C_1.
                TreatmentFreeIndicator::Actual => {
                    x1 + 0.5 * f64::from(a1)
                        - (opt(c1) - f64::from(a1)) * (c1 - 0.5)
                        - (opt(c2) - f64::from(a2)) * c2
                }
                TreatmentFreeIndicator::Prescribed => {
                    x1 + 0.5 * f64::from(s1)
                        - (opt(c1) - f64::from(a1)) * c1
                        - (opt(c2) - f64::from(a2)) * c2
                }
            } + eps;
            Trajectory {
                id: id(i),
                stages: vec![record(x1, Some(s1), a1, None), record(x2, Some(s2), a2, None)],
                outcome,
            }
        })
        .collect();
    with_validation(trajectories, validation_fraction, ProxyKind::Prescribed, rng)
}

/// Reported-treatment scenario with stage-2 contrast 1 + ψ21·A_1.
pub fn generate_s4<R: Rng + ?Sized>(n: usize, psi21: f64, validation_fraction: f64, rng: &mut R) -> Dataset {
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let trajectories = (0..n)
        .map(|i| {
            let mut x = || f64::from(rng.random_range(0..3u8)) - 1.0;
            let x1 = x();
            let x2 = x();
            let a1 = bern(rng, reported_treatment_probability(x1));
            let r1 = bern(rng, reporting_probability(x1, a1));
            let a2 = bern(rng, reported_treatment_probability(x2));
            let r2 = bern(rng, reporting_probability(x2, a2));
            let eps = noise.sample(rng);
            let c1 = 1.0 + x1;
            let c2 = 1.0 + psi21 * f64::from(a1);
            let regret = |c: f64, a: bool| (f64::from(c > 0.0) - f64::from(a)) * c;
            Trajectory {
                id: id(i),
                stages: vec![record(x1, None, a1, Some(r1)), record(x2, None, a2, Some(r2))],
                outcome: x1 + eps - regret(c1, a1) - regret(c2, a2),
            }
        })
        .collect();
    with_validation(trajectories, validation_fraction, ProxyKind::Reported, rng)
}
