//! Pseudo outcomes: the outcome adjusted as if later stages had been
//! treated optimally.

/// Standard form, Ṽ_{j+1} + (A_opt - A)·C.
pub fn pseudo_outcome_standard(v_next: f64, a: bool, a_opt: bool, contrast_value: f64) -> f64 {
    v_next + (f64::from(a_opt) - f64::from(a)) * contrast_value
}

/// Form used when treatment is only known through its adherence probability.
pub fn pseudo_outcome_modified(v_next: f64, a_opt: bool, pi_star: f64, contrast_star: f64) -> f64 {
    v_next + (f64::from(a_opt) - pi_star) * contrast_star
}

/// Expected value of A_opt·C when the only treatment in the contrast is the
/// previous stage's, taken with probability `pi_prev`.
pub fn expected_optimal_gain(pi_prev: f64, contrast_treated: f64, contrast_untreated: f64) -> f64 {
    let gain = |c: f64| if c > 0.0 { c } else { 0.0 };
    pi_prev * gain(contrast_treated) + (1.0 - pi_prev) * gain(contrast_untreated)
}

/// `v_next` plus [`expected_optimal_gain`].
pub fn pseudo_outcome_exact(
    v_next: f64,
    pi_prev: f64,
    contrast_treated: f64,
    contrast_untreated: f64,
) -> f64 {
    v_next + expected_optimal_gain(pi_prev, contrast_treated, contrast_untreated)
}

/// Optimal decision for a contrast value; ties go to no treatment.
pub fn optimal_treatment(contrast_value: f64) -> bool {
    contrast_value > 0.0
}
