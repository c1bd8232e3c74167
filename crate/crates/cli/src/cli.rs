use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dtr_core::simulation::{Estimator, Scenario, TreatmentFreeIndicator};

#[derive(Debug, Parser)]
#[command(name = "dtr-adhere", version, about = "G-estimation of optimal treatment regimes with nonadherence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo simulation study.
    Simulate(SimulateArgs),
    /// Fit a regime to a CSV dataset.
    Analyze(AnalyzeArgs),
    /// Re-estimate under a grid of posited adherence coefficients.
    Sensitivity(SensitivityArgs),
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: dtr_core::Error| e.to_string())
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.parse().map_err(|e: dtr_core::Error| e.to_string())
}

fn parse_indicator(s: &str) -> Result<TreatmentFreeIndicator, String> {
    match s {
        "actual" => Ok(TreatmentFreeIndicator::Actual),
        "prescribed" => Ok(TreatmentFreeIndicator::Prescribed),
        other => Err(format!("unknown indicator '{other}' (expected actual or prescribed)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// s1, s2, s3 or s4.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    /// Sample size per replicate.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Share of individuals whose actual treatment is observed.
    #[arg(long, default_value_t = 0.3)]
    pub validation: f64,
    /// ψ22 for s1, the stage-2 A_1 coefficient for s4; s2 needs 0, s3 ignores it.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub param: f64,
    /// Comma-separated subset of modified-known, modified-fitted, naive-proxy, standard-actual.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    pub estimators: Vec<Estimator>,
    #[arg(long, env = "DTR_ADHERE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Record 95% Wald-sandwich coverage.
    #[arg(long)]
    pub coverage: bool,
    #[arg(long)]
    pub exact_pseudo_outcomes: bool,
    /// Which s3 indicator carries the direct treatment-free effect.
    #[arg(long, default_value = "actual", value_parser = parse_indicator)]
    pub s3_treatment_free_indicator: TreatmentFreeIndicator,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Analysis config (JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "DTR_ADHERE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    /// Analysis config (JSON); its adherence source is replaced by each grid row.
    pub config: PathBuf,
    /// CSV with one adherence coefficient vector per row, columns named `alpha[j]:term`.
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
