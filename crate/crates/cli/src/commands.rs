//! The three subcommands. Each one validates its inputs and computes every
//! result before the output directory is touched.

use std::io::Read;
use std::path::Path;

use dtr_core::gest::{
    estimate_regime, recommend, sensitivity_sweep, EstimationConfig, EstimationMode, RegimeFit, StageModelSpec,
};
use dtr_core::inference::{bootstrap, regime_sandwich, wald_intervals, IntervalMethod, IntervalSet};
use dtr_core::model::{Dataset, ProxyKind};
use dtr_core::simulation::{run_replications_lenient, Estimator, RawEstimate, ScenarioConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cli::{AnalyzeArgs, Command, SensitivityArgs, SimulateArgs};
use crate::config::{AnalysisConfig, InferenceMethod};
use crate::data::{load_dataset, LoadedData};
use crate::error::{CliError, CliResult};

/// Seed used when neither a flag, the environment, nor the config gives one.
pub const DEFAULT_SEED: u64 = 1;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(args) => simulate(&args),
        Command::Analyze(args) => analyze(&args),
        Command::Sensitivity(args) => sensitivity(&args),
    }
}

fn check_jobs(jobs: Option<usize>) -> CliResult<()> {
    if jobs == Some(0) {
        return Err(CliError::user("--jobs must be at least 1"));
    }
    Ok(())
}

fn check_out(out: &Path) -> CliResult<()> {
    if out.exists() && !out.is_dir() {
        return Err(CliError::user(format!("{} exists and is not a directory", out.display())));
    }
    Ok(())
}

fn write_outputs(out: &Path, files: &[(&str, String)]) -> CliResult<()> {
    let fail = |e: std::io::Error| CliError::user(format!("cannot write to {}: {e}", out.display()));
    std::fs::create_dir_all(out).map_err(fail)?;
    for (name, content) in files {
        std::fs::write(out.join(name), content).map_err(fail)?;
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_string(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> CliResult<String> {
    let fail = |e: csv::Error| CliError::Numerical(format!("cannot format CSV: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Numerical(e.to_string()))
}

fn cell(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or(String::new(), |x| x.to_string())
}

// ---------------------------------------------------------------------------
// simulate

pub fn scenario_config(args: &SimulateArgs) -> ScenarioConfig {
    let estimators = if args.estimators.is_empty() {
        Estimator::ALL.to_vec()
    } else {
        args.estimators.clone()
    };
    let mut config = ScenarioConfig::new(
        args.scenario,
        args.n,
        args.validation,
        args.param,
        args.reps,
        args.seed.unwrap_or(DEFAULT_SEED),
    )
    .with_estimators(&estimators)
    .with_coverage(args.coverage);
    config.exact_pseudo_outcomes = args.exact_pseudo_outcomes;
    config.s3_treatment_free_indicator = args.s3_treatment_free_indicator;
    config
}

/// `replicate,estimator,stage,parameter,value`, one row per estimate.
pub fn estimates_csv(raw: &[RawEstimate]) -> CliResult<String> {
    csv_string(
        &["replicate", "estimator", "stage", "parameter", "value"],
        raw.iter().map(|r| {
            vec![
                r.replicate.to_string(),
                r.estimator.to_string(),
                r.stage.to_string(),
                r.parameter.clone(),
                r.value.to_string(),
            ]
        }),
    )
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    check_jobs(args.jobs)?;
    check_out(&args.out)?;
    let config = scenario_config(args);
    config.validate()?;
    let (summary, breach) = run_replications_lenient(&config, args.jobs)?;
    // A breached failure threshold still leaves its summary behind, with
    // the failure counts, before exiting 3.
    write_outputs(
        &args.out,
        &[
            ("config.json", to_json(&config)?),
            ("summary.json", to_json(&summary)?),
            ("estimates.csv", estimates_csv(&summary.raw)?),
        ],
    )?;
    match breach {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: EstimationMode,
    pub proxy_kind: ProxyKind,
    pub rows: RowCounts,
    pub psi: Vec<PsiEstimate>,
    pub inference: Option<InferenceReport>,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCounts {
    pub read: usize,
    pub used: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub stage: usize,
    pub term: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: IntervalMethod,
    pub level: f64,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub failed_replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub terms: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Treat when the sum of values times terms is positive.
    pub rule: Coefficients,
    /// Coefficients of the treatment-free part of the outcome model.
    pub treatment_free: Coefficients,
    pub assignment: Coefficients,
    pub adherence: Option<Coefficients>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub validation_rows: usize,
    pub positivity_warnings: usize,
    pub contrast_condition: Option<f64>,
    pub system_condition: Option<f64>,
    pub assignment_iterations: usize,
    pub adherence_iterations: Option<usize>,
}

fn coefficients(spec: &dtr_core::model::FeatureSpec, values: &DVector<f64>) -> Coefficients {
    Coefficients {
        terms: spec.term_labels(),
        values: values.iter().copied().collect(),
    }
}

fn stage_reports(fit: &RegimeFit, specs: &[StageModelSpec]) -> Vec<StageReport> {
    fit.stages
        .iter()
        .zip(specs)
        .map(|(s, spec)| {
            let d = &s.diagnostics;
            StageReport {
                stage: s.stage,
                rule: coefficients(&spec.contrast, &s.psi),
                treatment_free: coefficients(&spec.treatment_free, &s.beta),
                assignment: coefficients(&spec.assignment, &s.gamma),
                adherence: match (&spec.adherence, &s.alpha) {
                    (Some(a), Some(alpha)) => Some(coefficients(a, alpha)),
                    _ => None,
                },
                diagnostics: Diagnostics {
                    validation_rows: d.validation_rows,
                    positivity_warnings: d.positivity_warnings,
                    contrast_condition: Some(d.contrast_condition).filter(|c| c.is_finite()),
                    system_condition: Some(d.system_condition).filter(|c| c.is_finite()),
                    assignment_iterations: d.assignment_iterations,
                    adherence_iterations: d.adherence_iterations,
                },
            }
        })
        .collect()
}

/// Fits the configured regime and computes the requested intervals.
pub fn fit_report(config: &AnalysisConfig, loaded: &LoadedData, seed: u64, jobs: Option<usize>) -> CliResult<FitReport> {
    let estimation = config.estimation_config()?;
    let data = &loaded.dataset;
    let fit = estimate_regime(data, &estimation)?;
    let psi_hat = fit.psi();
    let level = config.inference.level;

    let (intervals, std_errors, inference): (Option<IntervalSet>, Option<Vec<f64>>, _) = match config.inference.method {
        InferenceMethod::None => (None, None, None),
        InferenceMethod::WaldSandwich => {
            let sw = regime_sandwich(data, &fit)?;
            let se = sw.sigma_psi.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
            let report = InferenceReport {
                method: IntervalMethod::WaldSandwich,
                level,
                seed: None,
                replicates: None,
                failed_replicates: None,
            };
            (Some(wald_intervals(&psi_hat, &sw.sigma_psi, level)?), Some(se), Some(report))
        }
        InferenceMethod::BootstrapPercentile => {
            let b = bootstrap(data, &estimation, config.inference.replicates, level, seed, jobs)?;
            let report = InferenceReport {
                method: IntervalMethod::BootstrapPercentile,
                level,
                seed: Some(seed),
                replicates: Some(config.inference.replicates),
                failed_replicates: Some(b.failures),
            };
            (Some(b.intervals), None, Some(report))
        }
    };

    let psi = fit
        .psi_labels()
        .into_iter()
        .enumerate()
        .map(|(k, (stage, term))| PsiEstimate {
            stage,
            term,
            estimate: psi_hat[k],
            std_error: std_errors.as_ref().map(|s| s[k]),
            lower: intervals.as_ref().map(|i| i.intervals[k].lower),
            upper: intervals.as_ref().map(|i| i.intervals[k].upper),
        })
        .collect();
    Ok(FitReport {
        mode: fit.mode,
        proxy_kind: fit.proxy_kind,
        rows: RowCounts {
            read: loaded.rows_read,
            used: data.len(),
            dropped: loaded.rows_dropped,
        },
        psi,
        inference,
        stages: stage_reports(&fit, &estimation.stages),
    })
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    check_jobs(args.jobs)?;
    let config = AnalysisConfig::load(&args.config)?;
    check_out(&args.out)?;
    let loaded = load_dataset(&config)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let report = fit_report(&config, &loaded, seed, args.jobs)?;
    if loaded.rows_dropped > 0 {
        eprintln!(
            "complete-case analysis: dropped {} of {} rows",
            loaded.rows_dropped, loaded.rows_read
        );
    }
    write_outputs(&args.out, &[("fit.json", to_json(&report)?)])
}

// ---------------------------------------------------------------------------
// sensitivity

/// Grid column name for an adherence term.
pub fn grid_column(stage: usize, term: &str) -> String {
    format!("alpha[{stage}]:{term}")
}

/// Reads a grid of adherence coefficients, one point per row. The header
/// must name every adherence term of every stage exactly once.
pub fn read_grid<R: Read>(reader: R, source: &str, specs: &[StageModelSpec]) -> CliResult<Vec<Vec<DVector<f64>>>> {
    let mut expected = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        let adherence = spec.adherence.as_ref().ok_or_else(|| {
            CliError::user(format!("stage {} has no adherence model to vary", j + 1))
        })?;
        expected.extend(adherence.term_labels().iter().map(|t| (j, grid_column(j + 1, t))));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::user(format!("{source}: cannot read header: {e}")))?
        .clone();
    let mut positions = Vec::with_capacity(expected.len());
    for (_, name) in &expected {
        let found: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.trim() == name).map(|(c, _)| c).collect();
        match found.as_slice() {
            [c] => positions.push(*c),
            [] => return Err(CliError::user(format!("{source}: grid is missing column `{name}`"))),
            _ => return Err(CliError::user(format!("{source}: grid column `{name}` appears twice"))),
        }
    }
    if let Some(extra) = headers.iter().find(|h| !expected.iter().any(|(_, n)| n == h.trim())) {
        return Err(CliError::user(format!("{source}: unexpected grid column `{extra}`")));
    }

    let mut grid = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::user(format!("{source}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut stages: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
        for ((stage, name), &c) in expected.iter().zip(&positions) {
            let text = record[c].trim();
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => stages[*stage].push(v),
                _ => {
                    return Err(CliError::user(format!(
                        "{source}: row {line}, column {} (`{name}`): cannot read '{text}' as a finite number",
                        c + 1
                    )))
                }
            }
        }
        grid.push(stages.into_iter().map(DVector::from_vec).collect());
    }
    if grid.is_empty() {
        return Err(CliError::user(format!("{source}: grid has no rows")));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub stage: usize,
    pub parameter: String,
    pub estimate: Option<f64>,
    /// Share of stage decisions matching the first point's recommendations.
    pub agreement: Option<f64>,
}

fn recommendations(fit: &RegimeFit, data: &Dataset) -> CliResult<Vec<bool>> {
    let mut out = Vec::with_capacity(data.len() * data.stages());
    for t in data.trajectories() {
        for j in 1..=data.stages() {
            out.push(recommend(fit, t, j)?);
        }
    }
    Ok(out)
}

/// Estimates at every grid point. A point that fails to estimate gets
/// empty cells; the sweep fails only if every point does.
pub fn sweep(data: &Dataset, base: &EstimationConfig, grid: &[Vec<DVector<f64>>]) -> CliResult<Vec<SweepRow>> {
    let fits = sensitivity_sweep(data, base, grid)?;
    if let Some(Err(first)) = fits.iter().find(|f| f.is_err()) {
        if fits.iter().all(|f| f.is_err()) {
            return Err(CliError::Numerical(format!("every grid point failed (first: {first})")));
        }
    }
    let reference = match &fits[0] {
        Ok(fit) => Some(recommendations(fit, data)?),
        Err(_) => None,
    };
    let labels: Vec<(usize, String)> = base
        .stages
        .iter()
        .enumerate()
        .flat_map(|(j, s)| s.contrast.term_labels().into_iter().map(move |t| (j + 1, t)))
        .collect();
    let mut rows = Vec::new();
    for (point, fit) in fits.iter().enumerate() {
        if let Err(e) = fit {
            eprintln!("grid point {point} failed: {e}");
        }
        let fit = fit.as_ref().ok();
        let agreement = match (fit, &reference) {
            (Some(fit), Some(reference)) => {
                let recs = recommendations(fit, data)?;
                let same = recs.iter().zip(reference).filter(|(a, b)| a == b).count();
                Some(same as f64 / reference.len() as f64)
            }
            _ => None,
        };
        let psi = fit.map(|f| f.psi());
        for (k, (stage, term)) in labels.iter().enumerate() {
            rows.push(SweepRow {
                point,
                stage: *stage,
                parameter: term.clone(),
                estimate: psi.as_ref().map(|p| p[k]),
                agreement,
            });
        }
    }
    Ok(rows)
}

/// `point,stage,parameter,estimate,agreement`; `point` counts grid rows from 0.
pub fn sweep_csv(rows: &[SweepRow]) -> CliResult<String> {
    csv_string(
        &["point", "stage", "parameter", "estimate", "agreement"],
        rows.iter().map(|r| {
            vec![
                r.point.to_string(),
                r.stage.to_string(),
                r.parameter.clone(),
                cell(r.estimate),
                cell(r.agreement),
            ]
        }),
    )
}

pub fn sensitivity(args: &SensitivityArgs) -> CliResult<()> {
    let config = AnalysisConfig::load(&args.config)?;
    check_out(&args.out)?;
    if !config.mode.is_modified() {
        return Err(CliError::user(format!(
            "sensitivity analysis needs a modified mode, not {}",
            config.mode
        )));
    }
    let base = config.estimation_config()?;
    let file = std::fs::File::open(&args.grid)
        .map_err(|e| CliError::user(format!("cannot open grid {}: {e}", args.grid.display())))?;
    let grid = read_grid(file, &args.grid.display().to_string(), &base.stages)?;
    let loaded = load_dataset(&config)?;
    let rows = sweep(&loaded.dataset, &base, &grid)?;
    write_outputs(&args.out, &[("sweep.csv", sweep_csv(&rows)?)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<StageModelSpec> {
        vec![StageModelSpec::parse(1, "1 + X[1]", "1 + X[1]", "1 + X[1]", Some("1 + X[1] + Astar[1]")).unwrap()]
    }

    #[test]
    fn grid_header_must_match_terms() {
        let ok = "alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1]\n0,1,2\n3,4,5\n";
        let grid = read_grid(ok.as_bytes(), "g", &specs()).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[1][0].as_slice(), &[3.0, 4.0, 5.0]);

        let reordered = "alpha[1]:Astar[1],alpha[1]:1,alpha[1]:X[1]\n2,0,1\n";
        assert_eq!(read_grid(reordered.as_bytes(), "g", &specs()).unwrap()[0][0].as_slice(), &[0.0, 1.0, 2.0]);

        for bad in [
            "alpha[1]:1,alpha[1]:X[1]\n0,1\n",
            "alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1],extra\n0,1,2,3\n",
            "alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1]\n",
            "alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1]\n0,x,2\n",
            "alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1]\n0,1\n",
        ] {
            let err = read_grid(bad.as_bytes(), "g", &specs()).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn csv_cells_use_shortest_round_trip() {
        assert_eq!(cell(Some(0.1 + 0.2)), "0.30000000000000004");
        assert_eq!(cell(None), "");
        assert_eq!(cell(Some(f64::NAN)), "");
    }
}
