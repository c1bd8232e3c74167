//! CSV input and export.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use dtr_core::gest::EstimationMode;
use dtr_core::model::{Dataset, ProxyKind, StageRecord, Trajectory};

use crate::config::{AdherenceConfig, AnalysisConfig, StageColumns, KNOWN_ADHERENCE_KEY};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub rows_read: usize,
    /// Rows dropped by complete-case filtering.
    pub rows_dropped: usize,
}

struct StageIndex {
    covariates: Vec<(String, usize)>,
    proxy: Option<usize>,
    actual: Option<usize>,
    validation: Option<usize>,
    known: Option<usize>,
}

/// Loads the config's input file.
pub fn load_dataset(config: &AnalysisConfig) -> CliResult<LoadedData> {
    let file = std::fs::File::open(&config.input)
        .map_err(|e| CliError::user(format!("cannot open input {}: {e}", config.input.display())))?;
    read_dataset(config, file, &config.input.display().to_string())
}

/// Parses a CSV with a header row, one row per individual. Empty cells are
/// missing; rows missing anything the analysis needs are dropped.
pub fn read_dataset<R: Read>(config: &AnalysisConfig, reader: R, source: &str) -> CliResult<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::user(format!("{source}: cannot read header: {e}")))?
        .clone();
    let mut index = HashMap::new();
    for (c, h) in headers.iter().enumerate() {
        if index.insert(h.to_string(), c).is_some() {
            return Err(CliError::user(format!("{source}: duplicate column `{h}` in header")));
        }
    }
    let col = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| CliError::user(format!("{source}: column `{name}` not found in header")))
    };
    let opt_col = |name: &Option<String>| name.as_deref().map(col).transpose();

    let kind = config.dataset_proxy_kind()?;
    let outcome = col(&config.outcome)?;
    let id = opt_col(&config.id)?;
    let stages = config
        .columns
        .iter()
        .map(|s| {
            Ok(StageIndex {
                covariates: s
                    .covariates
                    .iter()
                    .map(|(name, column)| Ok((name.clone(), col(column)?)))
                    .collect::<CliResult<_>>()?,
                proxy: opt_col(&s.proxy)?,
                actual: opt_col(&s.actual)?,
                validation: opt_col(&s.validation)?,
                known: opt_col(&s.known_adherence)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let needs_actual = config.mode == EstimationMode::StandardActual;
    let needs_known = matches!(config.adherence, Some(AdherenceConfig::Known));

    let mut trajectories = Vec::new();
    let mut validation = Vec::new();
    let mut rows_read = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CliError::user(format!("{source}: {e}")))?;
        rows_read += 1;
        let line = record.position().map_or(r as u64 + 2, |p| p.line());
        let at = |c: usize| format!("{source}: row {line}, column {} (`{}`)", c + 1, &headers[c]);
        let number = |c: usize| -> CliResult<Option<f64>> {
            let cell = record[c].trim();
            if cell.is_empty() {
                return Ok(None);
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(CliError::user(format!("{}: cannot read '{cell}' as a finite number", at(c)))),
            }
        };
        let binary = |c: usize| -> CliResult<Option<bool>> {
            match record[c].trim().to_ascii_lowercase().as_str() {
                "" => Ok(None),
                "1" | "true" => Ok(Some(true)),
                "0" | "false" => Ok(Some(false)),
                other => Err(CliError::user(format!("{}: expected 0 or 1, found '{other}'", at(c)))),
            }
        };

        let mut complete = true;
        let outcome_value = number(outcome)?;
        complete &= outcome_value.is_some();
        let mut records = Vec::with_capacity(stages.len());
        let mut flags = Vec::with_capacity(stages.len());
        for s in &stages {
            let mut covariates = BTreeMap::new();
            for (name, c) in &s.covariates {
                match number(*c)? {
                    Some(v) => {
                        covariates.insert(name.clone(), v);
                    }
                    None => complete = false,
                }
            }
            let proxy = s.proxy.map(binary).transpose()?.flatten();
            let actual = s.actual.map(binary).transpose()?.flatten();
            let flag = match s.validation {
                Some(c) => binary(c)?.unwrap_or(false),
                None => actual.is_some(),
            };
            if flag && actual.is_none() {
                let c = s.validation.or(s.actual).unwrap_or(0);
                return Err(CliError::user(format!(
                    "{}: validation row without an actual treatment",
                    at(c)
                )));
            }
            if let Some(c) = s.known {
                match number(c)? {
                    Some(p) if !(0.0..=1.0).contains(&p) => {
                        return Err(CliError::user(format!("{}: probability {p} outside [0, 1]", at(c))));
                    }
                    Some(p) => {
                        covariates.insert(KNOWN_ADHERENCE_KEY.to_string(), p);
                    }
                    None => complete &= !needs_known,
                }
            }
            complete &= if needs_actual { actual.is_some() } else { proxy.is_some() };
            let (prescribed, reported) = match kind {
                ProxyKind::Prescribed => (proxy, None),
                ProxyKind::Reported => (None, proxy),
            };
            records.push(StageRecord {
                covariates,
                prescribed,
                actual,
                reported,
            });
            flags.push(flag);
        }
        if !complete {
            continue;
        }
        let id = match id {
            Some(c) => record[c].trim().to_string(),
            None => (r + 1).to_string(),
        };
        trajectories.push(Trajectory {
            id,
            stages: records,
            outcome: outcome_value.unwrap_or(f64::NAN),
        });
        validation.push(flags);
    }
    if trajectories.is_empty() {
        return Err(CliError::user(format!(
            "{source}: no complete rows among {rows_read} read"
        )));
    }
    let rows_dropped = rows_read - trajectories.len();
    let dataset = Dataset::new(trajectories, validation, kind).map_err(|e| CliError::user(format!("{source}: {e}")))?;
    Ok(LoadedData {
        dataset,
        rows_read,
        rows_dropped,
    })
}

fn exported_covariates(data: &Dataset, stage: usize) -> Vec<String> {
    data.covariate_names(stage)
        .into_iter()
        .filter(|n| !n.starts_with('@'))
        .map(str::to_string)
        .collect()
}

/// Column bindings matching [`write_dataset_csv`].
pub fn export_columns(data: &Dataset) -> Vec<StageColumns> {
    (1..=data.stages())
        .map(|j| StageColumns {
            covariates: exported_covariates(data, j)
                .into_iter()
                .map(|n| {
                    let column = format!("{n}_{j}");
                    (n, column)
                })
                .collect(),
            proxy: Some(format!("proxy_{j}")),
            actual: Some(format!("actual_{j}")),
            validation: Some(format!("validation_{j}")),
            known_adherence: None,
        })
        .collect()
}

/// Writes a dataset as CSV: `id`, then per stage j the covariates as
/// `NAME_j`, `proxy_j`, `actual_j`, `validation_j`, then the outcome `Y`.
/// Numbers use shortest round-trip formatting.
pub fn write_dataset_csv<W: Write>(data: &Dataset, writer: W) -> CliResult<()> {
    let io = |e: csv::Error| CliError::user(format!("cannot write CSV: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<Vec<String>> = (1..=data.stages()).map(|j| exported_covariates(data, j)).collect();
    let mut header = vec!["id".to_string()];
    for (j, stage_names) in names.iter().enumerate() {
        let j = j + 1;
        header.extend(stage_names.iter().map(|n| format!("{n}_{j}")));
        header.extend([format!("proxy_{j}"), format!("actual_{j}"), format!("validation_{j}")]);
    }
    header.push("Y".into());
    w.write_record(&header).map_err(io)?;
    let bit = |b: Option<bool>| b.map_or(String::new(), |b| u8::from(b).to_string());
    for (i, t) in data.trajectories().iter().enumerate() {
        let mut row = vec![t.id.clone()];
        for (j, (record, stage_names)) in t.stages.iter().zip(&names).enumerate() {
            row.extend(stage_names.iter().map(|n| record.covariates[n].to_string()));
            row.push(bit(record.proxy(data.proxy_kind())));
            row.push(bit(record.actual));
            row.push(bit(Some(data.is_validation(i, j + 1))));
        }
        row.push(t.outcome.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::user(format!("cannot write CSV: {e}")))?;
    Ok(())
}
