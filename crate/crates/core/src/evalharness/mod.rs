//! Error metrics over per-run predictions, the MCID gate, input ablations
//! and the clinician-observation study.

mod fixtures;
mod study;

pub use fixtures::records_with_metrics;
pub use study::{collect_records, records_by_flags, run_study, StudyEntry};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::ClinicianObservation;
use crate::pipeline::{InputConfig, ObservationCategory};

/// Minimal clinically important difference of the total score.
pub const MCID: f64 = 2.25;

pub const OBSERVATION_POOL_SIZE: usize = 5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no records")]
    EmptyRecords,
    #[error("sample {sample} has {runs} runs, expected {expected}")]
    RaggedRuns { sample: usize, runs: usize, expected: usize },
    #[error("sample {sample} run {run} appears more than once")]
    DuplicateRecord { sample: usize, run: usize },
    #[error("sample {sample} has differing reference totals across runs")]
    InconsistentReference { sample: usize },
    #[error("non-finite value in sample {sample} run {run}")]
    NonFinite { sample: usize, run: usize },
    #[error("observation pool must hold exactly {OBSERVATION_POOL_SIZE} notes, got {0}")]
    PoolSizeInvalid(usize),
    #[error("base MAE must be positive, got {0}")]
    NonPositiveBase(f64),
    #[error("cannot build records: {0}")]
    Unsatisfiable(String),
    #[error("records csv: {0}")]
    Csv(String),
}

/// One predicted total for sample `sample` on run `run`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample: usize,
    pub run: usize,
    pub predicted: f64,
    pub reference: f64,
}

impl EvalRecord {
    pub fn error(&self) -> f64 {
        self.predicted - self.reference
    }
}

/// Validates the N x M layout and returns (N, M).
pub fn check_records(records: &[EvalRecord]) -> Result<(usize, usize), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut by_sample: BTreeMap<usize, (BTreeSet<usize>, f64)> = BTreeMap::new();
    for r in records {
        if !r.predicted.is_finite() || !r.reference.is_finite() {
            return Err(EvalError::NonFinite {
                sample: r.sample,
                run: r.run,
            });
        }
        let entry = by_sample.entry(r.sample).or_insert_with(|| (BTreeSet::new(), r.reference));
        if !entry.0.insert(r.run) {
            return Err(EvalError::DuplicateRecord {
                sample: r.sample,
                run: r.run,
            });
        }
        if entry.1 != r.reference {
            return Err(EvalError::InconsistentReference { sample: r.sample });
        }
    }
    let expected = by_sample.values().next().map(|(runs, _)| runs.len()).unwrap_or(0);
    for (&sample, (runs, _)) in &by_sample {
        if runs.len() != expected {
            return Err(EvalError::RaggedRuns {
                sample,
                runs: runs.len(),
                expected,
            });
        }
    }
    Ok((by_sample.len(), expected))
}

/// Mean absolute error over all N x M records.
pub fn mae(records: &[EvalRecord]) -> Result<f64, EvalError> {
    check_records(records)?;
    Ok(records.iter().map(|r| r.error().abs()).sum::<f64>() / records.len() as f64)
}

/// Largest absolute error over all records.
pub fn max_ae(records: &[EvalRecord]) -> Result<f64, EvalError> {
    check_records(records)?;
    Ok(records.iter().map(|r| r.error().abs()).fold(0.0, f64::max))
}

/// Signed mean error; positive means overestimation.
pub fn bias(records: &[EvalRecord]) -> Result<f64, EvalError> {
    check_records(records)?;
    Ok(records.iter().map(EvalRecord::error).sum::<f64>() / records.len() as f64)
}

pub fn mcid_gate(mae_value: f64, threshold: f64) -> bool {
    mae_value < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub max_ae: f64,
    pub bias: f64,
    pub below_mcid: bool,
    pub n: usize,
    pub m: usize,
    pub mcid_threshold: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Result<MetricSummary, EvalError> {
    let (n, m) = check_records(records)?;
    let mae = mae(records)?;
    Ok(MetricSummary {
        mae,
        max_ae: max_ae(records)?,
        bias: bias(records)?,
        below_mcid: mcid_gate(mae, MCID),
        n,
        m,
        mcid_threshold: MCID,
    })
}

/// Relative MAE reduction from `base` to `new`, in percent of `base`.
pub fn percent_reduction(base: f64, new: f64) -> Result<f64, EvalError> {
    if base <= 0.0 || !base.is_finite() {
        return Err(EvalError::NonPositiveBase(base));
    }
    Ok((base - new) / base * 100.0)
}

/// The five canonical preliminary notes recorded for one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationPool {
    notes: Vec<ClinicianObservation>,
}

impl ObservationPool {
    pub fn new(notes: Vec<ClinicianObservation>) -> Result<Self, EvalError> {
        if notes.len() != OBSERVATION_POOL_SIZE {
            return Err(EvalError::PoolSizeInvalid(notes.len()));
        }
        Ok(Self { notes })
    }

    /// Default wording for the five study topics, each tagged with its
    /// factor.
    pub fn canonical() -> Self {
        let note = |text: &str, factor: &str| ClinicianObservation {
            text: text.to_string(),
            factor_id: Some(factor.to_string()),
        };
        Self {
            notes: vec![
                note("Reduced knee flexion in initial swing", "initial_swing_knee_flexion"),
                note("Circumduction of the affected leg in mid-swing", "midswing_circumduction"),
                note("Shortened stance time on the affected side", "affected_stance_time"),
                note("Limited hip extension on the affected side", "affected_hip_extension"),
                note("Short step length of the unaffected leg", "unaffected_step_length"),
            ],
        }
    }

    pub fn notes(&self) -> &[ClinicianObservation] {
        &self.notes
    }
}

/// Draws a category-sized subset of the pool without replacement, kept in
/// pool order. Short and medium pick their size uniformly from the
/// category's range; long returns the whole pool.
pub fn sample_observations(pool: &ObservationPool, category: ObservationCategory, seed: u64) -> Vec<ClinicianObservation> {
    let (lo, hi) = category.size_range();
    let size = pool.notes.len();
    if lo >= size {
        return pool.notes.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(lo..=hi.min(size));
    let mut picked = rand::seq::index::sample(&mut rng, size, count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool.notes[i].clone()).collect()
}

/// Probability that a given note appears in a draw of `category`.
pub fn inclusion_probability(category: ObservationCategory) -> f64 {
    let (lo, hi) = category.size_range();
    let sizes = (lo..=hi).count() as f64;
    (lo..=hi).map(|k| k as f64 / OBSERVATION_POOL_SIZE as f64).sum::<f64>() / sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub summary: Option<MetricSummary>,
    pub best: bool,
    pub warning: Option<String>,
}

/// One row per canonical input configuration (R, R+D, R+T, R+T+D) keyed by
/// flag string (`R`, `RD`, `RT`, `RTD`). Missing or invalid buckets yield
/// a row carrying a warning; the lowest-MAE row is flagged best.
pub fn ablation_table(results: &BTreeMap<String, Vec<EvalRecord>>) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = InputConfig::canonical_set()
        .iter()
        .map(|cfg| {
            let (summary, warning) = match results.get(&cfg.flags()) {
                None => (None, Some("missing configuration".to_string())),
                Some(records) => match summarize(records) {
                    Ok(s) => (Some(s), None),
                    Err(e) => (None, Some(e.to_string())),
                },
            };
            AblationRow {
                config: cfg.label(),
                summary,
                best: false,
                warning,
            }
        })
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.summary.map(|s| (i, s.mae)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].best = true;
    }
    for key in results.keys() {
        if !InputConfig::canonical_set().iter().any(|c| &c.flags() == key) {
            tracing::warn!(config = %key, "ignoring non-canonical configuration in ablation table");
        }
    }
    rows
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Inputs | MAE | Max AE | Bias | Below MCID |\n|---|---|---|---|---|\n");
    for r in rows {
        match &r.summary {
            Some(s) => {
                let mark = if r.best { " (best)" } else { "" };
                out.push_str(&format!(
                    "| {}{} | {} | {} | {} | {} |\n",
                    r.config,
                    mark,
                    fmt2(s.mae),
                    fmt2(s.max_ae),
                    fmt2(s.bias),
                    if s.below_mcid { "yes" } else { "no" }
                ));
            }
            None => out.push_str(&format!(
                "| {} | - | - | - | {} |\n",
                r.config,
                r.warning.as_deref().unwrap_or("no data")
            )),
        }
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,n,m,mae,max_ae,bias,below_mcid,best,warning\n");
    for r in rows {
        match &r.summary {
            Some(s) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{},\n",
                r.config,
                s.n,
                s.m,
                fmt2(s.mae),
                fmt2(s.max_ae),
                fmt2(s.bias),
                s.below_mcid,
                r.best
            )),
            None => out.push_str(&format!(
                "{},,,,,,,false,{}\n",
                r.config,
                r.warning.as_deref().unwrap_or("")
            )),
        }
    }
    out
}

pub fn metrics_csv(label: &str, s: &MetricSummary) -> String {
    format!(
        "config,n,m,mae,max_ae,bias,below_mcid\n{label},{},{},{},{},{},{}\n",
        s.n,
        s.m,
        fmt2(s.mae),
        fmt2(s.max_ae),
        fmt2(s.bias),
        s.below_mcid
    )
}

/// Reads `sample,run,predicted,reference` CSV.
pub fn read_records(reader: impl Read) -> Result<Vec<EvalRecord>, EvalError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| EvalError::Csv(e.to_string())))
        .collect()
}

pub fn write_records(writer: impl Write, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests;
