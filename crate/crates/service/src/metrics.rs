//! Evaluation metrics over stored runs that have reference totals.

use serde::{Deserialize, Serialize};

use oga_core::evalharness::{summarize, EvalRecord, MetricSummary};
use oga_core::pipeline::InputConfig;

use crate::store::{CaseDocs, RunStatus, StoreError};

/// Which report version supplies the predicted total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredVersion {
    /// The system draft, before any clinician edit.
    #[default]
    Draft,
    /// The latest version, including clinician edits.
    Current,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsFilter {
    /// Input flags such as `RTD`; all canonical configurations when absent.
    #[serde(default)]
    pub inputs: Option<String>,
    #[serde(default)]
    pub case: Option<String>,
    #[serde(default)]
    pub provider: Option<String>,
    #[serde(default)]
    pub version: ScoredVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub config: String,
    pub flags: String,
    pub runs: Vec<String>,
    pub records: Vec<EvalRecord>,
    pub summary: Option<MetricSummary>,
    pub warnings: Vec<String>,
}

/// For each configuration, the latest completed run of every case is
/// scored trial by trial. A trial counts only when it has a reference and
/// every requested run produced a report.
pub fn metrics(cases: &[CaseDocs], filter: &MetricsFilter) -> Result<Vec<MetricsEntry>, StoreError> {
    let configs: Vec<InputConfig> = match &filter.inputs {
        Some(flags) => vec![InputConfig::parse_flags(flags).map_err(|e| StoreError::Invalid(e.to_string()))?],
        None => InputConfig::canonical_set().to_vec(),
    };
    Ok(configs
        .iter()
        .map(|config| entry(cases, filter, config))
        .filter(|e| filter.inputs.is_some() || !e.runs.is_empty())
        .collect())
}

fn entry(cases: &[CaseDocs], filter: &MetricsFilter, config: &InputConfig) -> MetricsEntry {
    let mut out = MetricsEntry {
        config: config.label(),
        flags: config.flags(),
        runs: Vec::new(),
        records: Vec::new(),
        summary: None,
        warnings: Vec::new(),
    };
    let mut sample = 0;
    for docs in cases {
        let rec = &docs.record;
        if filter.case.as_ref().is_some_and(|c| *c != rec.id) {
            continue;
        }
        let Some(run) = rec.runs.iter().rev().find(|r| {
            r.status == RunStatus::Completed
                && r.request.input.flags() == config.flags()
                && filter.provider.as_ref().map_or(true, |p| *p == r.request.provider)
        }) else {
            continue;
        };
        out.runs.push(run.token.clone());
        for trial in &rec.trials {
            sample += 1;
            let label = format!("{}/{}", rec.id, trial.id);
            let Some(reference) = rec.trial_reference(trial) else {
                out.warnings.push(format!("{label}: no reference total, skipped"));
                continue;
            };
            let reports: Vec<_> = run
                .report_ids
                .iter()
                .map(|id| &docs.reports[id])
                .filter(|r| r.trial_id == trial.id)
                .collect();
            if reports.len() != run.request.runs {
                out.warnings.push(format!(
                    "{label}: {} of {} runs produced reports, skipped",
                    reports.len(),
                    run.request.runs
                ));
                continue;
            }
            out.records.extend(reports.iter().map(|r| EvalRecord {
                sample,
                run: r.run_index,
                predicted: match filter.version {
                    ScoredVersion::Draft => r.draft().report.total_score,
                    ScoredVersion::Current => r.current().report.total_score,
                },
                reference,
            }));
        }
    }
    match summarize(&out.records) {
        Ok(s) => out.summary = Some(s),
        Err(e) => out.warnings.push(e.to_string()),
    }
    out
}
