use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{summarize, EvalRecord, MetricSummary};
use crate::pipeline::{run_case, CaseBundle, CaseRun, InputConfig, PipelineContext, PipelineError};

/// Metrics for one input configuration across all study cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub config: InputConfig,
    pub records: Vec<EvalRecord>,
    pub summary: Option<MetricSummary>,
    pub warnings: Vec<String>,
}

/// One record per successful run, with samples numbered across cases and
/// trials in order. Trials without a reference or with a failed run are
/// left out so every sample keeps the same run count.
pub fn collect_records(runs: &[CaseRun]) -> (Vec<EvalRecord>, Vec<String>) {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut sample = 0;
    for case in runs {
        for trial in &case.trials {
            sample += 1;
            let label = format!("{}/{}", case.case_id, trial.trial_id);
            let Some(reference) = trial.reference_total else {
                warnings.push(format!("{label}: no reference total, skipped"));
                continue;
            };
            if let Some(failed) = trial.runs.iter().find(|o| o.result.is_err()) {
                warnings.push(format!("{label}: run {} failed, sample skipped", failed.run_index));
                continue;
            }
            records.extend(trial.runs.iter().filter_map(|o| o.result.as_ref().ok()).map(|r| EvalRecord {
                sample,
                run: r.run_index,
                predicted: r.report.total_score,
                reference,
            }));
        }
    }
    (records, warnings)
}

/// Runs every case under every configuration and scores the totals
/// against the references.
pub fn run_study(
    bundles: &[CaseBundle],
    configs: &[InputConfig],
    ctx: &PipelineContext<'_>,
    runs: usize,
) -> Result<Vec<StudyEntry>, PipelineError> {
    configs
        .iter()
        .map(|config| {
            let case_runs = std::thread::scope(|s| {
                let handles: Vec<_> = bundles
                    .iter()
                    .map(|b| s.spawn(move || run_case(b, config, ctx, runs)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("case thread panicked"))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let (records, mut warnings) = collect_records(&case_runs);
            let summary = match summarize(&records) {
                Ok(s) => Some(s),
                Err(e) => {
                    warnings.push(e.to_string());
                    None
                }
            };
            Ok(StudyEntry {
                config: config.clone(),
                records,
                summary,
                warnings,
            })
        })
        .collect()
}

/// Study records keyed by input flags, as consumed by the ablation table.
pub fn records_by_flags(entries: &[StudyEntry]) -> BTreeMap<String, Vec<EvalRecord>> {
    entries
        .iter()
        .map(|e| (e.config.flags(), e.records.clone()))
        .collect()
}
