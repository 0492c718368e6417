use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bundle::{BundleError, CaseBundle, TrialData};
use super::config::{InputConfig, InputConfigError, ObservationSetting};
use super::curves::curve_set_from_cycles;
use crate::agents::{
    anonymize_frames, recording_observer, report_generator, trajectory_analyzer, AgentContext, AgentError,
    AgentModels, Anonymizer, ClinicianObservation, Dispatcher, FrameSet, LlmProvider, ObserverMode, PromptAuditEntry,
    PromptLibrary, PromptSink, ReportHeader, RequestMeta, DEFAULT_FRAME_COUNT, DEFAULT_RETRY_BUDGET,
};
use crate::evalharness::{sample_observations, EvalError, ObservationPool};
use crate::gaitkin::{parse_trajectory, segment_cycles, GaitError, Side};
use crate::normbase::{match_normative, CurveKey, MatchWeights, NormError, NormativeDatabase};
use crate::plotgen::{render_plot_set, render_plots, PlotError, RenderedPlot};
use crate::wgs::{Provenance, ReportTemplate, ScoringConfig, WgsReport};

pub const DEFAULT_RUNS: usize = 3;

/// Source of provenance timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

/// Always reports the same instant; keeps report documents reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedClock(pub String);

impl FixedClock {
    pub const DEFAULT_TIMESTAMP: &'static str = "2000-01-01T00:00:00Z";
}

impl Default for FixedClock {
    fn default() -> Self {
        Self(Self::DEFAULT_TIMESTAMP.to_string())
    }
}

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ParseTrajectory,
    SegmentCycles,
    NormalizeCurves,
    MatchNormative,
    RenderPlots,
    AnonymizeFrames,
    RecordingObserver,
    TrajectoryAnalyzer,
    ReportGenerator,
}

impl Stage {
    /// Stages that only run when trajectories are enabled.
    pub const TRAJECTORY: [Stage; 6] = [
        Stage::ParseTrajectory,
        Stage::SegmentCycles,
        Stage::NormalizeCurves,
        Stage::MatchNormative,
        Stage::RenderPlots,
        Stage::TrajectoryAnalyzer,
    ];
}

/// Counts how often each pipeline stage was entered.
#[derive(Debug, Default)]
pub struct StageRecorder {
    counts: Mutex<BTreeMap<Stage, usize>>,
}

impl StageRecorder {
    pub fn record(&self, stage: Stage) {
        *self.counts.lock().unwrap().entry(stage).or_default() += 1;
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.counts.lock().unwrap().get(&stage).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<Stage, usize> {
        self.counts.lock().unwrap().clone()
    }
}

/// Appends one JSON line per outbound request.
pub struct JsonlPromptLog {
    writer: Mutex<BufWriter<File>>,
}

impl JsonlPromptLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl PromptSink for JsonlPromptLog {
    fn record(&self, entry: &PromptAuditEntry) {
        let mut w = self.writer.lock().unwrap();
        let line = serde_json::to_string(entry).expect("audit entry serializes");
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            tracing::error!(error = %e, "failed to write prompt audit entry");
        }
    }
}

/// Keeps audit entries in memory.
#[derive(Debug, Default)]
pub struct MemoryPromptLog {
    entries: Mutex<Vec<PromptAuditEntry>>,
}

impl MemoryPromptLog {
    pub fn entries(&self) -> Vec<PromptAuditEntry> {
        self.entries.lock().unwrap().clone()
    }
}

impl PromptSink for MemoryPromptLog {
    fn record(&self, entry: &PromptAuditEntry) {
        self.entries.lock().unwrap().push(entry.clone());
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Config(#[from] InputConfigError),
    #[error("run count must be at least 1, got {0}")]
    InvalidRunCount(usize),
    #[error("trial {trial}: no trajectory file")]
    MissingTrajectory { trial: String },
    #[error("trial {trial}: {source}")]
    Gait { trial: String, source: GaitError },
    #[error("trajectories are enabled but no normative database is loaded")]
    NormativeDatabaseRequired,
    #[error("trial {trial}: {source}")]
    Normative { trial: String, source: NormError },
    #[error("trial {trial}: {source}")]
    Plot { trial: String, source: PlotError },
    #[error("case {case}: {source}")]
    Agent { case: String, source: AgentError },
    #[error("trial {trial}: {source}")]
    Anonymize { trial: String, source: AgentError },
    #[error("observations: {0}")]
    Observations(#[from] EvalError),
    #[error("observation index {index} out of range for {available} notes")]
    ObservationIndex { index: usize, available: usize },
    #[error("no run results")]
    EmptyResults,
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Everything a case run needs besides the case itself.
#[derive(Clone)]
pub struct PipelineContext<'a> {
    pub provider: &'a dyn LlmProvider,
    pub models: AgentModels,
    pub scoring: &'a ScoringConfig,
    pub prompts: &'a PromptLibrary,
    pub normative: Option<&'a NormativeDatabase>,
    pub match_weights: MatchWeights,
    /// Without an anonymizer frames stay flagged as identifiable and the
    /// observer refuses them.
    pub anonymizer: Option<&'a dyn Anonymizer>,
    pub clock: &'a dyn Clock,
    pub audit: Option<&'a dyn PromptSink>,
    pub recorder: Option<&'a StageRecorder>,
    pub retry_budget: usize,
    pub frame_count: usize,
    pub template: ReportTemplate,
    pub seed: u64,
    pub parallel_runs: bool,
}

impl<'a> PipelineContext<'a> {
    pub fn new(
        provider: &'a dyn LlmProvider,
        scoring: &'a ScoringConfig,
        prompts: &'a PromptLibrary,
        clock: &'a dyn Clock,
    ) -> Self {
        Self {
            provider,
            models: AgentModels::single(provider.id()),
            scoring,
            prompts,
            normative: None,
            match_weights: MatchWeights::default(),
            anonymizer: None,
            clock,
            audit: None,
            recorder: None,
            retry_budget: DEFAULT_RETRY_BUDGET,
            frame_count: DEFAULT_FRAME_COUNT,
            template: ReportTemplate::ScoringTemplate,
            seed: 0,
            parallel_runs: false,
        }
    }

    fn record(&self, stage: Stage) {
        if let Some(r) = self.recorder {
            r.record(stage);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub case_id: String,
    pub trial_id: String,
    /// 1-based.
    pub run_index: usize,
    pub report: WgsReport,
    pub duration: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trial_id: String,
    pub run_index: usize,
    pub result: Result<RunResult, AgentError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRun {
    pub trial_id: String,
    pub reference_total: Option<f64>,
    pub plots: Vec<RenderedPlot>,
    pub warnings: Vec<String>,
    pub runs: Vec<RunOutcome>,
}

impl TrialRun {
    pub fn results(&self) -> Vec<&RunResult> {
        self.runs.iter().filter_map(|r| r.result.as_ref().ok()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRun {
    pub case_id: String,
    pub input: InputConfig,
    pub observations: Vec<ClinicianObservation>,
    pub trials: Vec<TrialRun>,
}

impl CaseRun {
    pub fn outcomes(&self) -> impl Iterator<Item = &RunOutcome> {
        self.trials.iter().flat_map(|t| &t.runs)
    }

    pub fn results(&self) -> Vec<&RunResult> {
        self.outcomes().filter_map(|o| o.result.as_ref().ok()).collect()
    }

    pub fn failures(&self) -> Vec<(&RunOutcome, &AgentError)> {
        self.outcomes()
            .filter_map(|o| o.result.as_ref().err().map(|e| (o, e)))
            .collect()
    }
}

/// Arithmetic mean of the totals of one trial's runs.
pub fn mean_total(results: &[RunResult]) -> Result<f64, PipelineError> {
    if results.is_empty() {
        return Err(PipelineError::EmptyResults);
    }
    Ok(results.iter().map(|r| r.report.total_score).sum::<f64>() / results.len() as f64)
}

pub fn run_id(case_id: &str, trial_id: &str, run_index: usize) -> String {
    format!("{case_id}-{trial_id}-r{run_index}")
}

/// Per-case sampling seed, so cases draw independent note subsets.
pub fn case_seed(seed: u64, case_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(case_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn select_observations(
    bundle: &CaseBundle,
    setting: &ObservationSetting,
    seed: u64,
) -> Result<Vec<ClinicianObservation>, PipelineError> {
    match setting {
        ObservationSetting::None => Ok(Vec::new()),
        ObservationSetting::Category(category) => {
            let pool = ObservationPool::new(bundle.observations.clone())?;
            Ok(sample_observations(&pool, *category, case_seed(seed, &bundle.id)))
        }
        ObservationSetting::Explicit(indices) => indices
            .iter()
            .map(|&index| {
                bundle
                    .observations
                    .get(index)
                    .cloned()
                    .ok_or(PipelineError::ObservationIndex {
                        index,
                        available: bundle.observations.len(),
                    })
            })
            .collect(),
    }
}

struct PreparedTrial<'t> {
    trial: &'t TrialData,
    frontal: FrameSet,
    sagittal: FrameSet,
    plots: Option<Vec<RenderedPlot>>,
    warnings: Vec<String>,
}

fn prepare_trial<'t>(
    bundle: &CaseBundle,
    trial: &'t TrialData,
    input: &InputConfig,
    ctx: &PipelineContext<'_>,
) -> Result<PreparedTrial<'t>, PipelineError> {
    let mut warnings = Vec::new();
    let mut views = Vec::with_capacity(2);
    for set in [&trial.frontal, &trial.sagittal] {
        let (mut sampled, sampling) = set.sampled(ctx.frame_count);
        if sampling.short_video {
            warnings.push(format!(
                "{} recording has {} frames, fewer than {}",
                set.view.as_str(),
                set.frames.len(),
                ctx.frame_count
            ));
        }
        if let Some(anonymizer) = ctx.anonymizer {
            ctx.record(Stage::AnonymizeFrames);
            sampled = anonymize_frames(&sampled, anonymizer).map_err(|source| PipelineError::Anonymize {
                trial: trial.id.clone(),
                source,
            })?;
        }
        views.push(sampled);
    }
    let sagittal = views.pop().expect("two views");
    let frontal = views.pop().expect("two views");

    let plots = if input.trajectories {
        Some(trial_plots(bundle, trial, input, ctx)?)
    } else {
        None
    };
    Ok(PreparedTrial {
        trial,
        frontal,
        sagittal,
        plots,
        warnings,
    })
}

fn trial_plots(
    bundle: &CaseBundle,
    trial: &TrialData,
    input: &InputConfig,
    ctx: &PipelineContext<'_>,
) -> Result<Vec<RenderedPlot>, PipelineError> {
    let gait = |source| PipelineError::Gait {
        trial: trial.id.clone(),
        source,
    };
    let csv = trial
        .trajectory_csv
        .as_deref()
        .ok_or_else(|| PipelineError::MissingTrajectory { trial: trial.id.clone() })?;
    ctx.record(Stage::ParseTrajectory);
    let series = parse_trajectory(csv, &bundle.marker_set()?).map_err(gait)?;
    ctx.record(Stage::SegmentCycles);
    let left = segment_cycles(&series, Side::Left).map_err(gait)?;
    let right = segment_cycles(&series, Side::Right).map_err(gait)?;
    ctx.record(Stage::NormalizeCurves);
    let curves = curve_set_from_cycles(&series, &left, &right).map_err(gait)?;
    let db = ctx.normative.ok_or(PipelineError::NormativeDatabaseRequired)?;
    ctx.record(Stage::MatchNormative);
    let subject =
        match_normative(&bundle.profile, db, &ctx.match_weights).map_err(|source| PipelineError::Normative {
            trial: trial.id.clone(),
            source,
        })?;
    ctx.record(Stage::RenderPlots);
    let plot_err = |source| PipelineError::Plot {
        trial: trial.id.clone(),
        source,
    };
    if input.profile {
        render_plot_set(&bundle.id, bundle.profile.hemiparetic_side, &curves, subject).map_err(plot_err)
    } else {
        // Without the profile the affected side is unknown, so both sides go to the analyzer.
        render_plots(&bundle.id, &CurveKey::all(), &curves, subject).map_err(plot_err)
    }
}

fn execute_run(
    bundle: &CaseBundle,
    prepared: &PreparedTrial<'_>,
    input: &InputConfig,
    observations: &[ClinicianObservation],
    ctx: &PipelineContext<'_>,
    run_index: usize,
) -> Result<RunResult, AgentError> {
    let started = Instant::now();
    for set in [&prepared.frontal, &prepared.sagittal] {
        if !set.anonymized {
            return Err(AgentError::PrivacyGateViolation { view: set.view });
        }
    }
    let meta = RequestMeta {
        case_id: bundle.id.clone(),
        trial_id: prepared.trial.id.clone(),
        run_index,
        agent: None,
        attempt: 0,
    };
    let mut dispatcher = Dispatcher::new(ctx.provider);
    if let Some(audit) = ctx.audit {
        dispatcher = dispatcher.with_audit(audit);
    }
    let actx = AgentContext {
        dispatcher,
        models: &ctx.models,
        config: ctx.scoring,
        prompts: ctx.prompts,
        retry_budget: ctx.retry_budget,
        meta: &meta,
    };
    let profile = input.profile.then_some(&bundle.profile);
    let started_at = ctx.clock.now();

    let (recording, trajectory) = match &prepared.plots {
        Some(plots) => std::thread::scope(|s| {
            let analyzer = s.spawn(|| {
                ctx.record(Stage::TrajectoryAnalyzer);
                trajectory_analyzer(&actx, plots, profile, observations)
            });
            ctx.record(Stage::RecordingObserver);
            let recording = recording_observer(
                &actx,
                &prepared.frontal,
                &prepared.sagittal,
                profile,
                ObserverMode::Constrained8,
                observations,
            );
            let trajectory = analyzer.join().expect("analyzer thread panicked");
            (recording, Some(trajectory))
        }),
        None => {
            ctx.record(Stage::RecordingObserver);
            let recording = recording_observer(
                &actx,
                &prepared.frontal,
                &prepared.sagittal,
                profile,
                ObserverMode::Full14,
                observations,
            );
            (recording, None)
        }
    };
    let recording = recording?;
    let trajectory = trajectory.transpose()?;

    ctx.record(Stage::ReportGenerator);
    let header = ReportHeader {
        case_id: bundle.id.clone(),
        trial_id: prepared.trial.id.clone(),
        run_id: run_id(&bundle.id, &prepared.trial.id, run_index),
        provenance: Provenance {
            provider_id: ctx.provider.id().to_string(),
            model_id: ctx.models.base.clone(),
            input_configuration: input.clone(),
            scoring_config: format!("{}/{}", ctx.scoring.name, ctx.scoring.version),
            prompt_templates: ctx.prompts.versions(),
            started_at,
            completed_at: String::new(),
            subject_identification: recording.subject_identification,
        },
    };
    let mut report = report_generator(
        &actx,
        &recording,
        trajectory.as_ref(),
        observations,
        ctx.template,
        profile,
        header,
    )?;
    report.provenance.completed_at = ctx.clock.now();
    Ok(RunResult {
        case_id: bundle.id.clone(),
        trial_id: prepared.trial.id.clone(),
        run_index,
        report,
        duration: started.elapsed(),
    })
}

fn run_trial(
    bundle: &CaseBundle,
    trial: &TrialData,
    input: &InputConfig,
    observations: &[ClinicianObservation],
    ctx: &PipelineContext<'_>,
    runs: usize,
) -> Result<TrialRun, PipelineError> {
    let prepared = prepare_trial(bundle, trial, input, ctx)?;
    let run_one = |m: usize| RunOutcome {
        trial_id: trial.id.clone(),
        run_index: m,
        result: execute_run(bundle, &prepared, input, observations, ctx, m),
    };
    let outcomes: Vec<RunOutcome> = if ctx.parallel_runs {
        std::thread::scope(|s| {
            let handles: Vec<_> = (1..=runs).map(|m| s.spawn(move || run_one(m))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("run thread panicked"))
                .collect()
        })
    } else {
        (1..=runs).map(run_one).collect()
    };
    for o in &outcomes {
        if let Err(e) = &o.result {
            tracing::warn!(case = %bundle.id, trial = %trial.id, run = o.run_index, error = %e, "run failed");
        }
    }
    Ok(TrialRun {
        trial_id: trial.id.clone(),
        reference_total: bundle.trial_reference(trial),
        plots: prepared.plots.clone().unwrap_or_default(),
        warnings: prepared.warnings.clone(),
        runs: outcomes,
    })
}

/// Runs every trial of `bundle` `runs` times under `input`. Trials run in
/// parallel; a failed run is recorded and does not stop the others.
pub fn run_case(
    bundle: &CaseBundle,
    input: &InputConfig,
    ctx: &PipelineContext<'_>,
    runs: usize,
) -> Result<CaseRun, PipelineError> {
    if runs == 0 {
        return Err(PipelineError::InvalidRunCount(runs));
    }
    bundle.validate()?;
    ctx.models.validate().map_err(|source| PipelineError::Agent {
        case: bundle.id.clone(),
        source,
    })?;
    let observations = select_observations(bundle, &input.observations, ctx.seed)?;
    let trials = std::thread::scope(|s| {
        let handles: Vec<_> = bundle
            .trials
            .iter()
            .map(|trial| {
                let observations = &observations;
                s.spawn(move || run_trial(bundle, trial, input, observations, ctx, runs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(CaseRun {
        case_id: bundle.id.clone(),
        input: input.clone(),
        observations,
        trials,
    })
}

/// Serialized report document as persisted.
pub fn report_document(report: &WgsReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: String,
    pub reference_total: Option<f64>,
    pub mean_total: Option<f64>,
    pub warnings: Vec<String>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub input_configuration: InputConfig,
    pub observations: Vec<ClinicianObservation>,
    pub trials: Vec<TrialSummary>,
}

impl CaseRun {
    pub fn summary(&self) -> CaseSummary {
        CaseSummary {
            case_id: self.case_id.clone(),
            input_configuration: self.input.clone(),
            observations: self.observations.clone(),
            trials: self
                .trials
                .iter()
                .map(|t| {
                    let ok: Vec<RunResult> = t.results().into_iter().cloned().collect();
                    TrialSummary {
                        trial_id: t.trial_id.clone(),
                        reference_total: t.reference_total,
                        mean_total: mean_total(&ok).ok(),
                        warnings: t.warnings.clone(),
                        runs: t
                            .runs
                            .iter()
                            .map(|o| RunSummary {
                                run_index: o.run_index,
                                total_score: o.result.as_ref().ok().map(|r| r.report.total_score),
                                error: o.result.as_ref().err().map(|e| e.to_string()),
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Writes `<out>/<case>/<trial>/run_<m>.json` per successful run,
/// `run_<m>.error.txt` per failed one, the trial's plots and a
/// `summary.json` for the case. Returns the report paths.
pub fn write_case_outputs(out: &Path, run: &CaseRun) -> Result<Vec<PathBuf>, PipelineError> {
    let case_dir = out.join(&run.case_id);
    let mut reports = Vec::new();
    for trial in &run.trials {
        let trial_dir = case_dir.join(&trial.trial_id);
        for plot in &trial.plots {
            write_file(&trial_dir.join("plots").join(plot.file_name()), &plot.png)?;
        }
        for o in &trial.runs {
            match &o.result {
                Ok(r) => {
                    let path = trial_dir.join(format!("run_{}.json", o.run_index));
                    write_file(&path, report_document(&r.report).as_bytes())?;
                    reports.push(path);
                }
                Err(e) => {
                    let path = trial_dir.join(format!("run_{}.error.txt", o.run_index));
                    write_file(&path, format!("{e}\n").as_bytes())?;
                }
            }
        }
    }
    let mut summary = serde_json::to_string_pretty(&run.summary()).expect("summary serializes");
    summary.push('\n');
    write_file(&case_dir.join("summary.json"), summary.as_bytes())?;
    Ok(reports)
}
