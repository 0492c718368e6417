//! Case orchestration: input assembly, agent dispatch and multi-run execution.

mod bundle;
mod config;
mod curves;
mod run;

pub use bundle::{
    load_bundle, read_frame_archive, save_bundle, write_frame_archive, BundleError, CaseBundle, CaseManifest,
    TrialData, TrialManifest, MANIFEST_FILE, MOCK_FIXTURE_FILE, TRAJECTORY_FILE,
};
pub use config::{InputConfig, InputConfigError, ObservationCategory, ObservationSetting};
pub use curves::{curve_set_from_cycles, patient_curve_set};
pub use run::{
    case_seed, mean_total, report_document, run_case, run_id, select_observations, write_case_outputs, CaseRun,
    CaseSummary, Clock, FixedClock, JsonlPromptLog, MemoryPromptLog, PipelineContext, PipelineError, RunOutcome,
    RunResult, RunSummary, Stage, StageRecorder, TrialRun, TrialSummary, DEFAULT_RUNS,
};
