//! File-backed case store. Every mutation is appended to the case's
//! `audit.jsonl` first and then materialised into `record.json` and
//! `reports/<id>.json`; replaying the log yields the same documents.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use oga_core::agents::{ClinicianObservation, MockFixture};
use oga_core::normbase::PatientProfile;
use oga_core::pipeline::{read_frame_archive, CaseBundle, Clock, InputConfig, TrialData, TRAJECTORY_FILE};
use oga_core::wgs::{AgentRole, ReportTemplate, ScoringConfig, View, WgsReport};

pub const AUDIT_FILE: &str = "audit.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const REPORTS_DIR: &str = "reports";
pub const SYSTEM_EDITOR: &str = "system";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Semantic(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt store document {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Draft,
    Running,
    NeedsReview,
    Finalized,
}

/// Body of a case creation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewCase {
    pub id: String,
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default)]
    pub reference_total: Option<f64>,
    pub profile: PatientProfile,
    #[serde(default)]
    pub observations: Vec<ClinicianObservation>,
    #[serde(default)]
    pub alias: BTreeMap<String, String>,
    #[serde(default)]
    pub mock_fixture: Option<MockFixture>,
}

/// Raw trial artifacts as uploaded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialUpload {
    pub id: String,
    pub reference_total: Option<f64>,
    pub trajectory_csv: Option<Vec<u8>>,
    pub frontal_zip: Vec<u8>,
    pub sagittal_zip: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub id: String,
    pub reference_total: Option<f64>,
    pub trajectory_sha256: Option<String>,
    pub frontal_sha256: String,
    pub sagittal_sha256: String,
    pub frontal_frames: usize,
    pub sagittal_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub input: InputConfig,
    pub provider: String,
    pub runs: usize,
    pub seed: u64,
    pub template: ReportTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub trial_id: String,
    pub run_index: usize,
    pub error: String,
    /// The provider itself failed, as opposed to a policy or output error.
    pub provider: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub token: String,
    pub case_id: String,
    pub batch: usize,
    pub request: RunRequest,
    pub status: RunStatus,
    pub previous_state: CaseState,
    pub requested_at: String,
    pub completed_at: Option<String>,
    pub error: Option<String>,
    pub provider_failure: bool,
    pub failures: Vec<RunFailure>,
    pub report_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub state: CaseState,
    pub synthetic: bool,
    pub reference_total: Option<f64>,
    pub profile: PatientProfile,
    pub observations: Vec<ClinicianObservation>,
    pub alias: BTreeMap<String, String>,
    pub mock_fixture: Option<MockFixture>,
    pub trials: Vec<TrialEntry>,
    pub runs: Vec<RunRecord>,
    pub report_ids: Vec<String>,
    pub created_at: String,
    pub updated_at: String,
    /// Sequence number of the last applied audit event.
    pub audit_seq: u64,
}

impl CaseRecord {
    pub fn run(&self, token: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.token == token)
    }

    pub fn trial_reference(&self, trial: &TrialEntry) -> Option<f64> {
        trial.reference_total.or(self.reference_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub before: Value,
    pub after: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportVersion {
    pub version: u32,
    pub editor: String,
    pub timestamp: String,
    pub changes: Vec<FieldChange>,
    pub report: WgsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub report_id: String,
    pub case_id: String,
    pub trial_id: String,
    pub run_token: String,
    pub run_index: usize,
    pub finalized: bool,
    pub finalized_by: Option<String>,
    pub finalized_at: Option<String>,
    pub versions: Vec<ReportVersion>,
}

impl ReportRecord {
    pub fn current(&self) -> &ReportVersion {
        self.versions.last().expect("a report has at least one version")
    }

    pub fn draft(&self) -> &ReportVersion {
        &self.versions[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentEdit {
    pub factor_id: String,
    #[serde(default)]
    pub rating: Option<u8>,
    #[serde(default)]
    pub rationale: Option<String>,
}

/// A clinician edit, applied on top of `base_version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEdit {
    pub editor: String,
    pub base_version: u32,
    #[serde(default)]
    pub assessments: Vec<AssessmentEdit>,
    #[serde(default)]
    pub narrative: Option<String>,
}

/// A finished run as handed back by the worker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunCompletion {
    pub error: Option<String>,
    pub failures: Vec<RunFailure>,
    pub reports: Vec<WgsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    CaseCreated {
        case: NewCase,
    },
    TrialAttached {
        trial: TrialEntry,
    },
    ObservationsAdded {
        observations: Vec<ClinicianObservation>,
    },
    RunStarted {
        token: String,
        request: RunRequest,
    },
    RunFinished {
        token: String,
        error: Option<String>,
        failures: Vec<RunFailure>,
        reports: Vec<ReportRecord>,
    },
    ReportEdited {
        report_id: String,
        version: ReportVersion,
    },
    ReportFinalized {
        report_id: String,
        editor: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub seq: u64,
    pub at: String,
    pub case_id: String,
    pub event: Event,
}

/// Everything materialised for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDocs {
    pub record: CaseRecord,
    pub reports: BTreeMap<String, ReportRecord>,
}

fn editable(state: CaseState, what: &str) -> Result<(), StoreError> {
    match state {
        CaseState::Draft | CaseState::NeedsReview => Ok(()),
        other => Err(StoreError::Conflict(format!("cannot {what} while the case is {other:?}"))),
    }
}

/// Applies one audit event. This is the only place state changes, so live
/// writes and replay share every transition rule.
pub fn apply(docs: Option<CaseDocs>, line: &AuditLine) -> Result<CaseDocs, StoreError> {
    let Some(mut docs) = docs else {
        let Event::CaseCreated { case } = &line.event else {
            return Err(StoreError::NotFound(format!("case {}", line.case_id)));
        };
        return Ok(CaseDocs {
            record: CaseRecord {
                id: case.id.clone(),
                state: CaseState::Draft,
                synthetic: case.synthetic,
                reference_total: case.reference_total,
                profile: case.profile.clone(),
                observations: case.observations.clone(),
                alias: case.alias.clone(),
                mock_fixture: case.mock_fixture.clone(),
                trials: Vec::new(),
                runs: Vec::new(),
                report_ids: Vec::new(),
                created_at: line.at.clone(),
                updated_at: line.at.clone(),
                audit_seq: line.seq,
            },
            reports: BTreeMap::new(),
        });
    };
    if line.seq != docs.record.audit_seq + 1 {
        return Err(StoreError::Conflict(format!(
            "audit sequence {} does not follow {}",
            line.seq, docs.record.audit_seq
        )));
    }
    let rec = &mut docs.record;
    match &line.event {
        Event::CaseCreated { case } => {
            return Err(StoreError::Conflict(format!("case {} already exists", case.id)));
        }
        Event::TrialAttached { trial } => {
            editable(rec.state, "attach trials")?;
            if rec.trials.iter().any(|t| t.id == trial.id) {
                return Err(StoreError::Conflict(format!("trial {} already attached", trial.id)));
            }
            rec.trials.push(trial.clone());
        }
        Event::ObservationsAdded { observations } => {
            editable(rec.state, "add observations")?;
            rec.observations.extend(observations.iter().cloned());
        }
        Event::RunStarted { token, request } => {
            editable(rec.state, "start a run")?;
            if rec.trials.is_empty() {
                return Err(StoreError::Invalid("case has no trials".into()));
            }
            if request.runs == 0 {
                return Err(StoreError::Invalid("runs must be at least 1".into()));
            }
            rec.runs.push(RunRecord {
                token: token.clone(),
                case_id: rec.id.clone(),
                batch: rec.runs.len() + 1,
                request: request.clone(),
                status: RunStatus::Running,
                previous_state: rec.state,
                requested_at: line.at.clone(),
                completed_at: None,
                error: None,
                provider_failure: false,
                failures: Vec::new(),
                report_ids: Vec::new(),
            });
            rec.state = CaseState::Running;
        }
        Event::RunFinished {
            token,
            error,
            failures,
            reports,
        } => {
            let run = rec
                .runs
                .iter_mut()
                .find(|r| &r.token == token)
                .ok_or_else(|| StoreError::NotFound(format!("run {token}")))?;
            if run.status != RunStatus::Running {
                return Err(StoreError::Conflict(format!("run {token} already finished")));
            }
            run.status = if reports.is_empty() {
                RunStatus::Failed
            } else {
                RunStatus::Completed
            };
            run.completed_at = Some(line.at.clone());
            run.error = error.clone();
            run.provider_failure = failures.iter().any(|f| f.provider);
            run.failures = failures.clone();
            run.report_ids = reports.iter().map(|r| r.report_id.clone()).collect();
            rec.state = match run.status {
                RunStatus::Completed => CaseState::NeedsReview,
                _ => run.previous_state,
            };
            for r in reports {
                rec.report_ids.push(r.report_id.clone());
                docs.reports.insert(r.report_id.clone(), r.clone());
            }
        }
        Event::ReportEdited { report_id, version } => {
            editable(rec.state, "edit reports")?;
            let report = docs
                .reports
                .get_mut(report_id)
                .ok_or_else(|| StoreError::NotFound(format!("report {report_id}")))?;
            if report.finalized {
                return Err(StoreError::Conflict(format!("report {report_id} is finalized")));
            }
            let expected = report.current().version + 1;
            if version.version != expected {
                return Err(StoreError::Conflict(format!(
                    "report {report_id}: version {} does not follow {}",
                    version.version,
                    expected - 1
                )));
            }
            report.versions.push(version.clone());
        }
        Event::ReportFinalized { report_id, editor } => {
            editable(rec.state, "finalize reports")?;
            let report = docs
                .reports
                .get_mut(report_id)
                .ok_or_else(|| StoreError::NotFound(format!("report {report_id}")))?;
            if report.finalized {
                return Err(StoreError::Conflict(format!("report {report_id} is already finalized")));
            }
            report.finalized = true;
            report.finalized_by = Some(editor.clone());
            report.finalized_at = Some(line.at.clone());
            let latest = rec.runs.iter().rev().find(|r| r.status == RunStatus::Completed);
            if let Some(run) = latest {
                if run.report_ids.iter().all(|id| docs.reports[id].finalized) {
                    rec.state = CaseState::Finalized;
                }
            }
        }
    }
    rec.audit_seq = line.seq;
    rec.updated_at = line.at.clone();
    Ok(docs)
}

fn document(value: &impl Serialize) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("store document serializes");
    text.push('\n');
    text.into_bytes()
}

/// Materialised documents keyed by path relative to the case directory.
pub fn documents(docs: &CaseDocs) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    out.insert(PathBuf::from(RECORD_FILE), document(&docs.record));
    for (id, r) in &docs.reports {
        out.insert(Path::new(REPORTS_DIR).join(format!("{id}.json")), document(r));
    }
    out
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditLine>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Rebuilds a case from its audit log alone.
pub fn replay(audit_path: &Path) -> Result<CaseDocs, StoreError> {
    let lines = read_audit(audit_path)?;
    let mut docs = None;
    for line in &lines {
        docs = Some(apply(docs, line).map_err(|e| StoreError::Corrupt {
            path: audit_path.to_path_buf(),
            message: format!("event {}: {e}", line.seq),
        })?);
    }
    docs.ok_or_else(|| StoreError::Corrupt {
        path: audit_path.to_path_buf(),
        message: "empty audit log".into(),
    })
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn report_id(token: &str, trial_id: &str, run_index: usize) -> String {
    format!("{token}-{trial_id}-r{run_index}")
}

#[derive(Default)]
struct Index {
    reports: HashMap<String, String>,
    runs: HashMap<String, String>,
}

pub struct Store {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    index: RwLock<Index>,
}

impl Store {
    /// Opens or creates a store. Each case is replayed from its audit log
    /// and any document that lags the log is rewritten.
    pub fn open(root: &Path, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let cases = root.join("cases");
        fs::create_dir_all(&cases).map_err(io_err(&cases))?;
        let store = Self {
            root: root.to_path_buf(),
            clock,
            locks: Mutex::new(HashMap::new()),
            index: RwLock::new(Index::default()),
        };
        let mut entries: Vec<PathBuf> = fs::read_dir(&cases)
            .map_err(io_err(&cases))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(AUDIT_FILE).is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let docs = replay(&dir.join(AUDIT_FILE))?;
            store.materialise(&dir, &docs)?;
            store.index_case(&docs);
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn case_dir(&self, case_id: &str) -> PathBuf {
        self.root.join("cases").join(case_id)
    }

    pub fn run_dir(&self, case_id: &str, token: &str) -> PathBuf {
        self.case_dir(case_id).join("runs").join(token)
    }

    fn lock(&self, case_id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(case_id.to_string())
            .or_default()
            .clone()
    }

    fn index_case(&self, docs: &CaseDocs) {
        let mut index = self.index.write().unwrap();
        for id in docs.reports.keys() {
            index.reports.insert(id.clone(), docs.record.id.clone());
        }
        for r in &docs.record.runs {
            index.runs.insert(r.token.clone(), docs.record.id.clone());
        }
    }

    /// Writes reports before the record so the record never lists a
    /// report that is not on disk yet.
    fn materialise(&self, dir: &Path, docs: &CaseDocs) -> Result<(), StoreError> {
        let mut docs: Vec<_> = documents(docs).into_iter().collect();
        docs.sort_by_key(|(rel, _)| rel == Path::new(RECORD_FILE));
        for (rel, bytes) in docs {
            let path = dir.join(rel);
            if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                write_atomic(&path, &bytes)?;
            }
        }
        Ok(())
    }

    fn read_doc<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn load(&self, case_id: &str) -> Result<Option<CaseDocs>, StoreError> {
        let dir = self.case_dir(case_id);
        if !valid_id(case_id) || !dir.join(RECORD_FILE).is_file() {
            return Ok(None);
        }
        let record: CaseRecord = Self::read_doc(&dir.join(RECORD_FILE))?;
        let reports = record
            .report_ids
            .iter()
            .map(|id| Ok((id.clone(), Self::read_doc(&dir.join(REPORTS_DIR).join(format!("{id}.json")))?)))
            .collect::<Result<_, StoreError>>()?;
        Ok(Some(CaseDocs { record, reports }))
    }

    /// Consistent read: waits for any in-flight commit on the case.
    fn snapshot(&self, case_id: &str) -> Result<CaseDocs, StoreError> {
        if !valid_id(case_id) {
            return Err(StoreError::NotFound(format!("case {case_id}")));
        }
        let lock = self.lock(case_id);
        let _guard = lock.lock().unwrap();
        self.load_existing(case_id)
    }

    fn load_existing(&self, case_id: &str) -> Result<CaseDocs, StoreError> {
        self.load(case_id)?
            .ok_or_else(|| StoreError::NotFound(format!("case {case_id}")))
    }

    /// Validates `event` against the current state, appends it to the
    /// audit log and rewrites the documents. Callers hold the case lock.
    fn commit(&self, case_id: &str, docs: Option<CaseDocs>, event: Event) -> Result<CaseDocs, StoreError> {
        let line = AuditLine {
            seq: docs.as_ref().map_or(1, |d| d.record.audit_seq + 1),
            at: self.clock.now(),
            case_id: case_id.to_string(),
            event,
        };
        let next = apply(docs, &line)?;
        let dir = self.case_dir(case_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let audit = dir.join(AUDIT_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&audit)
            .map_err(io_err(&audit))?;
        let mut text = serde_json::to_string(&line).expect("audit line serializes");
        text.push('\n');
        file.write_all(text.as_bytes()).map_err(io_err(&audit))?;
        file.sync_data().map_err(io_err(&audit))?;
        self.materialise(&dir, &next)?;
        self.index_case(&next);
        Ok(next)
    }

    pub fn create_case(&self, new: NewCase) -> Result<CaseRecord, StoreError> {
        if !valid_id(&new.id) {
            return Err(StoreError::Invalid(format!(
                "case id {:?} must be 1-64 characters of letters, digits, '-' or '_'",
                new.id
            )));
        }
        new.profile
            .validate()
            .map_err(|e| StoreError::Invalid(format!("profile: {e}")))?;
        let lock = self.lock(&new.id);
        let _guard = lock.lock().unwrap();
        if self.load(&new.id)?.is_some() {
            return Err(StoreError::Conflict(format!("case {} already exists", new.id)));
        }
        let id = new.id.clone();
        Ok(self.commit(&id, None, Event::CaseCreated { case: new })?.record)
    }

    pub fn attach_trial(&self, case_id: &str, upload: TrialUpload) -> Result<CaseRecord, StoreError> {
        if !valid_id(&upload.id) {
            return Err(StoreError::Invalid(format!("trial id {:?} is not a valid id", upload.id)));
        }
        let frontal = read_frame_archive(&upload.frontal_zip, View::Frontal)
            .map_err(|e| StoreError::Invalid(format!("frontal archive: {e}")))?;
        let sagittal = read_frame_archive(&upload.sagittal_zip, View::Sagittal)
            .map_err(|e| StoreError::Invalid(format!("sagittal archive: {e}")))?;
        for set in [&frontal, &sagittal] {
            if set.frames.is_empty() {
                return Err(StoreError::Invalid(format!("{} archive holds no frames", set.view.as_str())));
            }
        }
        let lock = self.lock(case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(case_id)?;
        if docs.record.trials.iter().any(|t| t.id == upload.id) {
            return Err(StoreError::Conflict(format!("trial {} already attached", upload.id)));
        }
        editable(docs.record.state, "attach trials")?;
        let dir = self.case_dir(case_id).join("trials").join(&upload.id);
        if let Some(csv) = &upload.trajectory_csv {
            write_atomic(&dir.join(TRAJECTORY_FILE), csv)?;
        }
        write_atomic(&dir.join("frontal.zip"), &upload.frontal_zip)?;
        write_atomic(&dir.join("sagittal.zip"), &upload.sagittal_zip)?;
        let trial = TrialEntry {
            id: upload.id,
            reference_total: upload.reference_total,
            trajectory_sha256: upload.trajectory_csv.as_deref().map(sha256_hex),
            frontal_sha256: sha256_hex(&upload.frontal_zip),
            sagittal_sha256: sha256_hex(&upload.sagittal_zip),
            frontal_frames: frontal.frames.len(),
            sagittal_frames: sagittal.frames.len(),
        };
        Ok(self.commit(case_id, Some(docs), Event::TrialAttached { trial })?.record)
    }

    pub fn add_observations(
        &self,
        case_id: &str,
        observations: Vec<ClinicianObservation>,
    ) -> Result<CaseRecord, StoreError> {
        if observations.is_empty() {
            return Err(StoreError::Invalid("no observations given".into()));
        }
        if observations.iter().any(|o| o.text.trim().is_empty()) {
            return Err(StoreError::Invalid("observation text is empty".into()));
        }
        let lock = self.lock(case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(case_id)?;
        Ok(self
            .commit(case_id, Some(docs), Event::ObservationsAdded { observations })?
            .record)
    }

    pub fn start_run(&self, case_id: &str, request: RunRequest) -> Result<RunRecord, StoreError> {
        let lock = self.lock(case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(case_id)?;
        let token = format!("{case_id}-b{}", docs.record.runs.len() + 1);
        let next = self.commit(
            case_id,
            Some(docs),
            Event::RunStarted {
                token: token.clone(),
                request,
            },
        )?;
        Ok(next.record.run(&token).expect("run just recorded").clone())
    }

    pub fn finish_run(&self, token: &str, completion: RunCompletion) -> Result<RunRecord, StoreError> {
        let case_id = self.case_of_run(token)?;
        let lock = self.lock(&case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(&case_id)?;
        let timestamp = self.clock.now();
        let reports = completion
            .reports
            .into_iter()
            .map(|report| {
                let run_index = report
                    .run_id
                    .rsplit_once("-r")
                    .and_then(|(_, m)| m.parse().ok())
                    .unwrap_or(0);
                ReportRecord {
                    report_id: report_id(token, &report.trial_id, run_index),
                    case_id: case_id.clone(),
                    trial_id: report.trial_id.clone(),
                    run_token: token.to_string(),
                    run_index,
                    finalized: false,
                    finalized_by: None,
                    finalized_at: None,
                    versions: vec![ReportVersion {
                        version: 1,
                        editor: SYSTEM_EDITOR.to_string(),
                        timestamp: timestamp.clone(),
                        changes: Vec::new(),
                        report,
                    }],
                }
            })
            .collect();
        let next = self.commit(
            &case_id,
            Some(docs),
            Event::RunFinished {
                token: token.to_string(),
                error: completion.error,
                failures: completion.failures,
                reports,
            },
        )?;
        Ok(next.record.run(token).expect("run exists").clone())
    }

    /// Applies a clinician edit as a new version. The edit must be based on
    /// the current version; a stale base loses with a conflict.
    pub fn edit_report(
        &self,
        report_id: &str,
        edit: ReportEdit,
        scoring: &ScoringConfig,
    ) -> Result<ReportRecord, StoreError> {
        if edit.editor.trim().is_empty() {
            return Err(StoreError::Invalid("editor is required".into()));
        }
        let case_id = self.case_of_report(report_id)?;
        let lock = self.lock(&case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(&case_id)?;
        let record = &docs.reports[report_id];
        if record.finalized {
            return Err(StoreError::Conflict(format!("report {report_id} is finalized")));
        }
        editable(docs.record.state, "edit reports")?;
        let current = record.current();
        if edit.base_version != current.version {
            return Err(StoreError::Conflict(format!(
                "report {report_id} is at version {}, edit was based on {}",
                current.version, edit.base_version
            )));
        }
        let mut report = current.report.clone();
        let mut changes = Vec::new();
        for a in &edit.assessments {
            let def = scoring
                .factor(&a.factor_id)
                .ok_or_else(|| StoreError::Semantic(format!("unknown factor {}", a.factor_id)))?;
            let slot = report
                .assessments
                .iter_mut()
                .find(|x| x.factor_id == a.factor_id)
                .ok_or_else(|| StoreError::Semantic(format!("report has no assessment for {}", a.factor_id)))?;
            if let Some(rating) = a.rating {
                if !def.has_level(rating) {
                    return Err(StoreError::Semantic(format!(
                        "rating {rating} is not on the scale of {} ({}..={})",
                        def.id,
                        def.min_level(),
                        def.max_level()
                    )));
                }
                if rating != slot.rating {
                    changes.push(FieldChange {
                        field: format!("assessments.{}.rating", def.id),
                        before: json!(slot.rating),
                        after: json!(rating),
                    });
                    slot.rating = rating;
                    if slot.source_agent != AgentRole::Clinician {
                        changes.push(FieldChange {
                            field: format!("assessments.{}.source_agent", def.id),
                            before: json!(slot.source_agent),
                            after: json!(AgentRole::Clinician),
                        });
                        slot.source_agent = AgentRole::Clinician;
                    }
                }
            }
            if let Some(rationale) = &a.rationale {
                if *rationale != slot.rationale {
                    changes.push(FieldChange {
                        field: format!("assessments.{}.rationale", def.id),
                        before: json!(slot.rationale),
                        after: json!(rationale),
                    });
                    slot.rationale = rationale.clone();
                }
            }
        }
        if let Some(narrative) = &edit.narrative {
            if *narrative != report.narrative {
                changes.push(FieldChange {
                    field: "narrative".into(),
                    before: json!(report.narrative),
                    after: json!(narrative),
                });
                report.narrative = narrative.clone();
            }
        }
        if changes.is_empty() {
            return Err(StoreError::Invalid("edit changes nothing".into()));
        }
        let before = report.total_score;
        report
            .refresh_total(scoring)
            .map_err(|e| StoreError::Semantic(e.to_string()))?;
        if report.total_score != before {
            changes.push(FieldChange {
                field: "total_score".into(),
                before: json!(before),
                after: json!(report.total_score),
            });
        }
        let version = ReportVersion {
            version: current.version + 1,
            editor: edit.editor.trim().to_string(),
            timestamp: self.clock.now(),
            changes,
            report,
        };
        let next = self.commit(
            &case_id,
            Some(docs),
            Event::ReportEdited {
                report_id: report_id.to_string(),
                version,
            },
        )?;
        Ok(next.reports[report_id].clone())
    }

    pub fn finalize_report(&self, report_id: &str, editor: &str) -> Result<ReportRecord, StoreError> {
        if editor.trim().is_empty() {
            return Err(StoreError::Invalid("editor is required".into()));
        }
        let case_id = self.case_of_report(report_id)?;
        let lock = self.lock(&case_id);
        let _guard = lock.lock().unwrap();
        let docs = self.load_existing(&case_id)?;
        let next = self.commit(
            &case_id,
            Some(docs),
            Event::ReportFinalized {
                report_id: report_id.to_string(),
                editor: editor.trim().to_string(),
            },
        )?;
        Ok(next.reports[report_id].clone())
    }

    fn case_of_report(&self, report_id: &str) -> Result<String, StoreError> {
        self.index
            .read()
            .unwrap()
            .reports
            .get(report_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("report {report_id}")))
    }

    fn case_of_run(&self, token: &str) -> Result<String, StoreError> {
        self.index
            .read()
            .unwrap()
            .runs
            .get(token)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("run {token}")))
    }

    pub fn case(&self, case_id: &str) -> Result<CaseRecord, StoreError> {
        Ok(self.snapshot(case_id)?.record)
    }

    pub fn case_docs(&self, case_id: &str) -> Result<CaseDocs, StoreError> {
        self.snapshot(case_id)
    }

    pub fn case_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("cases");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(RECORD_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn cases(&self) -> Result<Vec<CaseRecord>, StoreError> {
        self.case_ids()?.iter().map(|id| self.case(id)).collect()
    }

    pub fn reports(&self, case_id: &str) -> Result<Vec<ReportRecord>, StoreError> {
        let docs = self.snapshot(case_id)?;
        Ok(docs
            .record
            .report_ids
            .iter()
            .map(|id| docs.reports[id].clone())
            .collect())
    }

    pub fn report(&self, report_id: &str) -> Result<ReportRecord, StoreError> {
        let case_id = self.case_of_report(report_id)?;
        let mut docs = self.snapshot(&case_id)?;
        docs.reports
            .remove(report_id)
            .ok_or_else(|| StoreError::NotFound(format!("report {report_id}")))
    }

    pub fn run(&self, token: &str) -> Result<RunRecord, StoreError> {
        let case = self.case(&self.case_of_run(token)?)?;
        case.run(token)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("run {token}")))
    }

    fn trial_bytes(&self, case_id: &str, trial_id: &str, file: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.case_dir(case_id).join("trials").join(trial_id).join(file);
        fs::read(&path).map_err(io_err(&path))
    }

    /// Reassembles the pipeline input from the stored record and artifacts.
    pub fn bundle(&self, case_id: &str) -> Result<CaseBundle, StoreError> {
        let rec = self.case(case_id)?;
        let trials = rec
            .trials
            .iter()
            .map(|t| {
                let archive = |file: &str, view| -> Result<_, StoreError> {
                    let bytes = self.trial_bytes(case_id, &t.id, file)?;
                    read_frame_archive(&bytes, view).map_err(|e| StoreError::Corrupt {
                        path: self.case_dir(case_id).join("trials").join(&t.id).join(file),
                        message: e.to_string(),
                    })
                };
                Ok(TrialData {
                    id: t.id.clone(),
                    reference_total: t.reference_total,
                    trajectory_csv: match t.trajectory_sha256 {
                        Some(_) => Some(self.trial_bytes(case_id, &t.id, TRAJECTORY_FILE)?),
                        None => None,
                    },
                    frontal: archive("frontal.zip", View::Frontal)?,
                    sagittal: archive("sagittal.zip", View::Sagittal)?,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok(CaseBundle {
            id: rec.id,
            synthetic: rec.synthetic,
            reference_total: rec.reference_total,
            profile: rec.profile,
            observations: rec.observations,
            trials,
            alias: rec.alias,
            mock_fixture: rec.mock_fixture,
        })
    }

    /// One recorded frame, by view and source index.
    pub fn frame(&self, case_id: &str, trial_id: &str, view: View, index: usize) -> Result<(Vec<u8>, &'static str), StoreError> {
        let file = match view {
            View::Frontal => "frontal.zip",
            View::Sagittal => "sagittal.zip",
        };
        let bytes = self.trial_bytes(case_id, trial_id, file)?;
        let set = read_frame_archive(&bytes, view).map_err(|e| StoreError::Invalid(e.to_string()))?;
        set.frames
            .into_iter()
            .find(|f| f.source_index == index)
            .map(|f| {
                let media = f.media_type();
                (f.bytes, media)
            })
            .ok_or_else(|| StoreError::NotFound(format!("frame {}:{index}", view.as_str())))
    }
}

#[cfg(test)]
mod tests;
