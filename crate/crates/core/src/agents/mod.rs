//! The three drafting agents and the plumbing they share: provider access,
//! frame sampling and anonymization, prompt templates and the structured
//! output contract.

mod frames;
mod http;
mod mock;
mod prompts;
mod provider;

pub use frames::{
    anonymize_frames, sample_frames, Anonymizer, ExternalCommandAnonymizer, Frame, FrameSampling, FrameSet,
    PassThroughAnonymizer, Rect, RectMaskAnonymizer, DEFAULT_FRAME_COUNT,
};
pub use http::{HttpProviderConfig, OpenAiCompatibleProvider};
pub use mock::{MockFixture, MockProvider, MOCK_PROVIDER_ID};
pub use prompts::{PromptLibrary, PromptTemplate, TemplateError};
pub use provider::{
    audit_entry, complete_with_validation, extract_json, AuditMessage, Capabilities, ChatMessage, ChatRequest,
    ChatRole, ContentPart, Dispatcher, ImageOrigin, ImagePart, LlmProvider, PromptAuditEntry, PromptSink,
    ProviderError, RequestMeta, Validated, DEFAULT_RETRY_BUDGET, REPAIR_MARKER,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::gaitkin::{Axis, GaitPhase, Joint};
use crate::normbase::PatientProfile;
use crate::plotgen::RenderedPlot;
use crate::wgs::{
    score_total, to_f64, AgentRole, Evaluator, EvidenceRef, FactorAssessment, Provenance, ReconciliationEntry,
    ReportTemplate, ScoreError, ScoringConfig, SubjectIdentification, View, WgsReport,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{} frames are not anonymized; refusing to dispatch", view.as_str())]
    PrivacyGateViolation { view: View },
    #[error("agent output invalid after {attempts} attempts: {last_error}")]
    AgentOutputInvalid { attempts: usize, last_error: String },
    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),
    #[error("provider {0} does not accept images")]
    ImagesUnsupported(String),
    #[error("request carries {count} images, provider limit is {limit}")]
    TooManyImages { count: usize, limit: usize },
    #[error("missing plot for {} {}", joint.as_str(), axis.as_str())]
    MissingPlot { joint: Joint, axis: Axis },
    #[error("factors not covered by any agent: {}", .0.join(", "))]
    FactorCoverageGap(Vec<String>),
    #[error("factor {0} drafted by more than one agent")]
    FactorConflict(String),
    #[error("anonymizer failed at frame {0}")]
    AnonymizerFailed(usize),
    #[error("anonymizer: {0}")]
    Anonymizer(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("agents must share one base model; got {0:?}")]
    MixedModels(Vec<String>),
}

/// A free-text note from the examining clinician.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicianObservation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_id: Option<String>,
}

impl ClinicianObservation {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            factor_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverMode {
    /// Only the recording-evaluated factors.
    Constrained8,
    /// Every factor, used when no trajectories are available.
    Full14,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutput {
    pub role: AgentRole,
    pub assessments: Vec<FactorAssessment>,
    pub raw_text: String,
    pub attempts: usize,
    pub subject_identification: SubjectIdentification,
}

/// Model selection for the three agents. All agents use `base` unless
/// overrides are present and explicitly allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentModels {
    pub base: String,
    #[serde(default)]
    pub overrides: BTreeMap<AgentRole, String>,
    #[serde(default)]
    pub allow_mixed: bool,
}

impl AgentModels {
    pub fn single(model: impl Into<String>) -> Self {
        Self {
            base: model.into(),
            overrides: BTreeMap::new(),
            allow_mixed: false,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let distinct: BTreeSet<&String> = self
            .overrides
            .values()
            .chain(std::iter::once(&self.base))
            .collect();
        if distinct.len() > 1 && !self.allow_mixed {
            return Err(AgentError::MixedModels(distinct.into_iter().cloned().collect()));
        }
        Ok(())
    }

    pub fn for_role(&self, role: AgentRole) -> &str {
        self.overrides.get(&role).unwrap_or(&self.base)
    }
}

/// Everything an agent call needs besides its own inputs.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub dispatcher: Dispatcher<'a>,
    pub models: &'a AgentModels,
    pub config: &'a ScoringConfig,
    pub prompts: &'a PromptLibrary,
    pub retry_budget: usize,
    pub meta: &'a RequestMeta,
}

impl AgentContext<'_> {
    fn request(&self, role: AgentRole, parts: Vec<ContentPart>) -> ChatRequest {
        ChatRequest {
            model: self.models.for_role(role).to_string(),
            messages: vec![ChatMessage {
                role: ChatRole::User,
                parts,
            }],
            temperature: Some(0.0),
            meta: RequestMeta {
                agent: Some(role),
                ..self.meta.clone()
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Structured output contract

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocAssessment {
    pub factor_id: String,
    pub rating: u8,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub evidence: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocReconciliation {
    pub observation_index: usize,
    #[serde(default)]
    pub factor_id: Option<String>,
    #[serde(default)]
    pub draft_rating: Option<u8>,
    #[serde(default)]
    pub final_rating: Option<u8>,
}

/// The JSON document every agent must reply with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDocument {
    pub assessments: Vec<DocAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_identification: Option<SubjectIdentification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reconciliation: Vec<DocReconciliation>,
}

pub fn parse_document(text: &str) -> Result<AgentDocument, String> {
    let json = extract_json(text).ok_or("reply contains no JSON object")?;
    serde_json::from_str(json).map_err(|e| format!("reply is not a valid assessment document: {e}"))
}

enum EvidenceRule<'a> {
    Frames(&'a BTreeSet<(View, usize)>),
    Plots(&'a BTreeSet<String>),
    Notes(usize),
}

impl EvidenceRule<'_> {
    fn check(&self, factor: &str, evidence: &[EvidenceRef]) -> Result<(), String> {
        match self {
            EvidenceRule::Frames(known) => {
                let mut cited = false;
                for e in evidence {
                    if let EvidenceRef::Frame { view, index } = e {
                        if !known.contains(&(*view, *index)) {
                            return Err(format!("{factor}: cites {e}, which was not provided"));
                        }
                        cited = true;
                    }
                }
                if !cited {
                    return Err(format!("{factor}: no frame evidence cited"));
                }
            }
            EvidenceRule::Plots(known) => {
                let mut cited = false;
                for e in evidence {
                    if let EvidenceRef::Plot(id) = e {
                        if !known.contains(id) {
                            return Err(format!("{factor}: cites {e}, which was not provided"));
                        }
                        cited = true;
                    }
                }
                if !cited {
                    return Err(format!("{factor}: no plot evidence cited"));
                }
            }
            EvidenceRule::Notes(count) => {
                for e in evidence {
                    if let EvidenceRef::Note(i) = e {
                        if i >= count {
                            return Err(format!("{factor}: cites {e}, but only {count} observations exist"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Checks that the document rates exactly `scope`, on valid levels, with
/// acceptable evidence. Returns assessments in `scope` order.
fn check_scope(
    doc: &AgentDocument,
    scope: &[String],
    config: &ScoringConfig,
    rule: &EvidenceRule<'_>,
) -> Result<Vec<DocAssessment>, String> {
    let mut by_id: BTreeMap<&str, &DocAssessment> = BTreeMap::new();
    for a in &doc.assessments {
        if !scope.iter().any(|s| s == &a.factor_id) {
            return Err(format!("factor {} is outside this agent's scope", a.factor_id));
        }
        if by_id.insert(&a.factor_id, a).is_some() {
            return Err(format!("factor {} rated twice", a.factor_id));
        }
    }
    let missing: Vec<&str> = scope
        .iter()
        .filter(|s| !by_id.contains_key(s.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing factors: {}", missing.join(", ")));
    }
    scope
        .iter()
        .map(|id| {
            let a = by_id[id.as_str()];
            let def = config.factor(id).ok_or_else(|| format!("unknown factor {id}"))?;
            if !def.has_level(a.rating) {
                return Err(format!(
                    "{id}: rating {} is not a level of this factor ({}-{})",
                    a.rating,
                    def.min_level(),
                    def.max_level()
                ));
            }
            rule.check(id, &a.evidence)?;
            Ok(a.clone())
        })
        .collect()
}

fn schema_text(with_subject: bool, report: bool) -> String {
    let mut s = String::from(
        "{\"assessments\": [{\"factor_id\": \"<id from FACTORS>\", \"rating\": <level>, \
         \"rationale\": \"<one or two sentences>\", \"evidence\": [\"<reference>\"]}]",
    );
    if with_subject {
        s.push_str(", \"subject_identification\": \"confident\" | \"low_confidence\"");
    }
    if report {
        s.push_str(
            ", \"narrative\": \"<text>\", \"reconciliation\": [{\"observation_index\": <n>, \
             \"factor_id\": \"<id or null>\", \"draft_rating\": <level or null>, \"final_rating\": <level or null>}]",
        );
    }
    s.push('}');
    s
}

// ---------------------------------------------------------------------------
// Prompt sections

/// Profile block; `None` withholds every demographic field.
pub fn profile_block(profile: Option<&PatientProfile>) -> String {
    match profile {
        Some(p) => format!(
            "Patient profile: age {} years, sex {}, height {} cm, weight {} kg.\nHemiparetic side: {}",
            p.age_years,
            p.sex,
            p.height_cm,
            p.weight_kg,
            p.hemiparetic_side.as_str()
        ),
        None => "Patient profile: not provided.\nHemiparetic side: unknown".to_string(),
    }
}

pub fn phases_block() -> String {
    GaitPhase::ALL
        .iter()
        .map(|p| format!("- {}", p.bounds_label()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One line per factor: `- <id> | levels <min>-<max> | <name> | <descriptors>`.
pub fn factors_block(config: &ScoringConfig, ids: &[String]) -> String {
    ids.iter()
        .filter_map(|id| config.factor(id))
        .map(|f| {
            let levels: Vec<String> = f.levels.iter().map(|l| format!("{}: {}", l.value, l.descriptor)).collect();
            format!(
                "- {} | levels {}-{} | {} | {} | {}",
                f.id,
                f.min_level(),
                f.max_level(),
                f.name,
                f.description,
                levels.join("; ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn observations_block(observations: &[ClinicianObservation]) -> String {
    if observations.is_empty() {
        return "none".to_string();
    }
    observations
        .iter()
        .enumerate()
        .map(|(i, o)| match &o.factor_id {
            Some(f) => format!("[{i}] {} (factor: {f})", o.text.replace('\n', " ")),
            None => format!("[{i}] {}", o.text.replace('\n', " ")),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn frames_line(set: &FrameSet) -> String {
    let idx: Vec<String> = set.frames.iter().map(|f| f.source_index.to_string()).collect();
    format!("FRAMES {}: {}", set.view.as_str(), idx.join(","))
}

pub fn plot_line(plot: &RenderedPlot) -> String {
    format!(
        "PLOT {}: joint={} axis={} side={} max_abs_dev_mm={:.3} peak_at={}%",
        plot.id,
        plot.joint.as_str(),
        plot.axis.as_str(),
        plot.side.as_str(),
        plot.max_abs_deviation_mm,
        plot.peak_deviation_percent
    )
}

fn to_assessments(docs: Vec<DocAssessment>, role: AgentRole) -> Vec<FactorAssessment> {
    docs.into_iter()
        .map(|d| FactorAssessment {
            factor_id: d.factor_id,
            rating: d.rating,
            rationale: d.rationale,
            evidence: d.evidence,
            source_agent: role,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Agents

/// Rates gait factors from anonymized frontal and sagittal frames.
pub fn recording_observer(
    ctx: &AgentContext<'_>,
    frontal: &FrameSet,
    sagittal: &FrameSet,
    profile: Option<&PatientProfile>,
    mode: ObserverMode,
    observations: &[ClinicianObservation],
) -> Result<AgentOutput, AgentError> {
    for set in [frontal, sagittal] {
        if !set.anonymized {
            return Err(AgentError::PrivacyGateViolation { view: set.view });
        }
    }
    let scope: Vec<String> = match mode {
        ObserverMode::Constrained8 => ctx.config.ids_for(Evaluator::Recording),
        ObserverMode::Full14 => ctx.config.factors.iter().map(|f| f.id.clone()).collect(),
    };
    let frames_text = format!("{}\n{}", frames_line(frontal), frames_line(sagittal));
    let values = BTreeMap::from([
        ("profile", profile_block(profile)),
        ("phases", phases_block()),
        ("factors", factors_block(ctx.config, &scope)),
        ("frames", frames_text),
        ("observations", observations_block(observations)),
        ("schema", schema_text(true, false)),
    ]);
    let text = ctx.prompts.recording_observer.render(&values)?;

    let mut parts = vec![ContentPart::Text(text)];
    let mut known = BTreeSet::new();
    for set in [frontal, sagittal] {
        for f in &set.frames {
            known.insert((set.view, f.source_index));
            parts.push(ContentPart::Text(format!("frame:{}:{}", set.view.as_str(), f.source_index)));
            parts.push(ContentPart::Image(ImagePart {
                media_type: f.media_type(),
                bytes: f.bytes.clone(),
                origin: ImageOrigin::Frame {
                    view: set.view,
                    source_index: f.source_index,
                    anonymized: set.anonymized,
                },
            }));
        }
    }
    let request = ctx.request(AgentRole::RecordingObserver, parts);
    let rule = EvidenceRule::Frames(&known);
    let out = complete_with_validation(
        &ctx.dispatcher,
        &request,
        |raw| {
            let doc = parse_document(raw)?;
            let checked = check_scope(&doc, &scope, ctx.config, &rule)?;
            Ok((checked, doc.subject_identification.unwrap_or_default()))
        },
        ctx.retry_budget,
    )?;
    let (checked, subject) = out.value;
    Ok(AgentOutput {
        role: AgentRole::RecordingObserver,
        assessments: to_assessments(checked, AgentRole::RecordingObserver),
        raw_text: out.raw_text,
        attempts: out.attempts,
        subject_identification: subject,
    })
}

/// Rates the trajectory-evaluated factors from patient-vs-normative plots.
/// With a profile, plots must cover every joint and axis on the affected
/// side; without one, any side will do.
pub fn trajectory_analyzer(
    ctx: &AgentContext<'_>,
    plots: &[RenderedPlot],
    profile: Option<&PatientProfile>,
    observations: &[ClinicianObservation],
) -> Result<AgentOutput, AgentError> {
    for joint in Joint::ALL {
        for axis in Axis::ALL {
            let wanted = profile.map(|p| joint.curve_side(p.hemiparetic_side));
            let present = plots
                .iter()
                .any(|p| p.joint == joint && p.axis == axis && wanted.is_none_or(|s| p.side == s));
            if !present {
                return Err(AgentError::MissingPlot { joint, axis });
            }
        }
    }
    let scope = ctx.config.ids_for(Evaluator::Trajectory);
    let plot_text = plots.iter().map(plot_line).collect::<Vec<_>>().join("\n");
    let values = BTreeMap::from([
        ("profile", profile_block(profile)),
        ("phases", phases_block()),
        ("factors", factors_block(ctx.config, &scope)),
        ("plots", plot_text),
        ("observations", observations_block(observations)),
        ("schema", schema_text(false, false)),
    ]);
    let text = ctx.prompts.trajectory_analyzer.render(&values)?;

    let mut parts = vec![ContentPart::Text(text)];
    for p in plots {
        parts.push(ContentPart::Text(format!("plot:{}", p.id)));
        parts.push(ContentPart::Image(ImagePart {
            media_type: "image/png",
            bytes: p.png.clone(),
            origin: ImageOrigin::Plot { id: p.id.clone() },
        }));
    }
    let known: BTreeSet<String> = plots.iter().map(|p| p.id.clone()).collect();
    let request = ctx.request(AgentRole::TrajectoryAnalyzer, parts);
    let rule = EvidenceRule::Plots(&known);
    let out = complete_with_validation(
        &ctx.dispatcher,
        &request,
        |raw| check_scope(&parse_document(raw)?, &scope, ctx.config, &rule),
        ctx.retry_budget,
    )?;
    Ok(AgentOutput {
        role: AgentRole::TrajectoryAnalyzer,
        assessments: to_assessments(out.value, AgentRole::TrajectoryAnalyzer),
        raw_text: out.raw_text,
        attempts: out.attempts,
        subject_identification: SubjectIdentification::Confident,
    })
}

/// Report identity and provenance supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportHeader {
    pub case_id: String,
    pub trial_id: String,
    pub run_id: String,
    pub provenance: Provenance,
}

/// Merges the agents' drafts into one per-factor set, in config order.
pub fn merge_drafts(
    config: &ScoringConfig,
    outputs: &[&AgentOutput],
) -> Result<Vec<FactorAssessment>, AgentError> {
    let mut by_id: BTreeMap<&str, &FactorAssessment> = BTreeMap::new();
    for out in outputs {
        for a in &out.assessments {
            if by_id.insert(&a.factor_id, a).is_some() {
                return Err(AgentError::FactorConflict(a.factor_id.clone()));
            }
        }
    }
    let missing: Vec<String> = config
        .factors
        .iter()
        .filter(|f| !by_id.contains_key(f.id.as_str()))
        .map(|f| f.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AgentError::FactorCoverageGap(missing));
    }
    let extra: Vec<String> = by_id
        .keys()
        .filter(|id| config.factor(id).is_none())
        .map(|id| id.to_string())
        .collect();
    if !extra.is_empty() {
        return Err(AgentError::FactorCoverageGap(extra));
    }
    Ok(config
        .factors
        .iter()
        .map(|f| by_id[f.id.as_str()].clone())
        .collect())
}

/// Reconciles the drafts with clinician notes and produces the report.
pub fn report_generator(
    ctx: &AgentContext<'_>,
    recording: &AgentOutput,
    trajectory: Option<&AgentOutput>,
    observations: &[ClinicianObservation],
    template: ReportTemplate,
    profile: Option<&PatientProfile>,
    header: ReportHeader,
) -> Result<WgsReport, AgentError> {
    let mut outputs = vec![recording];
    outputs.extend(trajectory);
    let drafts = merge_drafts(ctx.config, &outputs)?;
    let scope: Vec<String> = ctx.config.factors.iter().map(|f| f.id.clone()).collect();
    let draft_doc = AgentDocument {
        assessments: drafts
            .iter()
            .map(|a| DocAssessment {
                factor_id: a.factor_id.clone(),
                rating: a.rating,
                rationale: a.rationale.clone(),
                evidence: a.evidence.clone(),
            })
            .collect(),
        subject_identification: None,
        narrative: None,
        reconciliation: Vec::new(),
    };
    let template_name = match template {
        ReportTemplate::ScoringTemplate => "scoring_template",
        ReportTemplate::Narrative => "narrative",
    };
    let values = BTreeMap::from([
        ("profile", profile_block(profile)),
        ("template", template_name.to_string()),
        ("factors", factors_block(ctx.config, &scope)),
        ("observations", observations_block(observations)),
        ("drafts", serde_json::to_string(&draft_doc).expect("draft document serializes")),
        ("schema", schema_text(false, true)),
    ]);
    let text = ctx.prompts.report_generator.render(&values)?;
    let request = ctx.request(AgentRole::ReportGenerator, vec![ContentPart::Text(text)]);
    let rule = EvidenceRule::Notes(observations.len());
    let out = complete_with_validation(
        &ctx.dispatcher,
        &request,
        |raw| {
            let doc = parse_document(raw)?;
            let checked = check_scope(&doc, &scope, ctx.config, &rule)?;
            for r in &doc.reconciliation {
                if r.observation_index >= observations.len() {
                    return Err(format!(
                        "reconciliation refers to observation {}, but only {} exist",
                        r.observation_index,
                        observations.len()
                    ));
                }
            }
            let narrative = doc.narrative.clone().unwrap_or_default();
            if template == ReportTemplate::Narrative && narrative.trim().is_empty() {
                return Err("narrative template requires a non-empty narrative".into());
            }
            Ok((checked, narrative, doc.reconciliation))
        },
        ctx.retry_budget,
    )?;
    let (checked, narrative, reconciled) = out.value;

    let assessments: Vec<FactorAssessment> = checked
        .into_iter()
        .zip(&drafts)
        .map(|(d, draft)| FactorAssessment {
            rating: d.rating,
            rationale: if d.rationale.is_empty() { draft.rationale.clone() } else { d.rationale },
            evidence: if d.evidence.is_empty() { draft.evidence.clone() } else { d.evidence },
            factor_id: d.factor_id,
            source_agent: draft.source_agent,
        })
        .collect();

    let reconciliation = observations
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let r = reconciled.iter().find(|r| r.observation_index == i);
            ReconciliationEntry {
                observation_index: i,
                observation: o.text.clone(),
                factor_id: r.and_then(|r| r.factor_id.clone()),
                draft_rating: r.and_then(|r| r.draft_rating),
                final_rating: r.and_then(|r| r.final_rating),
            }
        })
        .collect();

    let total = score_total(&assessments, ctx.config)?;
    Ok(WgsReport {
        case_id: header.case_id,
        trial_id: header.trial_id,
        run_id: header.run_id,
        assessments,
        total_score: to_f64(total),
        narrative,
        template,
        reconciliation,
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests;
