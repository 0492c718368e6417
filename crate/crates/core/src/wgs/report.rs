use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{format_decimal, score_total, to_f64, Rational, ScoreError, ScoringConfig};
use crate::pipeline::InputConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    RecordingObserver,
    TrajectoryAnalyzer,
    ReportGenerator,
    Clinician,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::RecordingObserver => "recording_observer",
            AgentRole::TrajectoryAnalyzer => "trajectory_analyzer",
            AgentRole::ReportGenerator => "report_generator",
            AgentRole::Clinician => "clinician",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Sagittal,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Sagittal => "sagittal",
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "frontal" => Ok(View::Frontal),
            "sagittal" | "side" => Ok(View::Sagittal),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

/// What an assessment points at. Serialised as `frame:<view>:<index>`,
/// `plot:<plot id>` or `note:<index>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvidenceRef {
    Frame { view: View, index: usize },
    Plot(String),
    Note(usize),
}

impl fmt::Display for EvidenceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvidenceRef::Frame { view, index } => write!(f, "frame:{}:{index}", view.as_str()),
            EvidenceRef::Plot(id) => write!(f, "plot:{id}"),
            EvidenceRef::Note(i) => write!(f, "note:{i}"),
        }
    }
}

impl FromStr for EvidenceRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("frame:") {
            let (view, index) = rest
                .split_once(':')
                .ok_or_else(|| format!("frame evidence needs view and index: {s:?}"))?;
            let index = index
                .parse()
                .map_err(|_| format!("bad frame index in {s:?}"))?;
            return Ok(EvidenceRef::Frame {
                view: view.parse()?,
                index,
            });
        }
        if let Some(id) = s.strip_prefix("plot:") {
            if id.is_empty() {
                return Err("empty plot id".into());
            }
            return Ok(EvidenceRef::Plot(id.to_string()));
        }
        if let Some(i) = s.strip_prefix("note:") {
            return i
                .parse()
                .map(EvidenceRef::Note)
                .map_err(|_| format!("bad note index in {s:?}"));
        }
        Err(format!("unrecognised evidence reference {s:?}"))
    }
}

impl Serialize for EvidenceRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EvidenceRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorAssessment {
    pub factor_id: String,
    pub rating: u8,
    pub rationale: String,
    pub evidence: Vec<EvidenceRef>,
    pub source_agent: AgentRole,
}

impl FactorAssessment {
    pub fn new(factor_id: &str, rating: u8, source_agent: AgentRole) -> Self {
        Self {
            factor_id: factor_id.to_string(),
            rating,
            rationale: String::new(),
            evidence: Vec::new(),
            source_agent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportTemplate {
    #[default]
    ScoringTemplate,
    Narrative,
}

/// How one clinician note was reconciled against the agents' drafts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconciliationEntry {
    pub observation_index: usize,
    pub observation: String,
    pub factor_id: Option<String>,
    pub draft_rating: Option<u8>,
    pub final_rating: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubjectIdentification {
    #[default]
    Confident,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider_id: String,
    pub model_id: String,
    pub input_configuration: InputConfig,
    pub scoring_config: String,
    pub prompt_templates: Vec<String>,
    pub started_at: String,
    pub completed_at: String,
    pub subject_identification: SubjectIdentification,
}

/// A drafted 14-factor report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WgsReport {
    pub case_id: String,
    pub trial_id: String,
    pub run_id: String,
    pub assessments: Vec<FactorAssessment>,
    pub total_score: f64,
    pub narrative: String,
    pub template: ReportTemplate,
    pub reconciliation: Vec<ReconciliationEntry>,
    pub provenance: Provenance,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ReportInvariantError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("stored total {stored} differs from recomputed {recomputed}")]
    TotalMismatch { stored: f64, recomputed: f64 },
}

impl WgsReport {
    pub fn exact_total(&self, config: &ScoringConfig) -> Result<Rational, ScoreError> {
        score_total(&self.assessments, config)
    }

    /// Recomputes `total_score` from the assessments.
    pub fn refresh_total(&mut self, config: &ScoringConfig) -> Result<(), ScoreError> {
        self.total_score = to_f64(self.exact_total(config)?);
        Ok(())
    }

    pub fn check(&self, config: &ScoringConfig) -> Result<(), ReportInvariantError> {
        let recomputed = to_f64(self.exact_total(config)?);
        if recomputed != self.total_score {
            return Err(ReportInvariantError::TotalMismatch {
                stored: self.total_score,
                recomputed,
            });
        }
        Ok(())
    }

    pub fn assessment(&self, factor_id: &str) -> Option<&FactorAssessment> {
        self.assessments.iter().find(|a| a.factor_id == factor_id)
    }

    /// Factor table plus narrative, as shown to reviewers.
    pub fn render_markdown(&self, config: &ScoringConfig) -> String {
        let mut out = format!(
            "# Gait assessment draft: case {} / trial {}\n\n",
            self.case_id, self.trial_id
        );
        out.push_str("| Factor | Rating | Descriptor | Evaluated by | Rationale |\n");
        out.push_str("|---|---|---|---|---|\n");
        for def in &config.factors {
            if let Some(a) = self.assessment(&def.id) {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    def.name,
                    a.rating,
                    def.descriptor(a.rating).unwrap_or("-"),
                    a.source_agent.as_str(),
                    a.rationale.replace('|', "/").replace('\n', " ")
                ));
            }
        }
        let total = self
            .exact_total(config)
            .map(format_decimal)
            .unwrap_or_else(|_| format!("{:.2}", self.total_score));
        out.push_str(&format!(
            "\n**Total WGS:** {total} (range {}-{})\n",
            format_decimal(config.min_total()),
            format_decimal(config.max_total())
        ));
        if !self.reconciliation.is_empty() {
            out.push_str("\n## Clinician observations\n\n");
            for r in &self.reconciliation {
                let change = match (r.draft_rating, r.final_rating) {
                    (Some(a), Some(b)) if a != b => format!(" (rating {a} -> {b})"),
                    _ => String::new(),
                };
                out.push_str(&format!(
                    "- [{}] {}{}{}\n",
                    r.observation_index,
                    r.observation,
                    r.factor_id
                        .as_deref()
                        .map(|f| format!(" -> {f}"))
                        .unwrap_or_default(),
                    change
                ));
            }
        }
        if !self.narrative.is_empty() {
            out.push_str("\n## Summary\n\n");
            out.push_str(&self.narrative);
            out.push('\n');
        }
        out
    }
}
