use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::provider::{Capabilities, ChatRequest, ChatRole, ContentPart, LlmProvider, ProviderError, RequestMeta};
use super::{AgentDocument, DocAssessment, DocReconciliation};
use crate::gaitkin::{Axis, Joint};
use crate::wgs::{EvidenceRef, SubjectIdentification, View};

pub const MOCK_PROVIDER_ID: &str = "mock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotSelector {
    pub joint: Joint,
    pub axis: Axis,
}

/// Rules driving [`MockProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixture {
    /// Ratings for factors judged from recordings; absent factors get the
    /// lowest level.
    pub recording_ratings: BTreeMap<String, u8>,
    /// Deviation cut points in mm. A factor's level is its lowest level plus
    /// the number of cut points at or below the plot's max deviation.
    pub deviation_thresholds_mm: Vec<f64>,
    /// Which plot each trajectory factor is read from.
    pub factor_plots: BTreeMap<String, PlotSelector>,
    /// Lower-case phrase to factor id, checked in order.
    pub keywords: Vec<(String, String)>,
    /// Whole words that mark a note as describing normal gait.
    pub negations: Vec<String>,
    pub subject_identification: SubjectIdentification,
}

impl Default for MockFixture {
    fn default() -> Self {
        let plot = |joint, axis| PlotSelector { joint, axis };
        let kw = |k: &str, f: &str| (k.to_string(), f.to_string());
        Self {
            recording_ratings: BTreeMap::new(),
            deviation_thresholds_mm: vec![10.0, 25.0],
            factor_plots: BTreeMap::from([
                ("affected_stance_time".to_string(), plot(Joint::Ankle, Axis::Y)),
                ("affected_hip_extension".to_string(), plot(Joint::Hip, Axis::Y)),
                ("affected_leg_external_rotation".to_string(), plot(Joint::Knee, Axis::X)),
                ("midswing_circumduction".to_string(), plot(Joint::Ankle, Axis::X)),
                ("midswing_hip_hiking".to_string(), plot(Joint::Hip, Axis::Z)),
                ("terminal_swing_pelvic_rotation".to_string(), plot(Joint::Torso, Axis::Y)),
            ]),
            keywords: vec![
                kw("knee flexion", "initial_swing_knee_flexion"),
                kw("circumduction", "midswing_circumduction"),
                kw("stance time", "affected_stance_time"),
                kw("hip extension", "affected_hip_extension"),
                kw("step length", "unaffected_step_length"),
                kw("hip hiking", "midswing_hip_hiking"),
                kw("external rotation", "affected_leg_external_rotation"),
                kw("pelvic rotation", "terminal_swing_pelvic_rotation"),
                kw("toe clearance", "toe_clearance"),
                kw("foot contact", "initial_foot_contact"),
                kw("weight shift", "affected_weight_shift"),
                kw("stance width", "stance_width"),
                kw("guarded", "guardedness"),
                kw("gait aid", "hand_gait_aid"),
                kw("cane", "hand_gait_aid"),
            ],
            negations: ["no", "not", "without", "absent", "none", "normal"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            subject_identification: SubjectIdentification::Confident,
        }
    }
}

/// Deterministic offline provider. Replies are a pure function of the
/// prompt text and the fixture; image bytes are ignored.
pub struct MockProvider {
    id: String,
    fixture: MockFixture,
    capabilities: Capabilities,
    script: Mutex<VecDeque<String>>,
    failing_runs: BTreeSet<usize>,
    calls: Mutex<Vec<RequestMeta>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new(MockFixture::default())
    }
}

impl MockProvider {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            id: MOCK_PROVIDER_ID.to_string(),
            fixture,
            capabilities: Capabilities {
                supports_images: true,
                supports_temperature: true,
                remote: false,
                max_images: 256,
            },
            script: Mutex::new(VecDeque::new()),
            failing_runs: BTreeSet::new(),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Replies returned verbatim, in order, before the rules take over.
    pub fn with_script(self, replies: impl IntoIterator<Item = String>) -> Self {
        self.script.lock().unwrap().extend(replies);
        self
    }

    /// Every request belonging to run `run_index` fails.
    pub fn failing_run(mut self, run_index: usize) -> Self {
        self.failing_runs.insert(run_index);
        self
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    pub fn calls(&self) -> Vec<RequestMeta> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    fn respond(&self, prompt: &str) -> Result<String, String> {
        let sections = Sections::parse(prompt);
        let doc = match sections.agent.as_deref() {
            Some("recording_observer") => self.observe(&sections),
            Some("trajectory_analyzer") => self.analyze(&sections),
            Some("report_generator") => self.reconcile(&sections)?,
            other => return Err(format!("unknown agent {other:?}")),
        };
        Ok(serde_json::to_string_pretty(&doc).expect("document serializes"))
    }

    fn observe(&self, s: &Sections) -> AgentDocument {
        let mut evidence = Vec::new();
        for view in [View::Sagittal, View::Frontal] {
            if let Some(&first) = s.frames.get(&view).and_then(|f| f.first()) {
                evidence.push(EvidenceRef::Frame { view, index: first });
            }
        }
        let assessments = s
            .factors
            .iter()
            .map(|f| {
                let annotated = self.fixture.recording_ratings.get(&f.id).copied();
                let rating = annotated.unwrap_or(f.min).clamp(f.min, f.max);
                DocAssessment {
                    factor_id: f.id.clone(),
                    rating,
                    rationale: if rating > f.min {
                        format!("Deviation visible across the sampled frames (level {rating}).")
                    } else {
                        "No deviation visible in the sampled frames.".to_string()
                    },
                    evidence: evidence.clone(),
                }
            })
            .collect();
        AgentDocument {
            assessments,
            subject_identification: Some(self.fixture.subject_identification),
            narrative: None,
            reconciliation: Vec::new(),
        }
    }

    fn analyze(&self, s: &Sections) -> AgentDocument {
        let assessments = s
            .factors
            .iter()
            .map(|f| {
                let selector = self.fixture.factor_plots.get(&f.id);
                let mut best: Option<&PlotInfo> = None;
                for p in &s.plots {
                    if selector.is_some_and(|sel| sel.joint == p.joint && sel.axis == p.axis)
                        && best.is_none_or(|b| p.deviation > b.deviation)
                    {
                        best = Some(p);
                    }
                }
                match best.or(s.plots.first()) {
                    Some(p) if best.is_some() => {
                        let steps = self
                            .fixture
                            .deviation_thresholds_mm
                            .iter()
                            .filter(|&&t| p.deviation >= t)
                            .count();
                        let rating = (f.min as usize + steps).min(f.max as usize) as u8;
                        DocAssessment {
                            factor_id: f.id.clone(),
                            rating,
                            rationale: format!(
                                "Largest gap between patient and reference curves is {:.1} mm at {}% of the cycle.",
                                p.deviation, p.peak
                            ),
                            evidence: vec![EvidenceRef::Plot(p.id.clone())],
                        }
                    }
                    fallback => DocAssessment {
                        factor_id: f.id.clone(),
                        rating: f.min,
                        rationale: "No plot maps to this factor; rated normal.".to_string(),
                        evidence: fallback.map(|p| EvidenceRef::Plot(p.id.clone())).into_iter().collect(),
                    },
                }
            })
            .collect();
        AgentDocument {
            assessments,
            subject_identification: None,
            narrative: None,
            reconciliation: Vec::new(),
        }
    }

    fn match_factor(&self, note: &Observation) -> Option<String> {
        if let Some(f) = &note.factor {
            return Some(f.clone());
        }
        let lower = note.text.to_lowercase();
        self.fixture
            .keywords
            .iter()
            .find(|(k, _)| lower.contains(k.as_str()))
            .map(|(_, f)| f.clone())
    }

    fn negated(&self, text: &str) -> bool {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .any(|w| self.fixture.negations.iter().any(|n| n == w))
    }

    fn reconcile(&self, s: &Sections) -> Result<AgentDocument, String> {
        let drafts: AgentDocument =
            serde_json::from_str(s.drafts.as_deref().ok_or("no draft assessments")?).map_err(|e| e.to_string())?;
        let mut assessments = drafts.assessments;
        let mut reconciliation = Vec::new();
        let mut raised = BTreeSet::new();
        for note in &s.observations {
            let factor = self.match_factor(note);
            let target = factor
                .as_ref()
                .and_then(|f| assessments.iter_mut().find(|a| &a.factor_id == f));
            let Some(a) = target else {
                reconciliation.push(DocReconciliation {
                    observation_index: note.index,
                    factor_id: factor,
                    draft_rating: None,
                    final_rating: None,
                });
                continue;
            };
            let max = s.factors.iter().find(|f| f.id == a.factor_id).map_or(a.rating, |f| f.max);
            let draft = a.rating;
            if !self.negated(&note.text) && raised.insert(a.factor_id.clone()) {
                a.rating = (draft + 1).min(max);
                a.rationale = format!("{} Raised after clinician note [{}].", a.rationale, note.index)
                    .trim()
                    .to_string();
            }
            a.evidence.push(EvidenceRef::Note(note.index));
            reconciliation.push(DocReconciliation {
                observation_index: note.index,
                factor_id: Some(a.factor_id.clone()),
                draft_rating: Some(draft),
                final_rating: Some(a.rating),
            });
        }

        let elevated: Vec<String> = assessments
            .iter()
            .filter(|a| s.factors.iter().any(|f| f.id == a.factor_id && a.rating > f.min))
            .map(|a| {
                let name = s.factors.iter().find(|f| f.id == a.factor_id).map_or(&a.factor_id, |f| &f.name);
                format!("{name} (level {})", a.rating)
            })
            .collect();
        let narrative = match s.template.as_deref() {
            Some("narrative") if elevated.is_empty() => {
                "All assessed factors were rated at the normal level. No gait deviation requires follow-up.".to_string()
            }
            Some("narrative") => format!(
                "Gait deviations were rated above normal for: {}. Remaining factors were rated normal.",
                elevated.join(", ")
            ),
            _ => format!("{} of {} factors rated above normal.", elevated.len(), assessments.len()),
        };
        Ok(AgentDocument {
            assessments,
            subject_identification: None,
            narrative: Some(narrative),
            reconciliation,
        })
    }
}

impl LlmProvider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.lock().unwrap().push(request.meta.clone());
        if self.failing_runs.contains(&request.meta.run_index) {
            return Err(ProviderError::Injected(format!("run {}", request.meta.run_index)));
        }
        if let Some(reply) = self.script.lock().unwrap().pop_front() {
            return Ok(reply);
        }
        let prompt = request
            .messages
            .iter()
            .find(|m| m.role == ChatRole::User)
            .and_then(|m| {
                m.parts.iter().find_map(|p| match p {
                    ContentPart::Text(t) => Some(t.as_str()),
                    ContentPart::Image(_) => None,
                })
            })
            .unwrap_or_default();
        self.respond(prompt).map_err(ProviderError::InvalidResponse)
    }
}

struct FactorLine {
    id: String,
    name: String,
    min: u8,
    max: u8,
}

struct PlotInfo {
    id: String,
    joint: Joint,
    axis: Axis,
    deviation: f64,
    peak: String,
}

struct Observation {
    index: usize,
    text: String,
    factor: Option<String>,
}

#[derive(Default)]
struct Sections {
    agent: Option<String>,
    template: Option<String>,
    factors: Vec<FactorLine>,
    frames: BTreeMap<View, Vec<usize>>,
    plots: Vec<PlotInfo>,
    observations: Vec<Observation>,
    drafts: Option<String>,
}

impl Sections {
    fn parse(prompt: &str) -> Self {
        let mut s = Sections::default();
        let mut block = "";
        let mut lines = prompt.lines();
        while let Some(line) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                block = "";
                continue;
            }
            if let Some(v) = line.strip_prefix("AGENT:") {
                s.agent = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("TEMPLATE:") {
                s.template = Some(v.trim().to_string());
            } else if line == "FACTORS:" {
                block = "factors";
            } else if line == "CLINICIAN OBSERVATIONS:" {
                block = "observations";
            } else if line == "DRAFT ASSESSMENTS:" {
                s.drafts = lines.next().map(str::to_string);
            } else if let Some(rest) = line.strip_prefix("FRAMES ") {
                if let Some((view, list)) = rest.split_once(':') {
                    if let Ok(view) = view.trim().parse::<View>() {
                        let idx = list.split(',').filter_map(|x| x.trim().parse().ok()).collect();
                        s.frames.insert(view, idx);
                    }
                }
            } else if let Some(rest) = line.strip_prefix("PLOT ") {
                s.plots.extend(parse_plot(rest));
            } else if block == "factors" {
                s.factors.extend(parse_factor(line));
            } else if block == "observations" {
                s.observations.extend(parse_observation(line));
            }
        }
        s
    }
}

fn parse_factor(line: &str) -> Option<FactorLine> {
    let mut cols = line.strip_prefix("- ")?.split(" | ");
    let id = cols.next()?.trim().to_string();
    let (min, max) = cols.next()?.trim().strip_prefix("levels ")?.split_once('-')?;
    let name = cols.next().unwrap_or(&id).trim().to_string();
    Some(FactorLine {
        id,
        name,
        min: min.parse().ok()?,
        max: max.parse().ok()?,
    })
}

fn parse_plot(rest: &str) -> Option<PlotInfo> {
    let (id, fields) = rest.split_once(':')?;
    let kv: BTreeMap<&str, &str> = fields.split_whitespace().filter_map(|f| f.split_once('=')).collect();
    Some(PlotInfo {
        id: id.trim().to_string(),
        joint: Joint::parse(kv.get("joint")?)?,
        axis: Axis::parse(kv.get("axis")?)?,
        deviation: kv.get("max_abs_dev_mm")?.parse().ok()?,
        peak: kv.get("peak_at").unwrap_or(&"?").to_string(),
    })
}

fn parse_observation(line: &str) -> Option<Observation> {
    let rest = line.strip_prefix('[')?;
    let (idx, text) = rest.split_once(']')?;
    let text = text.trim();
    let (text, factor) = match text.strip_suffix(')').and_then(|t| t.rsplit_once(" (factor: ")) {
        Some((t, f)) => (t.to_string(), Some(f.to_string())),
        None => (text.to_string(), None),
    };
    Some(Observation {
        index: idx.parse().ok()?,
        text,
        factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_lines_parse_with_tags() {
        let o = parse_observation("[2] hip hiking seen (factor: midswing_hip_hiking)").unwrap();
        assert_eq!((o.index, o.text.as_str()), (2, "hip hiking seen"));
        assert_eq!(o.factor.as_deref(), Some("midswing_hip_hiking"));
        assert!(parse_observation("none").is_none());
    }

    #[test]
    fn negation_is_word_based() {
        let m = MockProvider::default();
        assert!(m.negated("No gait aid"));
        assert!(m.negated("knee flexion normal"));
        assert!(!m.negated("circumduction present"));
        assert!(!m.negated("notable circumduction"));
    }

    #[test]
    fn plot_lines_parse() {
        let p = parse_plot("c1_hip_z_left: joint=hip axis=z side=left max_abs_dev_mm=12.500 peak_at=70%").unwrap();
        assert_eq!((p.joint, p.axis, p.deviation), (Joint::Hip, Axis::Z, 12.5));
    }
}
