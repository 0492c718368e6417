use super::*;
use crate::gaitkin::{NormalizedCurve, Side, CURVE_POINTS};
use crate::normbase::{CurveKey, NormativeSubject, Sex};
use crate::pipeline::InputConfig;
use crate::plotgen::render_plot_set;
use crate::wgs::{partition_factors, Rational};
use image::{ImageFormat, Rgb, RgbImage};
use std::sync::Mutex;

fn png(shade: u8) -> Vec<u8> {
    let mut out = Vec::new();
    RgbImage::from_pixel(8, 6, Rgb([shade, shade, shade]))
        .write_to(&mut std::io::Cursor::new(&mut out), ImageFormat::Png)
        .unwrap();
    out
}

fn frames(view: View, n: usize, anonymized: bool) -> FrameSet {
    let mut set = FrameSet::new(
        view,
        (0..n)
            .map(|i| Frame {
                source_index: i * 2,
                bytes: png(i as u8),
            })
            .collect(),
    );
    set.anonymized = anonymized;
    set
}

fn profile() -> PatientProfile {
    PatientProfile {
        id: "P01".into(),
        age_years: 63,
        sex: Sex::Male,
        height_cm: 172.0,
        weight_kg: 71.5,
        hemiparetic_side: Side::Left,
    }
}

fn curves(offset: f64) -> BTreeMap<CurveKey, NormalizedCurve> {
    CurveKey::all()
        .into_iter()
        .enumerate()
        .map(|(n, k)| {
            let values = (0..CURVE_POINTS)
                .map(|i| offset + 30.0 * ((i as f64 / 16.0) + n as f64).sin())
                .collect();
            (k, NormalizedCurve::new(k.joint, k.axis, k.side, values).unwrap())
        })
        .collect()
}

fn subject() -> NormativeSubject {
    NormativeSubject {
        id: "N01".into(),
        age_years: 60,
        sex: Sex::Male,
        height_cm: 170.0,
        weight_kg: 70.0,
        curves: curves(0.0),
    }
}

fn plots(patient_offset: f64) -> Vec<RenderedPlot> {
    render_plot_set("c1", Side::Left, &curves(patient_offset), &subject()).unwrap()
}

struct Recorder(Mutex<Vec<PromptAuditEntry>>);

impl PromptSink for Recorder {
    fn record(&self, entry: &PromptAuditEntry) {
        self.0.lock().unwrap().push(entry.clone());
    }
}

struct Env {
    config: ScoringConfig,
    prompts: PromptLibrary,
    models: AgentModels,
    meta: RequestMeta,
}

impl Env {
    fn new() -> Self {
        Self {
            config: ScoringConfig::default_wgs(),
            prompts: PromptLibrary::builtin(),
            models: AgentModels::single("mock-model"),
            meta: RequestMeta {
                case_id: "c1".into(),
                trial_id: "t1".into(),
                run_index: 1,
                agent: None,
                attempt: 0,
            },
        }
    }

    fn ctx<'a>(&'a self, provider: &'a dyn LlmProvider) -> AgentContext<'a> {
        AgentContext {
            dispatcher: Dispatcher::new(provider),
            models: &self.models,
            config: &self.config,
            prompts: &self.prompts,
            retry_budget: DEFAULT_RETRY_BUDGET,
            meta: &self.meta,
        }
    }
}

fn header() -> ReportHeader {
    ReportHeader {
        case_id: "c1".into(),
        trial_id: "t1".into(),
        run_id: "c1-t1-r1".into(),
        provenance: Provenance {
            provider_id: MOCK_PROVIDER_ID.into(),
            model_id: "mock-model".into(),
            input_configuration: InputConfig::full(),
            scoring_config: "wgs-1".into(),
            prompt_templates: PromptLibrary::builtin().versions(),
            started_at: "2026-01-01T00:00:00Z".into(),
            completed_at: "2026-01-01T00:00:00Z".into(),
            subject_identification: SubjectIdentification::Confident,
        },
    }
}

fn ids(out: &AgentOutput) -> Vec<String> {
    out.assessments.iter().map(|a| a.factor_id.clone()).collect()
}

#[test]
fn constrained_observer_rates_the_recording_factors() {
    let env = Env::new();
    let mock = MockProvider::default();
    let out = recording_observer(
        &env.ctx(&mock),
        &frames(View::Frontal, 5, true),
        &frames(View::Sagittal, 5, true),
        Some(&profile()),
        ObserverMode::Constrained8,
        &[],
    )
    .unwrap();
    assert_eq!(ids(&out), partition_factors(&env.config).0);
    assert_eq!(out.attempts, 1);
    for a in &out.assessments {
        assert!(a.evidence.iter().any(|e| matches!(e, EvidenceRef::Frame { .. })));
        assert_eq!(a.source_agent, AgentRole::RecordingObserver);
    }
}

#[test]
fn full_observer_rates_every_factor() {
    let env = Env::new();
    let mock = MockProvider::default();
    let out = recording_observer(
        &env.ctx(&mock),
        &frames(View::Frontal, 3, true),
        &frames(View::Sagittal, 3, true),
        None,
        ObserverMode::Full14,
        &[],
    )
    .unwrap();
    let expected: Vec<String> = env.config.factors.iter().map(|f| f.id.clone()).collect();
    assert_eq!(ids(&out), expected);
}

#[test]
fn raw_frames_never_reach_a_remote_provider() {
    let env = Env::new();
    let remote = MockProvider::default().with_capabilities(Capabilities {
        supports_images: true,
        supports_temperature: true,
        remote: true,
        max_images: 256,
    });
    let err = recording_observer(
        &env.ctx(&remote),
        &frames(View::Frontal, 3, true),
        &frames(View::Sagittal, 3, false),
        Some(&profile()),
        ObserverMode::Constrained8,
        &[],
    )
    .unwrap_err();
    assert_eq!(err, AgentError::PrivacyGateViolation { view: View::Sagittal });
    assert_eq!(remote.call_count(), 0);
}

#[test]
fn analyzer_rates_trajectory_factors_from_plots() {
    let env = Env::new();
    let mock = MockProvider::default();
    let out = trajectory_analyzer(&env.ctx(&mock), &plots(0.0), Some(&profile()), &[]).unwrap();
    assert_eq!(ids(&out), partition_factors(&env.config).1);
    for a in &out.assessments {
        assert_eq!(a.rating, env.config.factor(&a.factor_id).unwrap().min_level(), "{}", a.factor_id);
        assert!(a.evidence.iter().any(|e| matches!(e, EvidenceRef::Plot(_))));
    }
}

#[test]
fn analyzer_levels_follow_deviation_thresholds() {
    let env = Env::new();
    let mock = MockProvider::default();
    for (offset, level) in [(5.0, 1), (12.0, 2), (40.0, 3)] {
        let out = trajectory_analyzer(&env.ctx(&mock), &plots(offset), Some(&profile()), &[]).unwrap();
        assert!(out.assessments.iter().all(|a| a.rating == level), "offset {offset}");
    }
}

#[test]
fn missing_ankle_plot_is_reported() {
    let env = Env::new();
    let mock = MockProvider::default();
    let partial: Vec<RenderedPlot> = plots(0.0)
        .into_iter()
        .filter(|p| !(p.joint == Joint::Ankle && p.axis == Axis::X))
        .collect();
    let err = trajectory_analyzer(&env.ctx(&mock), &partial, Some(&profile()), &[]).unwrap_err();
    assert_eq!(
        err,
        AgentError::MissingPlot {
            joint: Joint::Ankle,
            axis: Axis::X
        }
    );
    assert_eq!(mock.call_count(), 0);
}

#[test]
fn analyzer_requires_the_affected_side() {
    let env = Env::new();
    let mock = MockProvider::default();
    let right = render_plot_set("c1", Side::Right, &curves(0.0), &subject()).unwrap();
    let err = trajectory_analyzer(&env.ctx(&mock), &right, Some(&profile()), &[]).unwrap_err();
    assert!(matches!(err, AgentError::MissingPlot { joint: Joint::Hip, .. }));
    assert!(trajectory_analyzer(&env.ctx(&mock), &right, None, &[]).is_ok());
}

fn drafts(env: &Env, mock: &MockProvider) -> (AgentOutput, AgentOutput) {
    let rec = recording_observer(
        &env.ctx(mock),
        &frames(View::Frontal, 3, true),
        &frames(View::Sagittal, 3, true),
        Some(&profile()),
        ObserverMode::Constrained8,
        &[],
    )
    .unwrap();
    let traj = trajectory_analyzer(&env.ctx(mock), &plots(0.0), Some(&profile()), &[]).unwrap();
    (rec, traj)
}

#[test]
fn all_minimum_drafts_total_the_scale_floor() {
    let env = Env::new();
    let mock = MockProvider::default();
    let (rec, traj) = drafts(&env, &mock);
    let report = report_generator(
        &env.ctx(&mock),
        &rec,
        Some(&traj),
        &[],
        ReportTemplate::ScoringTemplate,
        Some(&profile()),
        header(),
    )
    .unwrap();
    assert_eq!(report.assessments.len(), 14);
    assert_eq!(report.exact_total(&env.config).unwrap(), Rational::new(1335, 100));
    assert_eq!(report.total_score, 13.35);
    report.check(&env.config).unwrap();
    let sources: Vec<AgentRole> = report.assessments.iter().map(|a| a.source_agent).collect();
    assert_eq!(sources.iter().filter(|&&s| s == AgentRole::RecordingObserver).count(), 8);
    assert_eq!(sources.iter().filter(|&&s| s == AgentRole::TrajectoryAnalyzer).count(), 6);
}

#[test]
fn coverage_gaps_and_conflicts_are_rejected() {
    let env = Env::new();
    let mock = MockProvider::default();
    let (rec, mut traj) = drafts(&env, &mock);
    let dropped = traj.assessments.pop().unwrap();
    let err = report_generator(
        &env.ctx(&mock),
        &rec,
        Some(&traj),
        &[],
        ReportTemplate::ScoringTemplate,
        None,
        header(),
    )
    .unwrap_err();
    assert_eq!(err, AgentError::FactorCoverageGap(vec![dropped.factor_id.clone()]));

    traj.assessments.push(dropped);
    traj.assessments.push(rec.assessments[0].clone());
    let err = merge_drafts(&env.config, &[&rec, &traj]).unwrap_err();
    assert_eq!(err, AgentError::FactorConflict(rec.assessments[0].factor_id.clone()));
}

#[test]
fn clinician_note_raises_the_named_factor() {
    let env = Env::new();
    let mock = MockProvider::default();
    let (rec, traj) = drafts(&env, &mock);
    let notes = [
        ClinicianObservation::new("circumduction present"),
        ClinicianObservation::new("no gait aid"),
    ];
    let report = report_generator(
        &env.ctx(&mock),
        &rec,
        Some(&traj),
        &notes,
        ReportTemplate::Narrative,
        Some(&profile()),
        header(),
    )
    .unwrap();
    let circ = report.assessment("midswing_circumduction").unwrap();
    assert_eq!(circ.rating, 2);
    assert!(circ.evidence.contains(&EvidenceRef::Note(0)));
    assert_eq!(circ.source_agent, AgentRole::TrajectoryAnalyzer);
    assert_eq!(report.assessment("hand_gait_aid").unwrap().rating, 1);

    let weight = env.config.factor("midswing_circumduction").unwrap().weight;
    assert_eq!(report.exact_total(&env.config).unwrap(), Rational::new(1335, 100) + weight);
    assert_eq!(report.reconciliation.len(), 2);
    assert_eq!(report.reconciliation[0].observation, "circumduction present");
    assert_eq!(
        (report.reconciliation[0].draft_rating, report.reconciliation[0].final_rating),
        (Some(1), Some(2))
    );
    assert!(!report.narrative.is_empty());
    assert!(report.render_markdown(&env.config).contains("circumduction present"));
}

#[test]
fn mock_chain_is_deterministic() {
    let env = Env::new();
    let run = || {
        let mock = MockProvider::default();
        let (rec, traj) = drafts(&env, &mock);
        let notes = [ClinicianObservation::new("reduced knee flexion in initial swing")];
        let r = report_generator(
            &env.ctx(&mock),
            &rec,
            Some(&traj),
            &notes,
            ReportTemplate::Narrative,
            Some(&profile()),
            header(),
        )
        .unwrap();
        serde_json::to_vec(&r).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn withheld_profile_leaves_no_demographics_in_prompts() {
    let env = Env::new();
    let mock = MockProvider::default();
    let sink = Recorder(Mutex::new(Vec::new()));
    let mut ctx = env.ctx(&mock);
    ctx.dispatcher = ctx.dispatcher.with_audit(&sink);
    recording_observer(
        &ctx,
        &frames(View::Frontal, 3, true),
        &frames(View::Sagittal, 3, true),
        None,
        ObserverMode::Full14,
        &[],
    )
    .unwrap();
    let entries = sink.0.lock().unwrap();
    assert_eq!(entries.len(), 1);
    let text = &entries[0].messages[0].text;
    assert!(text.contains("Hemiparetic side: unknown"));
    for s in ["63 years", "Male", "172", "71.5", "Hemiparetic side: left", "P01"] {
        assert!(!text.contains(s), "{s}");
    }
    assert_eq!(entries[0].messages[0].image_sha256.len(), 6);
}

#[test]
fn observer_recovers_from_one_bad_reply() {
    let env = Env::new();
    let mock = MockProvider::default().with_script(["not json at all".to_string()]);
    let out = recording_observer(
        &env.ctx(&mock),
        &frames(View::Frontal, 2, true),
        &frames(View::Sagittal, 2, true),
        Some(&profile()),
        ObserverMode::Constrained8,
        &[],
    )
    .unwrap();
    assert_eq!(out.attempts, 2);
    assert_eq!(mock.calls().iter().map(|m| m.attempt).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn out_of_scope_reply_is_repaired_then_rejected() {
    let env = Env::new();
    let bad = r#"{"assessments":[{"factor_id":"hand_gait_aid","rating":9,"evidence":["frame:frontal:0"]}]}"#;
    let mock = MockProvider::default().with_script(vec![bad.to_string(); 3]);
    let err = recording_observer(
        &env.ctx(&mock),
        &frames(View::Frontal, 2, true),
        &frames(View::Sagittal, 2, true),
        Some(&profile()),
        ObserverMode::Constrained8,
        &[],
    )
    .unwrap_err();
    assert!(matches!(err, AgentError::AgentOutputInvalid { attempts: 3, .. }));
}

#[test]
fn mixed_models_need_explicit_permission() {
    let mut models = AgentModels::single("a");
    assert!(models.validate().is_ok());
    models.overrides.insert(AgentRole::ReportGenerator, "b".into());
    assert!(matches!(models.validate(), Err(AgentError::MixedModels(_))));
    models.allow_mixed = true;
    assert!(models.validate().is_ok());
    assert_eq!(models.for_role(AgentRole::ReportGenerator), "b");
    assert_eq!(models.for_role(AgentRole::RecordingObserver), "a");
}

#[test]
fn documents_parse_through_fences() {
    let doc = parse_document("Here:\n```json\n{\"assessments\":[]}\n```").unwrap();
    assert!(doc.assessments.is_empty());
    assert!(parse_document("{\"assessments\": 3}").is_err());
}
