use super::*;

use oga_core::agents::{Frame, FrameSet};
use oga_core::gaitkin::Side;
use oga_core::normbase::Sex;
use oga_core::pipeline::{write_frame_archive, FixedClock};
use oga_core::wgs::{FactorAssessment, Provenance, Rational, SubjectIdentification};

fn weight_of(config: &ScoringConfig, id: &str) -> Rational {
    config.factor(id).unwrap().weight
}

fn clock() -> Arc<dyn Clock> {
    Arc::new(FixedClock::default())
}

fn profile() -> PatientProfile {
    PatientProfile {
        id: "p1".into(),
        age_years: 61,
        sex: Sex::Female,
        height_cm: 168.0,
        weight_kg: 70.0,
        hemiparetic_side: Side::Left,
    }
}

fn new_case(id: &str) -> NewCase {
    NewCase {
        id: id.into(),
        synthetic: true,
        reference_total: Some(20.0),
        profile: profile(),
        observations: Vec::new(),
        alias: BTreeMap::new(),
        mock_fixture: None,
    }
}

fn archive(view: View) -> Vec<u8> {
    let frames = (0..3)
        .map(|i| Frame {
            source_index: i,
            bytes: vec![0x89, b'P', b'N', b'G', i as u8],
        })
        .collect();
    write_frame_archive(&FrameSet::new(view, frames)).unwrap()
}

fn upload(id: &str) -> TrialUpload {
    TrialUpload {
        id: id.into(),
        reference_total: None,
        trajectory_csv: Some(b"frame,time\n".to_vec()),
        frontal_zip: archive(View::Frontal),
        sagittal_zip: archive(View::Sagittal),
    }
}

fn request(runs: usize) -> RunRequest {
    RunRequest {
        input: InputConfig::full(),
        provider: "mock".into(),
        runs,
        seed: 0,
        template: ReportTemplate::ScoringTemplate,
    }
}

/// Every factor at its lowest level.
fn draft_report(config: &ScoringConfig, case: &str, trial: &str, run: usize) -> WgsReport {
    let mut r = WgsReport {
        case_id: case.into(),
        trial_id: trial.into(),
        run_id: format!("{case}-{trial}-r{run}"),
        assessments: config
            .factors
            .iter()
            .map(|f| FactorAssessment::new(&f.id, f.min_level(), AgentRole::RecordingObserver))
            .collect(),
        total_score: 0.0,
        narrative: "draft".into(),
        template: ReportTemplate::ScoringTemplate,
        reconciliation: Vec::new(),
        provenance: Provenance {
            provider_id: "mock".into(),
            model_id: "mock".into(),
            input_configuration: InputConfig::full(),
            scoring_config: "wgs/1".into(),
            prompt_templates: Vec::new(),
            started_at: FixedClock::DEFAULT_TIMESTAMP.into(),
            completed_at: FixedClock::DEFAULT_TIMESTAMP.into(),
            subject_identification: SubjectIdentification::Confident,
        },
    };
    r.refresh_total(config).unwrap();
    r
}

struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
    store: Store,
    config: ScoringConfig,
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    World {
        store: Store::open(&root, clock()).unwrap(),
        _dir: dir,
        root,
        config: ScoringConfig::default_wgs(),
    }
}

/// A case with one trial and one completed run of `runs` reports.
fn reviewed_case(w: &World, id: &str, runs: usize) -> RunRecord {
    w.store.create_case(new_case(id)).unwrap();
    w.store.attach_trial(id, upload("t1")).unwrap();
    let run = w.store.start_run(id, request(runs)).unwrap();
    let reports = (1..=runs).map(|m| draft_report(&w.config, id, "t1", m)).collect();
    w.store
        .finish_run(
            &run.token,
            RunCompletion {
                reports,
                ..RunCompletion::default()
            },
        )
        .unwrap()
}

fn rating_edit(base: u32, factor: &str, rating: u8) -> ReportEdit {
    ReportEdit {
        editor: "pt-1".into(),
        base_version: base,
        assessments: vec![AssessmentEdit {
            factor_id: factor.into(),
            rating: Some(rating),
            rationale: None,
        }],
        narrative: None,
    }
}

#[test]
fn lifecycle_follows_the_state_order() {
    let w = world();
    assert_eq!(w.store.create_case(new_case("c1")).unwrap().state, CaseState::Draft);
    assert!(matches!(
        w.store.start_run("c1", request(1)),
        Err(StoreError::Invalid(_))
    ));
    w.store.attach_trial("c1", upload("t1")).unwrap();
    let run = w.store.start_run("c1", request(2)).unwrap();
    assert_eq!(run.token, "c1-b1");
    assert_eq!(w.store.case("c1").unwrap().state, CaseState::Running);
    assert!(matches!(
        w.store.add_observations("c1", vec![ClinicianObservation::new("no gait aid")]),
        Err(StoreError::Conflict(_))
    ));
    assert!(matches!(w.store.start_run("c1", request(1)), Err(StoreError::Conflict(_))));

    let reports = (1..=2).map(|m| draft_report(&w.config, "c1", "t1", m)).collect();
    let done = w
        .store
        .finish_run(&run.token, RunCompletion { reports, ..Default::default() })
        .unwrap();
    assert_eq!(done.status, RunStatus::Completed);
    assert_eq!(done.report_ids, ["c1-b1-t1-r1", "c1-b1-t1-r2"]);
    assert_eq!(w.store.case("c1").unwrap().state, CaseState::NeedsReview);

    // A re-run from review that fails entirely returns the case to review.
    let rerun = w.store.start_run("c1", request(1)).unwrap();
    let failed = w
        .store
        .finish_run(
            &rerun.token,
            RunCompletion {
                error: Some("provider error".into()),
                failures: vec![RunFailure {
                    trial_id: "t1".into(),
                    run_index: 1,
                    error: "provider error".into(),
                    provider: true,
                }],
                reports: Vec::new(),
            },
        )
        .unwrap();
    assert_eq!(failed.status, RunStatus::Failed);
    assert!(failed.provider_failure);
    assert_eq!(w.store.case("c1").unwrap().state, CaseState::NeedsReview);

    w.store.finalize_report("c1-b1-t1-r1", "pt-1").unwrap();
    assert_eq!(w.store.case("c1").unwrap().state, CaseState::NeedsReview);
    w.store.finalize_report("c1-b1-t1-r2", "pt-1").unwrap();
    assert_eq!(w.store.case("c1").unwrap().state, CaseState::Finalized);
    assert!(matches!(w.store.start_run("c1", request(1)), Err(StoreError::Conflict(_))));
}

#[test]
fn rating_edit_moves_total_by_the_factor_weight() {
    let w = world();
    reviewed_case(&w, "c1", 1);
    let id = "c1-b1-t1-r1";
    for def in &w.config.factors {
        let before = w.store.report(id).unwrap();
        let current = before.current();
        let rating = current.report.assessment(&def.id).unwrap().rating;
        if !def.has_level(rating + 1) {
            continue;
        }
        let old = current.report.exact_total(&w.config).unwrap();
        let after = w
            .store
            .edit_report(id, rating_edit(current.version, &def.id, rating + 1), &w.config)
            .unwrap();
        let new = after.current();
        assert_eq!(new.version, current.version + 1);
        assert_eq!(new.report.exact_total(&w.config).unwrap() - old, weight_of(&w.config, &def.id));
        new.report.check(&w.config).unwrap();
        assert_eq!(new.report.assessment(&def.id).unwrap().source_agent, AgentRole::Clinician);
        assert!(new.changes.iter().any(|c| c.field == format!("assessments.{}.rating", def.id)));
        assert!(new.changes.iter().any(|c| c.field == "total_score"));
    }
    let record = w.store.report(id).unwrap();
    assert!(record.versions.len() > 10);
    assert_eq!(record.draft().editor, SYSTEM_EDITOR);
}

#[test]
fn invalid_edits_are_rejected() {
    let w = world();
    reviewed_case(&w, "c1", 1);
    let id = "c1-b1-t1-r1";
    let def = &w.config.factors[0];
    let over = def.max_level() + 1;
    assert!(matches!(
        w.store.edit_report(id, rating_edit(1, &def.id, over), &w.config),
        Err(StoreError::Semantic(_))
    ));
    assert!(matches!(
        w.store.edit_report(id, rating_edit(1, "no_such_factor", 1), &w.config),
        Err(StoreError::Semantic(_))
    ));
    assert!(matches!(
        w.store.edit_report(id, rating_edit(1, &def.id, def.min_level()), &w.config),
        Err(StoreError::Invalid(_))
    ));
    assert!(matches!(
        w.store.edit_report(id, rating_edit(7, &def.id, def.max_level()), &w.config),
        Err(StoreError::Conflict(_))
    ));
    assert!(matches!(
        w.store.edit_report("missing", rating_edit(1, &def.id, 1), &w.config),
        Err(StoreError::NotFound(_))
    ));
    assert_eq!(w.store.report(id).unwrap().versions.len(), 1);
}

#[test]
fn finalized_reports_are_immutable() {
    let w = world();
    reviewed_case(&w, "c1", 2);
    let id = "c1-b1-t1-r1";
    w.store.finalize_report(id, "pt-1").unwrap();
    let def = &w.config.factors[0];
    assert!(matches!(
        w.store.edit_report(id, rating_edit(1, &def.id, def.max_level()), &w.config),
        Err(StoreError::Conflict(_))
    ));
    assert!(matches!(w.store.finalize_report(id, "pt-2"), Err(StoreError::Conflict(_))));
    let r = w.store.report(id).unwrap();
    assert_eq!(r.versions.len(), 1);
    assert_eq!(r.finalized_by.as_deref(), Some("pt-1"));
}

#[test]
fn concurrent_edits_on_one_version_have_one_winner() {
    let w = world();
    reviewed_case(&w, "c1", 1);
    let id = "c1-b1-t1-r1";
    let def = w.config.factors.iter().find(|f| f.max_level() > f.min_level()).unwrap();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let (store, config) = (&w.store, &w.config);
                let mut edit = rating_edit(1, &def.id, def.max_level());
                edit.editor = format!("pt-{i}");
                s.spawn(move || store.edit_report(id, edit, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
    assert!(results
        .iter()
        .filter_map(|r| r.as_ref().err())
        .all(|e| matches!(e, StoreError::Conflict(_))));
    assert_eq!(w.store.report(id).unwrap().versions.len(), 2);
}

#[test]
fn readers_never_see_a_half_written_commit() {
    let w = world();
    reviewed_case(&w, "c1", 1);
    let done = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|s| {
        let reader = s.spawn(|| {
            let mut reads = 0;
            while !done.load(std::sync::atomic::Ordering::Relaxed) {
                let docs = w.store.case_docs("c1").unwrap();
                assert_eq!(docs.record.report_ids.len(), docs.reports.len());
                w.store.reports("c1").unwrap();
                reads += 1;
            }
            reads
        });
        for _ in 0..10 {
            let run = w.store.start_run("c1", request(3)).unwrap();
            let reports = (1..=3).map(|m| draft_report(&w.config, "c1", "t1", m)).collect();
            w.store
                .finish_run(
                    &run.token,
                    RunCompletion {
                        reports,
                        ..RunCompletion::default()
                    },
                )
                .unwrap();
        }
        done.store(true, std::sync::atomic::Ordering::Relaxed);
        assert!(reader.join().unwrap() > 0);
    });
    assert_eq!(w.store.reports("c1").unwrap().len(), 31);
}

#[test]
fn replay_reproduces_documents_byte_for_byte() {
    let w = world();
    reviewed_case(&w, "c1", 2);
    let def = &w.config.factors[1];
    w.store
        .edit_report("c1-b1-t1-r1", rating_edit(1, &def.id, def.max_level()), &w.config)
        .unwrap();
    w.store
        .add_observations("c1", vec![ClinicianObservation::new("circumduction on the left")])
        .unwrap();
    w.store.finalize_report("c1-b1-t1-r2", "pt-1").unwrap();

    let dir = w.store.case_dir("c1");
    let replayed = replay(&dir.join(AUDIT_FILE)).unwrap();
    let docs = documents(&replayed);
    assert_eq!(docs.len(), 3);
    for (rel, bytes) in docs {
        assert_eq!(fs::read(dir.join(&rel)).unwrap(), bytes, "{}", rel.display());
    }
    let seqs: Vec<u64> = read_audit(&dir.join(AUDIT_FILE)).unwrap().iter().map(|l| l.seq).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
}

#[test]
fn reopening_rebuilds_lagging_documents() {
    let w = world();
    reviewed_case(&w, "c1", 1);
    let dir = w.store.case_dir("c1");
    let record = fs::read(dir.join(RECORD_FILE)).unwrap();
    let report = dir.join(REPORTS_DIR).join("c1-b1-t1-r1.json");
    let report_bytes = fs::read(&report).unwrap();
    fs::remove_file(&report).unwrap();
    fs::write(dir.join(RECORD_FILE), b"{ partial").unwrap();

    let reopened = Store::open(&w.root, clock()).unwrap();
    assert_eq!(fs::read(dir.join(RECORD_FILE)).unwrap(), record);
    assert_eq!(fs::read(&report).unwrap(), report_bytes);
    assert_eq!(reopened.report("c1-b1-t1-r1").unwrap().report_id, "c1-b1-t1-r1");
    assert_eq!(reopened.run("c1-b1").unwrap().status, RunStatus::Completed);
}

#[test]
fn atomic_writes_leave_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("doc.json");
    write_atomic(&path, b"one").unwrap();
    write_atomic(&path, b"two").unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"two");
    let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn uploads_are_validated_and_recoverable() {
    let w = world();
    assert!(matches!(w.store.create_case(new_case("../x")), Err(StoreError::Invalid(_))));
    w.store.create_case(new_case("c1")).unwrap();
    assert!(matches!(w.store.create_case(new_case("c1")), Err(StoreError::Conflict(_))));
    let mut bad = upload("t1");
    bad.frontal_zip = b"not a zip".to_vec();
    assert!(matches!(w.store.attach_trial("c1", bad), Err(StoreError::Invalid(_))));
    let record = w.store.attach_trial("c1", upload("t1")).unwrap();
    assert_eq!(record.trials[0].frontal_frames, 3);
    assert_eq!(record.trials[0].frontal_sha256, sha256_hex(&archive(View::Frontal)));
    assert!(matches!(w.store.attach_trial("c1", upload("t1")), Err(StoreError::Conflict(_))));

    let bundle = w.store.bundle("c1").unwrap();
    assert_eq!(bundle.trials[0].sagittal.frames.len(), 3);
    assert_eq!(bundle.trials[0].trajectory_csv.as_deref(), Some(&b"frame,time\n"[..]));
    let (bytes, media) = w.store.frame("c1", "t1", View::Sagittal, 2).unwrap();
    assert_eq!(bytes, vec![0x89, b'P', b'N', b'G', 2]);
    assert_eq!(media, "image/png");
    assert!(matches!(
        w.store.frame("c1", "t1", View::Sagittal, 9),
        Err(StoreError::NotFound(_))
    ));
}
