//! Synthetic gait data: sinusoidal marker trajectories, a normative
//! database built from them, stick-figure recordings and complete cases.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{Frame, FrameSet};
use crate::evalharness::ObservationPool;
use crate::gaitkin::{write_trajectory_csv, CanonicalMarker, GaitError, MarkerTimeSeries, Point3, Side};
use crate::normbase::{write_subject, NormError, NormativeSubject, PatientProfile, Sex};
use crate::pipeline::{patient_curve_set, save_bundle, BundleError, CaseBundle, TrialData};
use crate::wgs::{to_f64, ScoringConfig, View};

pub const REFERENCE_HEIGHT_CM: f64 = 175.0;
pub const FRAME_WIDTH: u32 = 64;
pub const FRAME_HEIGHT: u32 = 48;
pub const FRAMES_PER_VIEW: usize = 60;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("image encoding failed: {0}")]
    Image(String),
}

/// Periodic walking-in-place model. The left ankle's forward excursion
/// peaks at `first_strike_s + k * period_s`; the right side lags half a
/// period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaitModel {
    pub period_s: f64,
    pub sample_rate_hz: f64,
    pub first_strike_s: f64,
    pub duration_s: f64,
    pub height_cm: f64,
    /// Peak extra lateral swing of the affected ankle, in mm.
    pub circumduction_mm: f64,
    pub affected: Side,
}

impl Default for GaitModel {
    fn default() -> Self {
        Self {
            period_s: 1.0,
            sample_rate_hz: 100.0,
            first_strike_s: 0.1,
            duration_s: 4.0,
            height_cm: REFERENCE_HEIGHT_CM,
            circumduction_mm: 0.0,
            affected: Side::Left,
        }
    }
}

impl GaitModel {
    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    fn cycle_phase(&self, t: f64, side: Side) -> f64 {
        let lag = match side {
            Side::Left => 0.0,
            Side::Right => 0.5,
        };
        ((t - self.first_strike_s) / self.period_s - lag).rem_euclid(1.0)
    }

    /// Marker position at time `t`, in mm.
    pub fn position(&self, marker: CanonicalMarker, t: f64) -> Point3 {
        let s = self.height_cm / REFERENCE_HEIGHT_CM;
        let limb = |side: Side| {
            let phase = self.cycle_phase(t, side);
            let lateral = match side {
                Side::Left => -1.0,
                Side::Right => 1.0,
            };
            (TAU * phase, lateral)
        };
        match marker {
            CanonicalMarker::AnkleL | CanonicalMarker::AnkleR => {
                let side = if marker == CanonicalMarker::AnkleL { Side::Left } else { Side::Right };
                let (a, lat) = limb(side);
                let mut x = lat * 90.0 * s + 8.0 * s * a.sin();
                if side == self.affected {
                    x += lat * self.circumduction_mm * (1.0 - a.cos()) / 2.0;
                }
                Point3::new(x, 300.0 * s * a.cos(), s * (80.0 + 40.0 * (a - 0.8).sin().max(0.0)))
            }
            CanonicalMarker::KneeL | CanonicalMarker::KneeR => {
                let (a, lat) = limb(if marker == CanonicalMarker::KneeL { Side::Left } else { Side::Right });
                Point3::new(lat * 100.0 * s + 5.0 * s * (2.0 * a).sin(), 150.0 * s * (a - 0.3).cos(), s * (500.0 + 30.0 * a.sin()))
            }
            CanonicalMarker::HipL | CanonicalMarker::HipR => {
                let (a, lat) = limb(if marker == CanonicalMarker::HipL { Side::Left } else { Side::Right });
                Point3::new(lat * 120.0 * s, 60.0 * s * (a - 0.6).cos(), s * (900.0 + 15.0 * (2.0 * a).sin()))
            }
            CanonicalMarker::Torso => {
                let (a, _) = limb(Side::Left);
                Point3::new(10.0 * s * a.sin(), 0.0, s * (1300.0 + 20.0 * (2.0 * a).cos()))
            }
        }
    }

    pub fn series(&self) -> Result<MarkerTimeSeries, GaitError> {
        let n = self.sample_count();
        let markers = CanonicalMarker::REQUIRED
            .into_iter()
            .map(|m| {
                let points = (0..n)
                    .map(|i| self.position(m, i as f64 / self.sample_rate_hz))
                    .collect();
                (m, points)
            })
            .collect();
        MarkerTimeSeries::new(self.sample_rate_hz, markers)
    }
}

/// Normative subjects with seeded demographics, ids `N001`, `N002`, ...,
/// alternating sex. Curves come from the gait model at each subject's
/// height.
pub fn normative_subjects(count: usize, seed: u64) -> Result<Vec<NormativeSubject>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let sex = if i % 2 == 0 { Sex::Male } else { Sex::Female };
            let base_height = if sex == Sex::Male { 176.0 } else { 163.0 };
            let height_cm = ((base_height + rng.random_range(-12.0..12.0_f64)) * 10.0).round() / 10.0;
            let weight_kg = (rng.random_range(50.0..95.0_f64) * 10.0).round() / 10.0;
            let age_years = rng.random_range(35..80u32);
            let model = GaitModel {
                height_cm,
                ..GaitModel::default()
            };
            Ok(NormativeSubject {
                id: format!("N{:03}", i + 1),
                age_years,
                sex,
                height_cm,
                weight_kg,
                curves: patient_curve_set(&model.series()?)?,
            })
        })
        .collect()
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let f = k as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * f).round();
        let y = (a.1 + (b.1 - a.1) * f).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One stick-figure frame of the model at time `t`.
pub fn render_frame(model: &GaitModel, view: View, t: f64) -> Result<Vec<u8>, SynthError> {
    let mut img = RgbImage::from_pixel(FRAME_WIDTH, FRAME_HEIGHT, Rgb([235, 235, 235]));
    let scale = (FRAME_HEIGHT as f64 - 6.0) / (1400.0 * model.height_cm / REFERENCE_HEIGHT_CM);
    let project = |m: CanonicalMarker| {
        let p = model.position(m, t);
        let horizontal = match view {
            View::Frontal => p.x,
            View::Sagittal => p.y,
        };
        (
            FRAME_WIDTH as f64 / 2.0 + horizontal * scale,
            FRAME_HEIGHT as f64 - 3.0 - p.z * scale,
        )
    };
    let ink = Rgb([30, 30, 30]);
    use CanonicalMarker::*;
    for chain in [[Torso, HipL, KneeL, AnkleL], [Torso, HipR, KneeR, AnkleR]] {
        for pair in chain.windows(2) {
            draw_line(&mut img, project(pair[0]), project(pair[1]), ink);
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| SynthError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn recording(model: &GaitModel, view: View, frames: usize) -> Result<FrameSet, SynthError> {
    let frames = (0..frames)
        .map(|i| {
            let t = model.duration_s * i as f64 / frames as f64;
            Ok(Frame {
                source_index: i,
                bytes: render_frame(model, view, t)?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(FrameSet::new(view, frames))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCaseSpec {
    pub case_id: String,
    pub profile: PatientProfile,
    pub trials: usize,
    pub circumduction_mm: f64,
    pub reference_total: Option<f64>,
    pub frames_per_view: usize,
}

impl SyntheticCaseSpec {
    /// A patient whose demographics equal `subject`'s, so matching picks
    /// that subject and the trajectories deviate only by the requested
    /// circumduction.
    pub fn matching(case_id: &str, subject: &NormativeSubject, affected: Side, scoring: &ScoringConfig) -> Self {
        Self {
            case_id: case_id.to_string(),
            profile: PatientProfile {
                id: case_id.to_string(),
                age_years: subject.age_years,
                sex: subject.sex,
                height_cm: subject.height_cm,
                weight_kg: subject.weight_kg,
                hemiparetic_side: affected,
            },
            trials: 3,
            circumduction_mm: 0.0,
            reference_total: Some(to_f64(scoring.min_total())),
            frames_per_view: FRAMES_PER_VIEW,
        }
    }
}

pub fn synthetic_case(spec: &SyntheticCaseSpec) -> Result<CaseBundle, SynthError> {
    let model = GaitModel {
        height_cm: spec.profile.height_cm,
        circumduction_mm: spec.circumduction_mm,
        affected: spec.profile.hemiparetic_side,
        ..GaitModel::default()
    };
    let series = model.series()?;
    let csv = write_trajectory_csv(&series).into_bytes();
    let frontal = recording(&model, View::Frontal, spec.frames_per_view)?;
    let sagittal = recording(&model, View::Sagittal, spec.frames_per_view)?;
    let trials = (1..=spec.trials)
        .map(|i| TrialData {
            id: format!("t{i}"),
            reference_total: None,
            trajectory_csv: Some(csv.clone()),
            frontal: frontal.clone(),
            sagittal: sagittal.clone(),
        })
        .collect();
    Ok(CaseBundle {
        id: spec.case_id.clone(),
        synthetic: true,
        reference_total: spec.reference_total,
        profile: spec.profile.clone(),
        observations: ObservationPool::canonical().notes().to_vec(),
        trials,
        alias: BTreeMap::new(),
        mock_fixture: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorkspace {
    pub normative_dir: PathBuf,
    pub case_dirs: Vec<PathBuf>,
}

pub const NORMATIVE_SUBJECTS: usize = 50;

/// Writes `<dir>/normative/` and `cases` case directories
/// `<dir>/synthetic-NN/`, case i matched to normative subject i.
pub fn write_workspace(
    dir: &Path,
    cases: usize,
    circumduction_mm: f64,
    seed: u64,
    scoring: &ScoringConfig,
) -> Result<SyntheticWorkspace, SynthError> {
    let subjects = normative_subjects(NORMATIVE_SUBJECTS.max(cases), seed)?;
    let normative_dir = dir.join("normative");
    for s in &subjects {
        write_subject(&normative_dir, s)?;
    }
    let mut case_dirs = Vec::with_capacity(cases);
    for (i, subject) in subjects.iter().take(cases).enumerate() {
        let id = format!("synthetic-{:02}", i + 1);
        let affected = if i % 2 == 0 { Side::Left } else { Side::Right };
        let mut spec = SyntheticCaseSpec::matching(&id, subject, affected, scoring);
        spec.circumduction_mm = circumduction_mm;
        let bundle = synthetic_case(&spec)?;
        let case_dir = dir.join(&id);
        save_bundle(&case_dir, &bundle)?;
        case_dirs.push(case_dir);
    }
    Ok(SyntheticWorkspace {
        normative_dir,
        case_dirs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaitkin::{normalize_cycle, phase_of, segment_cycles, GaitPhase, Joint, Axis};

    #[test]
    fn heel_strikes_follow_the_period() {
        let model = GaitModel {
            period_s: 1.2,
            duration_s: 5.0,
            ..GaitModel::default()
        };
        let series = model.series().unwrap();
        let cycles = segment_cycles(&series, Side::Left).unwrap();
        assert_eq!(cycles.len(), 4);
        for c in &cycles {
            assert!((c.duration_s(100.0) - 1.2).abs() <= 0.02);
        }
        let curve = normalize_cycle(&series, &cycles[0], Joint::Ankle, Axis::Y).unwrap();
        for (k, v) in curve.values.iter().enumerate() {
            let closed = 300.0 * (TAU * k as f64 / 100.0).cos();
            assert!((v - closed).abs() < 1e-3 * 300.0, "k={k}");
        }
        assert_eq!(phase_of(70.0).unwrap(), GaitPhase::MidSwing);
    }

    #[test]
    fn circumduction_shows_up_on_the_affected_ankle_only() {
        let base = GaitModel::default();
        let bent = GaitModel {
            circumduction_mm: 30.0,
            affected: Side::Right,
            ..base
        };
        let a = patient_curve_set(&base.series().unwrap()).unwrap();
        let b = patient_curve_set(&bent.series().unwrap()).unwrap();
        for (key, curve) in &a {
            let (dev, at) = curve.max_abs_deviation(&b[key]);
            if key.joint == Joint::Ankle && key.axis == Axis::X && key.side == crate::gaitkin::CurveSide::Right {
                assert!((dev - 30.0).abs() < 1e-9);
                assert_eq!(at, 50);
            } else {
                assert_eq!(dev, 0.0, "{key:?}");
            }
        }
    }

    #[test]
    fn normative_subjects_are_seeded_and_valid() {
        let a = normative_subjects(4, 7).unwrap();
        assert_eq!(a, normative_subjects(4, 7).unwrap());
        assert_eq!(a[1].id, "N002");
        assert_eq!(a[1].sex, Sex::Female);
        for s in &a {
            s.validate().unwrap();
        }
    }

    #[test]
    fn frames_are_small_pngs() {
        let set = recording(&GaitModel::default(), View::Sagittal, 3).unwrap();
        assert_eq!(set.frames.len(), 3);
        let img = image::load_from_memory(&set.frames[0].bytes).unwrap();
        assert_eq!((img.width(), img.height()), (FRAME_WIDTH, FRAME_HEIGHT));
        assert_ne!(set.frames[0].bytes, set.frames[1].bytes);
    }
}
