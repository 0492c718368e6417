use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{ClinicianObservation, Frame, FrameSet, MockFixture};
use crate::gaitkin::{CanonicalMarker, CanonicalMarkerSet};
use crate::normbase::PatientProfile;
use crate::wgs::View;

pub const MANIFEST_FILE: &str = "case.toml";
pub const MOCK_FIXTURE_FILE: &str = "mock.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid frame archive: {0}")]
    Archive(String),
    #[error("case has no trials")]
    NoTrials,
    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),
    #[error("trial {trial} has no {} frames", view.as_str())]
    MissingFrames { trial: String, view: View },
    #[error("unknown marker {0} in alias map")]
    UnknownMarker(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialManifest {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_total: Option<f64>,
}

/// Contents of `case.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    /// Recordings contain no people, so frames may skip anonymization.
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_total: Option<f64>,
    pub profile: PatientProfile,
    #[serde(default)]
    pub observations: Vec<ClinicianObservation>,
    pub trials: Vec<TrialManifest>,
    /// Trajectory column label to canonical marker name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alias: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub id: String,
    pub reference_total: Option<f64>,
    /// Raw trajectory CSV; parsed only when trajectories are enabled.
    pub trajectory_csv: Option<Vec<u8>>,
    pub frontal: FrameSet,
    pub sagittal: FrameSet,
}

/// One patient's inputs: profile, notes and every recorded trial.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub id: String,
    pub synthetic: bool,
    pub reference_total: Option<f64>,
    pub profile: PatientProfile,
    pub observations: Vec<ClinicianObservation>,
    pub trials: Vec<TrialData>,
    pub alias: BTreeMap<String, String>,
    pub mock_fixture: Option<MockFixture>,
}

impl CaseBundle {
    pub fn validate(&self) -> Result<(), BundleError> {
        if self.id.trim().is_empty() {
            return Err(BundleError::Manifest("case id is empty".into()));
        }
        if self.trials.is_empty() {
            return Err(BundleError::NoTrials);
        }
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if !seen.insert(t.id.as_str()) {
                return Err(BundleError::DuplicateTrial(t.id.clone()));
            }
            for set in [&t.frontal, &t.sagittal] {
                if set.frames.is_empty() {
                    return Err(BundleError::MissingFrames {
                        trial: t.id.clone(),
                        view: set.view,
                    });
                }
            }
        }
        self.profile
            .validate()
            .map_err(|e| BundleError::Manifest(e.to_string()))?;
        self.marker_set()?;
        Ok(())
    }

    /// The reference total of a trial, falling back to the case's.
    pub fn trial_reference(&self, trial: &TrialData) -> Option<f64> {
        trial.reference_total.or(self.reference_total)
    }

    pub fn marker_set(&self) -> Result<CanonicalMarkerSet, BundleError> {
        self.alias.iter().try_fold(CanonicalMarkerSet::identity(), |set, (label, name)| {
            let marker = CanonicalMarker::from_name(name).ok_or_else(|| BundleError::UnknownMarker(name.clone()))?;
            Ok(set.with_alias(label.clone(), marker))
        })
    }

    pub fn manifest(&self) -> CaseManifest {
        CaseManifest {
            id: self.id.clone(),
            synthetic: self.synthetic,
            reference_total: self.reference_total,
            profile: self.profile.clone(),
            observations: self.observations.clone(),
            trials: self
                .trials
                .iter()
                .map(|t| TrialManifest {
                    id: t.id.clone(),
                    reference_total: t.reference_total,
                })
                .collect(),
            alias: self.alias.clone(),
        }
    }
}

fn frame_index(name: &str) -> Option<usize> {
    let base = name.rsplit('/').next()?;
    let stem = base.strip_prefix("frame_")?;
    let (digits, ext) = stem.split_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
        return None;
    }
    digits.parse().ok()
}

/// Reads a ZIP of `frame_<index>.png` (or `.jpg`) entries, ordered by index.
/// Other entries are ignored.
pub fn read_frame_archive(bytes: &[u8], view: View) -> Result<FrameSet, BundleError> {
    let arch = |e: zip::result::ZipError| BundleError::Archive(e.to_string());
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(arch)?;
    let mut frames = BTreeMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(arch)?;
        let Some(index) = frame_index(entry.name()) else {
            continue;
        };
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut data)
            .map_err(|e| BundleError::Archive(e.to_string()))?;
        if frames.insert(index, data).is_some() {
            return Err(BundleError::Archive(format!("frame {index} appears twice")));
        }
    }
    Ok(FrameSet::new(
        view,
        frames
            .into_iter()
            .map(|(source_index, bytes)| Frame { source_index, bytes })
            .collect(),
    ))
}

pub fn write_frame_archive(frames: &FrameSet) -> Result<Vec<u8>, BundleError> {
    let arch = |e: zip::result::ZipError| BundleError::Archive(e.to_string());
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for f in &frames.frames {
        let ext = if f.media_type() == "image/jpeg" { "jpg" } else { "png" };
        zip.start_file(format!("frame_{}.{ext}", f.source_index), options)
            .map_err(arch)?;
        zip.write_all(&f.bytes)
            .map_err(|e| BundleError::Archive(e.to_string()))?;
    }
    Ok(zip.finish().map_err(arch)?.into_inner())
}

fn view_file(view: View) -> String {
    format!("{}.zip", view.as_str())
}

pub fn load_bundle(dir: &Path) -> Result<CaseBundle, BundleError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CaseManifest = toml::from_str(&text).map_err(|e| BundleError::Manifest(e.to_string()))?;

    let mut trials = Vec::with_capacity(manifest.trials.len());
    for t in &manifest.trials {
        let trial_dir = dir.join("trials").join(&t.id);
        let traj_path = trial_dir.join(TRAJECTORY_FILE);
        let trajectory_csv = if traj_path.exists() {
            Some(std::fs::read(&traj_path).map_err(io_err(&traj_path))?)
        } else {
            None
        };
        let mut views = Vec::with_capacity(2);
        for view in [View::Frontal, View::Sagittal] {
            let path = trial_dir.join(view_file(view));
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            views.push(read_frame_archive(&bytes, view)?);
        }
        let sagittal = views.pop().expect("two views");
        let frontal = views.pop().expect("two views");
        trials.push(TrialData {
            id: t.id.clone(),
            reference_total: t.reference_total,
            trajectory_csv,
            frontal,
            sagittal,
        });
    }

    let fixture_path = dir.join(MOCK_FIXTURE_FILE);
    let mock_fixture = if fixture_path.exists() {
        let text = std::fs::read_to_string(&fixture_path).map_err(io_err(&fixture_path))?;
        Some(toml::from_str(&text).map_err(|e| BundleError::Manifest(format!("{MOCK_FIXTURE_FILE}: {e}")))?)
    } else {
        None
    };

    let bundle = CaseBundle {
        id: manifest.id,
        synthetic: manifest.synthetic,
        reference_total: manifest.reference_total,
        profile: manifest.profile,
        observations: manifest.observations,
        trials,
        alias: manifest.alias,
        mock_fixture,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(dir: &Path, bundle: &CaseBundle) -> Result<(), BundleError> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest =
        toml::to_string_pretty(&bundle.manifest()).map_err(|e| BundleError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    if let Some(fixture) = &bundle.mock_fixture {
        let text = toml::to_string_pretty(fixture).map_err(|e| BundleError::Manifest(e.to_string()))?;
        let path = dir.join(MOCK_FIXTURE_FILE);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    for t in &bundle.trials {
        let trial_dir = dir.join("trials").join(&t.id);
        std::fs::create_dir_all(&trial_dir).map_err(io_err(&trial_dir))?;
        if let Some(csv) = &t.trajectory_csv {
            let path = trial_dir.join(TRAJECTORY_FILE);
            std::fs::write(&path, csv).map_err(io_err(&path))?;
        }
        for set in [&t.frontal, &t.sagittal] {
            let path = trial_dir.join(view_file(set.view));
            std::fs::write(&path, write_frame_archive(set)?).map_err(io_err(&path))?;
        }
    }
    Ok(())
}
