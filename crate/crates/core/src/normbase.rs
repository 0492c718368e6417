//! Normative reference subjects and demographic matching.
//!
//! A database directory holds one subdirectory per subject with a
//! `subject.txt` manifest (`key=value` lines: `id`, `age_years`, `sex`,
//! `height_cm`, `weight_kg`) and one `<joint>_<axis>_<side>.csv` per curve
//! (`percent,value_mm` header followed by 101 rows).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaitkin::{Axis, CurveSide, Joint, NormalizedCurve, Side, CURVE_POINTS};

#[derive(Debug, Error)]
pub enum NormError {
    #[error("normative database is empty")]
    EmptyDatabase,
    #[error("no normative subject of sex {0}")]
    NoSexMatch(Sex),
    #[error("duplicate normative subject id {0}")]
    DuplicateSubjectId(String),
    #[error("invalid curve {joint:?}/{axis:?} for subject {subject}: {reason}")]
    InvalidCurve {
        subject: String,
        joint: Joint,
        axis: Axis,
        reason: String,
    },
    #[error("invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
        })
    }
}

impl std::str::FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

/// Patient demographics and affected side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub id: String,
    pub age_years: u32,
    pub sex: Sex,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub hemiparetic_side: Side,
}

fn check_demographics(age_years: u32, height_cm: f64, weight_kg: f64) -> Result<(), String> {
    if !(1..130).contains(&age_years) {
        return Err(format!("age_years {age_years} outside (0, 130)"));
    }
    if !(height_cm > 50.0 && height_cm < 250.0) {
        return Err(format!("height_cm {height_cm} outside (50, 250)"));
    }
    if !(weight_kg > 20.0 && weight_kg < 300.0) {
        return Err(format!("weight_kg {weight_kg} outside (20, 300)"));
    }
    Ok(())
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), NormError> {
        check_demographics(self.age_years, self.height_cm, self.weight_kg)
            .map_err(NormError::InvalidProfile)
    }
}

/// Key of one curve in a normative subject's set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CurveKey {
    pub joint: Joint,
    pub axis: Axis,
    pub side: CurveSide,
}

impl CurveKey {
    pub fn new(joint: Joint, axis: Axis, side: CurveSide) -> Self {
        Self { joint, axis, side }
    }

    /// Every joint/axis/side combination a subject must cover (21 curves).
    pub fn all() -> Vec<CurveKey> {
        let mut keys = Vec::with_capacity(21);
        for joint in Joint::LIMB {
            for axis in Axis::ALL {
                for side in [CurveSide::Left, CurveSide::Right] {
                    keys.push(CurveKey::new(joint, axis, side));
                }
            }
        }
        for axis in Axis::ALL {
            keys.push(CurveKey::new(Joint::Torso, axis, CurveSide::Center));
        }
        keys
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}.csv",
            self.joint.as_str(),
            self.axis.as_str(),
            self.side.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormativeSubject {
    pub id: String,
    pub age_years: u32,
    pub sex: Sex,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub curves: BTreeMap<CurveKey, NormalizedCurve>,
}

impl NormativeSubject {
    pub fn validate(&self) -> Result<(), NormError> {
        check_demographics(self.age_years, self.height_cm, self.weight_kg).map_err(|reason| {
            NormError::InvalidManifest {
                path: PathBuf::from(&self.id),
                reason,
            }
        })?;
        for key in CurveKey::all() {
            let invalid = |reason: String| NormError::InvalidCurve {
                subject: self.id.clone(),
                joint: key.joint,
                axis: key.axis,
                reason,
            };
            let curve = self
                .curves
                .get(&key)
                .ok_or_else(|| invalid(format!("missing {}", key.file_name())))?;
            curve.validate().map_err(|e| invalid(e.to_string()))?;
            if (curve.joint, curve.axis, curve.side) != (key.joint, key.axis, key.side) {
                return Err(invalid("curve labelled with another joint/axis/side".into()));
            }
        }
        Ok(())
    }

    pub fn curve(&self, joint: Joint, axis: Axis, side: CurveSide) -> Option<&NormalizedCurve> {
        self.curves.get(&CurveKey::new(joint, axis, side))
    }
}

/// Per-attribute divisors of the weighted L1 demographic distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub age_years_per_unit: f64,
    pub height_cm_per_unit: f64,
    pub weight_kg_per_unit: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            age_years_per_unit: 15.0,
            height_cm_per_unit: 10.0,
            weight_kg_per_unit: 10.0,
        }
    }
}

impl MatchWeights {
    pub fn distance(&self, profile: &PatientProfile, subject: &NormativeSubject) -> f64 {
        (profile.age_years as f64 - subject.age_years as f64).abs() / self.age_years_per_unit
            + (profile.height_cm - subject.height_cm).abs() / self.height_cm_per_unit
            + (profile.weight_kg - subject.weight_kg).abs() / self.weight_kg_per_unit
    }
}

/// Immutable set of validated normative subjects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormativeDatabase {
    subjects: Vec<NormativeSubject>,
}

impl NormativeDatabase {
    pub fn new(subjects: Vec<NormativeSubject>) -> Result<Self, NormError> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.id.clone()) {
                return Err(NormError::DuplicateSubjectId(s.id.clone()));
            }
            s.validate()?;
        }
        Ok(Self { subjects })
    }

    pub fn subjects(&self) -> &[NormativeSubject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Nearest same-sex subject under the weighted L1 distance; ties go to the
/// lexicographically smallest id.
pub fn match_normative<'a>(
    profile: &PatientProfile,
    database: &'a NormativeDatabase,
    weights: &MatchWeights,
) -> Result<&'a NormativeSubject, NormError> {
    if database.is_empty() {
        return Err(NormError::EmptyDatabase);
    }
    database
        .subjects
        .iter()
        .filter(|s| s.sex == profile.sex)
        .map(|s| (weights.distance(profile, s), s))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)))
        .map(|(_, s)| s)
        .ok_or(NormError::NoSexMatch(profile.sex))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NormError + '_ {
    move |source| NormError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_manifest(path: &Path) -> Result<NormativeSubject, NormError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: String| NormError::InvalidManifest {
        path: path.to_path_buf(),
        reason,
    };
    let mut fields = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing field {k}")));
    let id = get("id")?.clone();
    let age_years = get("age_years")?
        .parse()
        .map_err(|e| bad(format!("age_years: {e}")))?;
    let sex = get("sex")?.parse().map_err(bad)?;
    let height_cm = get("height_cm")?
        .parse()
        .map_err(|e| bad(format!("height_cm: {e}")))?;
    let weight_kg = get("weight_kg")?
        .parse()
        .map_err(|e| bad(format!("weight_kg: {e}")))?;
    Ok(NormativeSubject {
        id,
        age_years,
        sex,
        height_cm,
        weight_kg,
        curves: BTreeMap::new(),
    })
}

fn parse_curve_file(path: &Path, subject: &str, key: CurveKey) -> Result<NormalizedCurve, NormError> {
    let invalid = |reason: String| NormError::InvalidCurve {
        subject: subject.to_string(),
        joint: key.joint,
        axis: key.axis,
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("percent,value_mm") {
        return Err(invalid("header must be percent,value_mm".into()));
    }
    let mut values = Vec::with_capacity(CURVE_POINTS);
    for (i, line) in lines.enumerate() {
        let (pct, val) = line
            .split_once(',')
            .ok_or_else(|| invalid(format!("row {i}: expected two fields")))?;
        let pct: f64 = pct.trim().parse().map_err(|_| invalid(format!("row {i}: bad percent")))?;
        if pct != i as f64 {
            return Err(invalid(format!("row {i}: percent {pct} out of sequence")));
        }
        let v: f64 = val.trim().parse().map_err(|_| invalid(format!("row {i}: bad value")))?;
        values.push(v);
    }
    NormalizedCurve::new(key.joint, key.axis, key.side, values).map_err(|e| invalid(e.to_string()))
}

/// Loads every subject directory (one containing `subject.txt`) below `dir`.
pub fn load_database(dir: &Path) -> Result<NormativeDatabase, NormError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("subject.txt").is_file())
        .collect();
    entries.sort();

    let mut subjects = Vec::with_capacity(entries.len());
    let mut seen = BTreeSet::new();
    for subject_dir in entries {
        let mut subject = parse_manifest(&subject_dir.join("subject.txt"))?;
        if !seen.insert(subject.id.clone()) {
            return Err(NormError::DuplicateSubjectId(subject.id));
        }
        for key in CurveKey::all() {
            let path = subject_dir.join(key.file_name());
            let curve = parse_curve_file(&path, &subject.id, key)?;
            subject.curves.insert(key, curve);
        }
        subjects.push(subject);
    }
    let db = NormativeDatabase::new(subjects)?;
    tracing::info!(subjects = db.len(), dir = %dir.display(), "loaded normative database");
    Ok(db)
}

/// Writes a subject in the on-disk layout read by [`load_database`].
pub fn write_subject(dir: &Path, subject: &NormativeSubject) -> Result<(), NormError> {
    let subject_dir = dir.join(&subject.id);
    fs::create_dir_all(&subject_dir).map_err(io_err(&subject_dir))?;
    let manifest = format!(
        "id={}\nage_years={}\nsex={}\nheight_cm={}\nweight_kg={}\n",
        subject.id,
        subject.age_years,
        subject.sex.to_string().to_lowercase(),
        subject.height_cm,
        subject.weight_kg
    );
    let path = subject_dir.join("subject.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    for (key, curve) in &subject.curves {
        let mut body = String::from("percent,value_mm\n");
        for (i, v) in curve.values.iter().enumerate() {
            body.push_str(&format!("{i},{v}\n"));
        }
        let path = subject_dir.join(key.file_name());
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
