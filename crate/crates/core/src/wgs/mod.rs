//! Wisconsin Gait Scale factor registry and weighted scoring.
//!
//! The factor table is data ([`ScoringConfig::from_toml_str`]); the shipped
//! table is embedded from `data/wgs.toml`. Weights and totals are exact
//! rationals so the declared 13.35..42 range is checked without float drift.

mod report;

pub use report::{
    AgentRole, EvidenceRef, FactorAssessment, Provenance, ReconciliationEntry, ReportTemplate,
    SubjectIdentification, View, WgsReport,
};

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rational = Ratio<i64>;

pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../data/wgs.toml");
pub const FACTOR_COUNT: usize = 14;
pub const RECORDING_FACTOR_COUNT: usize = 8;
pub const TRAJECTORY_FACTOR_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evaluator {
    Recording,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub value: u8,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorDef {
    pub id: String,
    pub name: String,
    pub description: String,
    pub evaluator: Evaluator,
    pub levels: Vec<Level>,
    pub weight: Rational,
}

impl FactorDef {
    pub fn min_level(&self) -> u8 {
        self.levels.iter().map(|l| l.value).min().unwrap_or(0)
    }

    pub fn max_level(&self) -> u8 {
        self.levels.iter().map(|l| l.value).max().unwrap_or(0)
    }

    pub fn has_level(&self, rating: u8) -> bool {
        self.levels.iter().any(|l| l.value == rating)
    }

    pub fn descriptor(&self, rating: u8) -> Option<&str> {
        self.levels
            .iter()
            .find(|l| l.value == rating)
            .map(|l| l.descriptor.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse scoring config: {0}")]
    Parse(String),
    #[error("invalid decimal {0:?}")]
    Decimal(String),
}

/// Serializes in the file schema, with exact decimals as strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringConfig {
    pub name: String,
    pub version: String,
    pub factors: Vec<FactorDef>,
    pub declared_min_total: Rational,
    pub declared_max_total: Rational,
}

#[derive(Serialize, Deserialize)]
struct RawFactor {
    id: String,
    name: String,
    description: String,
    evaluator: Evaluator,
    weight: String,
    levels: Vec<Level>,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    name: String,
    version: String,
    declared_min_total: String,
    declared_max_total: String,
    factors: Vec<RawFactor>,
}

/// Parses a plain decimal ("13.35", "-2", "0.045") into an exact rational.
pub fn parse_decimal(s: &str) -> Result<Rational, ConfigError> {
    let bad = || ConfigError::Decimal(s.to_string());
    let t = s.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty()
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
        || frac.len() > 9
    {
        return Err(bad());
    }
    let denom = 10i64.pow(frac.len() as u32);
    let int_val: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac_val: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let numer = int_val
        .checked_mul(denom)
        .and_then(|v| v.checked_add(frac_val))
        .ok_or_else(bad)?;
    Ok(Rational::new(if neg { -numer } else { numer }, denom))
}

/// Decimal rendering with at most two places, trailing zeros dropped.
pub fn format_decimal(r: Rational) -> String {
    let hundredths = (r * Rational::from_integer(100)).round().to_integer();
    let sign = if hundredths < 0 { "-" } else { "" };
    let abs = hundredths.abs();
    let (int, frac) = (abs / 100, abs % 100);
    match frac {
        0 => format!("{sign}{int}"),
        f if f % 10 == 0 => format!("{sign}{int}.{}", f / 10),
        f => format!("{sign}{int}.{f:02}"),
    }
}

/// Exact decimal form of a terminating rational, as accepted by
/// [`parse_decimal`]; falls back to two places otherwise.
pub fn exact_decimal(r: Rational) -> String {
    let mut scaled = r;
    for places in 0..=15u32 {
        if scaled.is_integer() {
            let n = scaled.to_integer();
            let sign = if n < 0 { "-" } else { "" };
            let digits = n.unsigned_abs().to_string();
            if places == 0 {
                return format!("{sign}{digits}");
            }
            let digits = format!("{digits:0>width$}", width = places as usize + 1);
            let (int, frac) = digits.split_at(digits.len() - places as usize);
            return format!("{sign}{int}.{frac}");
        }
        scaled *= Rational::from_integer(10);
    }
    format_decimal(r)
}

pub fn to_f64(r: Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

impl Serialize for ScoringConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.raw().serialize(serializer)
    }
}

impl ScoringConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let factors = raw
            .factors
            .into_iter()
            .map(|f| {
                Ok(FactorDef {
                    weight: parse_decimal(&f.weight)?,
                    id: f.id,
                    name: f.name,
                    description: f.description,
                    evaluator: f.evaluator,
                    levels: f.levels,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(Self {
            name: raw.name,
            version: raw.version,
            factors,
            declared_min_total: parse_decimal(&raw.declared_min_total)?,
            declared_max_total: parse_decimal(&raw.declared_max_total)?,
        })
    }

    /// The table in the file schema, weights and bounds as decimal strings.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&self.raw()).expect("scoring config serializes")
    }

    fn raw(&self) -> RawConfig {
        RawConfig {
            name: self.name.clone(),
            version: self.version.clone(),
            declared_min_total: exact_decimal(self.declared_min_total),
            declared_max_total: exact_decimal(self.declared_max_total),
            factors: self
                .factors
                .iter()
                .map(|f| RawFactor {
                    id: f.id.clone(),
                    name: f.name.clone(),
                    description: f.description.clone(),
                    evaluator: f.evaluator,
                    weight: exact_decimal(f.weight),
                    levels: f.levels.clone(),
                })
                .collect(),
        }
    }

    /// The embedded WGS table. It is validated by the test suite, so a
    /// failure here is a build defect.
    pub fn default_wgs() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("embedded WGS config parses")
    }

    pub fn factor(&self, id: &str) -> Option<&FactorDef> {
        self.factors.iter().find(|f| f.id == id)
    }

    pub fn min_total(&self) -> Rational {
        self.factors
            .iter()
            .map(|f| f.weight * Rational::from_integer(f.min_level() as i64))
            .fold(Rational::zero(), |a, b| a + b)
    }

    pub fn max_total(&self) -> Rational {
        self.factors
            .iter()
            .map(|f| f.weight * Rational::from_integer(f.max_level() as i64))
            .fold(Rational::zero(), |a, b| a + b)
    }

    pub fn ids_for(&self, evaluator: Evaluator) -> Vec<String> {
        self.factors
            .iter()
            .filter(|f| f.evaluator == evaluator)
            .map(|f| f.id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    FactorCount { found: usize },
    EvaluatorSplit { recording: usize, trajectory: usize },
    BoundsMismatch {
        declared_min: Rational,
        declared_max: Rational,
        computed_min: Rational,
        computed_max: Rational,
    },
    DuplicateFactorId(String),
    TooFewLevels(String),
    LevelsNotAscending(String),
    NonPositiveWeight(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FactorCount { found } => {
                write!(f, "factor count: expected {FACTOR_COUNT}, found {found}")
            }
            Violation::EvaluatorSplit { recording, trajectory } => write!(
                f,
                "evaluator split: expected {RECORDING_FACTOR_COUNT} recording / {TRAJECTORY_FACTOR_COUNT} trajectory, found {recording}/{trajectory}"
            ),
            Violation::BoundsMismatch {
                declared_min,
                declared_max,
                computed_min,
                computed_max,
            } => write!(
                f,
                "bounds mismatch: declared {}..{}, computed {}..{}",
                format_decimal(*declared_min),
                format_decimal(*declared_max),
                format_decimal(*computed_min),
                format_decimal(*computed_max)
            ),
            Violation::DuplicateFactorId(id) => write!(f, "duplicate factor id: {id}"),
            Violation::TooFewLevels(id) => write!(f, "factor {id} needs at least 2 levels"),
            Violation::LevelsNotAscending(id) => {
                write!(f, "factor {id} levels must be strictly ascending")
            }
            Violation::NonPositiveWeight(id) => write!(f, "factor {id} weight must be positive"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigValidation {
    pub min_total: Rational,
    pub max_total: Rational,
    pub violations: Vec<Violation>,
}

impl ConfigValidation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collects every structural problem in a config; never fails itself.
pub fn validate_config(config: &ScoringConfig) -> ConfigValidation {
    let mut violations = Vec::new();
    if config.factors.len() != FACTOR_COUNT {
        violations.push(Violation::FactorCount {
            found: config.factors.len(),
        });
    }
    let recording = config
        .factors
        .iter()
        .filter(|f| f.evaluator == Evaluator::Recording)
        .count();
    let trajectory = config.factors.len() - recording;
    if (recording, trajectory) != (RECORDING_FACTOR_COUNT, TRAJECTORY_FACTOR_COUNT) {
        violations.push(Violation::EvaluatorSplit {
            recording,
            trajectory,
        });
    }
    let mut seen = BTreeMap::new();
    for f in &config.factors {
        if seen.insert(f.id.as_str(), ()).is_some() {
            violations.push(Violation::DuplicateFactorId(f.id.clone()));
        }
        if f.levels.len() < 2 {
            violations.push(Violation::TooFewLevels(f.id.clone()));
        }
        if f.levels.windows(2).any(|w| w[0].value >= w[1].value) {
            violations.push(Violation::LevelsNotAscending(f.id.clone()));
        }
        if f.weight <= Rational::zero() {
            violations.push(Violation::NonPositiveWeight(f.id.clone()));
        }
    }
    let (min_total, max_total) = (config.min_total(), config.max_total());
    if min_total != config.declared_min_total || max_total != config.declared_max_total {
        violations.push(Violation::BoundsMismatch {
            declared_min: config.declared_min_total,
            declared_max: config.declared_max_total,
            computed_min: min_total,
            computed_max: max_total,
        });
    }
    ConfigValidation {
        min_total,
        max_total,
        violations,
    }
}

/// Recording-based and trajectory-based factor ids, in config order.
pub fn partition_factors(config: &ScoringConfig) -> (Vec<String>, Vec<String>) {
    (
        config.ids_for(Evaluator::Recording),
        config.ids_for(Evaluator::Trajectory),
    )
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no assessment for factor {0}")]
    MissingFactor(String),
    #[error("factor {0} assessed more than once")]
    DuplicateFactor(String),
    #[error("rating {rating} is not a level of factor {id}")]
    RatingOutOfScale { id: String, rating: u8 },
    #[error("factor {0} is not part of the scoring config")]
    UnknownFactor(String),
}

/// Weighted sum of ratings; exactly one assessment per configured factor.
pub fn score_total(
    assessments: &[FactorAssessment],
    config: &ScoringConfig,
) -> Result<Rational, ScoreError> {
    let mut by_id: BTreeMap<&str, &FactorAssessment> = BTreeMap::new();
    for a in assessments {
        let def = config
            .factor(&a.factor_id)
            .ok_or_else(|| ScoreError::UnknownFactor(a.factor_id.clone()))?;
        if by_id.insert(def.id.as_str(), a).is_some() {
            return Err(ScoreError::DuplicateFactor(a.factor_id.clone()));
        }
        if !def.has_level(a.rating) {
            return Err(ScoreError::RatingOutOfScale {
                id: a.factor_id.clone(),
                rating: a.rating,
            });
        }
    }
    let mut total = Rational::zero();
    for def in &config.factors {
        let a = by_id
            .get(def.id.as_str())
            .ok_or_else(|| ScoreError::MissingFactor(def.id.clone()))?;
        total += def.weight * Rational::from_integer(a.rating as i64);
    }
    Ok(total)
}
