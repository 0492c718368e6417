//! Motion-capture trajectory handling.
//!
//! Parses marker CSV exports, finds heel strikes from the ankle's
//! anteroposterior excursion relative to the torso, splits the recording
//! into gait cycles and resamples each cycle onto a 101-point 0..100 % grid.
//!
//! Coordinates are millimetres with X mediolateral, Y anteroposterior and
//! Z vertical. Curves are marker displacement, not joint angles.

mod events;
mod normalize;
mod trajectory;

pub use events::{detect_heel_strikes, segment_cycles, GaitCycle, MIN_STRIDE_SEPARATION_S};
pub use normalize::{
    mean_cycle_curve, normalize_cycle, phase_of, GaitPhase, NormalizedCurve, CURVE_POINTS,
};
pub use trajectory::{
    parse_trajectory, write_trajectory_csv, CanonicalMarker, CanonicalMarkerSet, MarkerTimeSeries,
    Point3,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaitError {
    #[error("trajectory file is empty")]
    EmptyInput,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("required marker {0} not present in trajectory header")]
    MissingMarker(String),
    #[error("marker {canonical} is mapped from more than one label ({first}, {second})")]
    AmbiguousMarker {
        canonical: String,
        first: String,
        second: String,
    },
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("non-finite value at line {0}, column {1}")]
    NonFiniteValue(usize, usize),
    #[error("need at least 2 samples, found {0}")]
    TooFewSamples(usize),
    #[error("sampling is not uniform within 1% (median dt {median_dt}, offending dt {dt} at line {line})")]
    NonUniformSampling { median_dt: f64, dt: f64, line: usize },
    #[error("invalid marker series: {0}")]
    InvalidSeries(String),
    #[error("fewer than two heel strikes detected")]
    NoStrideDetected,
    #[error("cycle [{start}, {end}] lies outside a series of {len} samples")]
    CycleOutOfRange { start: usize, end: usize, len: usize },
    #[error("no curves to average")]
    EmptyCurves,
    #[error("curves disagree on joint, axis or side")]
    MixedJointOrAxis,
    #[error("curve must have {expected} finite values, found {found}")]
    InvalidCurve { expected: usize, found: usize },
    #[error("gait-cycle percentage {0} is outside [0, 100]")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "Left",
            Side::Right => "Right",
        })
    }
}

/// Side a curve belongs to; the torso is a midline marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSide {
    Left,
    Right,
    Center,
}

impl CurveSide {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveSide::Left => "left",
            CurveSide::Right => "right",
            CurveSide::Center => "center",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Some(CurveSide::Left),
            "right" => Some(CurveSide::Right),
            "center" | "centre" => Some(CurveSide::Center),
            _ => None,
        }
    }
}

impl From<Side> for CurveSide {
    fn from(side: Side) -> Self {
        match side {
            Side::Left => CurveSide::Left,
            Side::Right => CurveSide::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Joint {
    Hip,
    Knee,
    Ankle,
    Torso,
}

impl Joint {
    pub const ALL: [Joint; 4] = [Joint::Hip, Joint::Knee, Joint::Ankle, Joint::Torso];
    pub const LIMB: [Joint; 3] = [Joint::Hip, Joint::Knee, Joint::Ankle];

    pub fn as_str(self) -> &'static str {
        match self {
            Joint::Hip => "hip",
            Joint::Knee => "knee",
            Joint::Ankle => "ankle",
            Joint::Torso => "torso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Joint::ALL
            .into_iter()
            .find(|j| j.as_str().eq_ignore_ascii_case(s))
    }

    /// Side a curve of this joint is reported on for a limb side.
    pub fn curve_side(self, side: Side) -> CurveSide {
        match self {
            Joint::Torso => CurveSide::Center,
            _ => side.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
    }

    pub fn plane_name(self) -> &'static str {
        match self {
            Axis::X => "mediolateral",
            Axis::Y => "anteroposterior",
            Axis::Z => "vertical",
        }
    }
}
