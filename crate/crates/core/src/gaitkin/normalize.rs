use serde::{Deserialize, Serialize};

use super::{Axis, CanonicalMarker, CurveSide, GaitCycle, GaitError, Joint, MarkerTimeSeries};

/// Samples per normalised cycle: 0 %, 1 %, ..., 100 %.
pub const CURVE_POINTS: usize = 101;

/// A joint coordinate resampled onto the 0..100 % gait-cycle grid (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCurve {
    pub joint: Joint,
    pub axis: Axis,
    pub side: CurveSide,
    pub values: Vec<f64>,
}

impl NormalizedCurve {
    pub fn new(joint: Joint, axis: Axis, side: CurveSide, values: Vec<f64>) -> Result<Self, GaitError> {
        let curve = Self {
            joint,
            axis,
            side,
            values,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if self.values.len() != CURVE_POINTS || self.values.iter().any(|v| !v.is_finite()) {
            return Err(GaitError::InvalidCurve {
                expected: CURVE_POINTS,
                found: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn max_abs_deviation(&self, other: &NormalizedCurve) -> (f64, usize) {
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(i, (a, b))| ((a - b).abs(), i))
            .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
    }

    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Resamples one marker coordinate of a cycle onto the 101-point grid by
/// linear interpolation. Grid point k sits at cycle-relative time k/100.
pub fn normalize_cycle(
    series: &MarkerTimeSeries,
    cycle: &GaitCycle,
    joint: Joint,
    axis: Axis,
) -> Result<NormalizedCurve, GaitError> {
    let len = series.len();
    if cycle.end_index <= cycle.start_index || cycle.end_index >= len {
        return Err(GaitError::CycleOutOfRange {
            start: cycle.start_index,
            end: cycle.end_index,
            len,
        });
    }
    let points = series.marker(CanonicalMarker::for_joint(joint, cycle.side));
    let span = (cycle.end_index - cycle.start_index) as f64;

    let values = (0..CURVE_POINTS)
        .map(|k| {
            if k == CURVE_POINTS - 1 {
                return points[cycle.end_index].get(axis);
            }
            let pos = cycle.start_index as f64 + span * k as f64 / 100.0;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = points[lo].get(axis);
            if frac == 0.0 {
                a
            } else {
                let b = points[lo + 1].get(axis);
                a + (b - a) * frac
            }
        })
        .collect();

    Ok(NormalizedCurve {
        joint,
        axis,
        side: joint.curve_side(cycle.side),
        values,
    })
}

/// Pointwise mean of cycles of one joint/axis/side.
pub fn mean_cycle_curve(curves: &[NormalizedCurve]) -> Result<NormalizedCurve, GaitError> {
    let first = curves.first().ok_or(GaitError::EmptyCurves)?;
    for c in curves {
        c.validate()?;
        if (c.joint, c.axis, c.side) != (first.joint, first.axis, first.side) {
            return Err(GaitError::MixedJointOrAxis);
        }
    }
    let n = curves.len() as f64;
    let values = (0..CURVE_POINTS)
        .map(|k| curves.iter().map(|c| c.values[k]).sum::<f64>() / n)
        .collect();
    Ok(NormalizedCurve {
        joint: first.joint,
        axis: first.axis,
        side: first.side,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitPhase {
    Stance,
    InitialSwing,
    MidSwing,
    TerminalSwing,
}

impl GaitPhase {
    pub const ALL: [GaitPhase; 4] = [
        GaitPhase::Stance,
        GaitPhase::InitialSwing,
        GaitPhase::MidSwing,
        GaitPhase::TerminalSwing,
    ];

    /// Human-readable bounds, used in prompts and plot annotations.
    pub fn bounds_label(self) -> &'static str {
        match self {
            GaitPhase::Stance => "stance 0-60%",
            GaitPhase::InitialSwing => "initial swing 60-61%",
            GaitPhase::MidSwing => "mid-swing 61-80%",
            GaitPhase::TerminalSwing => "terminal swing 80-100%",
        }
    }
}

/// Stance [0,60], initial swing (60,61), mid-swing [61,80], terminal swing (80,100].
pub fn phase_of(percent: f64) -> Result<GaitPhase, GaitError> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(GaitError::OutOfRange(percent));
    }
    Ok(if percent <= 60.0 {
        GaitPhase::Stance
    } else if percent < 61.0 {
        GaitPhase::InitialSwing
    } else if percent <= 80.0 {
        GaitPhase::MidSwing
    } else {
        GaitPhase::TerminalSwing
    })
}
