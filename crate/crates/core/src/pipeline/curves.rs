use std::collections::BTreeMap;

use crate::gaitkin::{
    mean_cycle_curve, normalize_cycle, segment_cycles, CurveSide, GaitCycle, GaitError, MarkerTimeSeries,
    NormalizedCurve, Side,
};
use crate::normbase::CurveKey;

/// Mean normalized curve for every joint, axis and side. Limb curves use
/// their own side's cycles; the torso is referenced to left heel strikes.
pub fn patient_curve_set(series: &MarkerTimeSeries) -> Result<BTreeMap<CurveKey, NormalizedCurve>, GaitError> {
    let left = segment_cycles(series, Side::Left)?;
    let right = segment_cycles(series, Side::Right)?;
    curve_set_from_cycles(series, &left, &right)
}

pub fn curve_set_from_cycles(
    series: &MarkerTimeSeries,
    left: &[GaitCycle],
    right: &[GaitCycle],
) -> Result<BTreeMap<CurveKey, NormalizedCurve>, GaitError> {
    CurveKey::all()
        .into_iter()
        .map(|key| {
            let cycles = match key.side {
                CurveSide::Right => right,
                CurveSide::Left | CurveSide::Center => left,
            };
            let curves = cycles
                .iter()
                .map(|c| normalize_cycle(series, c, key.joint, key.axis))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((key, mean_cycle_curve(&curves)?))
        })
        .collect()
}
