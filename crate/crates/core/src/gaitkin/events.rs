use serde::{Deserialize, Serialize};

use super::{CanonicalMarker, GaitError, Joint, MarkerTimeSeries, Side};

/// Minimum spacing between two heel strikes of the same foot.
pub const MIN_STRIDE_SEPARATION_S: f64 = 0.4;

/// One stride: two consecutive heel strikes of the same foot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaitCycle {
    pub side: Side,
    pub start_index: usize,
    pub end_index: usize,
}

impl GaitCycle {
    pub fn duration_s(&self, sample_rate_hz: f64) -> f64 {
        (self.end_index - self.start_index) as f64 / sample_rate_hz
    }
}

/// Ankle anteroposterior position relative to the torso marker.
fn ankle_excursion(series: &MarkerTimeSeries, side: Side) -> Vec<f64> {
    let ankle = series.marker(CanonicalMarker::for_joint(Joint::Ankle, side));
    let torso = series.marker(CanonicalMarker::Torso);
    ankle.iter().zip(torso).map(|(a, t)| a.y - t.y).collect()
}

/// Heel strikes as peaks of the ankle's forward excursion ahead of the torso.
///
/// A candidate is an interior sample strictly above its left neighbour and
/// not below its right one (the first sample of a plateau). Candidates
/// closer than [`MIN_STRIDE_SEPARATION_S`] are thinned by keeping the higher
/// peak; equal heights keep the earlier one.
pub fn detect_heel_strikes(series: &MarkerTimeSeries, side: Side) -> Result<Vec<usize>, GaitError> {
    let signal = ankle_excursion(series, side);
    let min_gap = MIN_STRIDE_SEPARATION_S * series.sample_rate_hz();

    let mut candidates: Vec<usize> = (1..signal.len().saturating_sub(1))
        .filter(|&i| signal[i] > signal[i - 1] && signal[i] >= signal[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if kept.iter().all(|&k| (k.abs_diff(c) as f64) >= min_gap) {
            kept.push(c);
        }
    }
    kept.sort_unstable();

    if kept.len() < 2 {
        return Err(GaitError::NoStrideDetected);
    }
    Ok(kept)
}

/// Pairs consecutive heel strikes into cycles.
pub fn segment_cycles(series: &MarkerTimeSeries, side: Side) -> Result<Vec<GaitCycle>, GaitError> {
    let events = detect_heel_strikes(series, side)?;
    Ok(events
        .windows(2)
        .map(|w| GaitCycle {
            side,
            start_index: w[0],
            end_index: w[1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaitkin::Point3;
    use std::collections::BTreeMap;

    fn series_from_excursion(rate: f64, excursion: &[f64]) -> MarkerTimeSeries {
        let mut markers = BTreeMap::new();
        for m in CanonicalMarker::REQUIRED {
            let pts = match m {
                CanonicalMarker::AnkleL | CanonicalMarker::AnkleR => excursion
                    .iter()
                    .map(|&y| Point3::new(0.0, y + 50.0, 80.0))
                    .collect(),
                _ => vec![Point3::new(0.0, 50.0, 900.0); excursion.len()],
            };
            markers.insert(m, pts);
        }
        MarkerTimeSeries::new(rate, markers).unwrap()
    }

    // Naive O(n^2) scan: every sample that is a strict local max of its
    // neighbourhood and dominates all other maxima within the separation
    // window.
    fn brute_force_peaks(signal: &[f64], min_gap: f64) -> Vec<usize> {
        let maxima: Vec<usize> = (1..signal.len() - 1)
            .filter(|&i| signal[i] > signal[i - 1] && signal[i] >= signal[i + 1])
            .collect();
        maxima
            .iter()
            .copied()
            .filter(|&i| {
                maxima.iter().all(|&j| {
                    j == i
                        || ((j.abs_diff(i) as f64) >= min_gap)
                        || signal[i] > signal[j]
                        || (signal[i] == signal[j] && i < j)
                })
            })
            .collect()
    }

    #[test]
    fn sinusoid_peaks_match_analytic_maxima() {
        let rate = 100.0;
        let period = 1.2;
        let n = 501;
        let signal: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                200.0 * (2.0 * std::f64::consts::PI * (t - 0.3) / period).cos()
            })
            .collect();
        let series = series_from_excursion(rate, &signal);
        let events = detect_heel_strikes(&series, Side::Left).unwrap();
        let analytic: Vec<f64> = (0..)
            .map(|k| 0.3 + period * k as f64)
            .take_while(|t| *t < 5.0)
            .collect();
        assert_eq!(events.len(), analytic.len());
        for (e, t) in events.iter().zip(&analytic) {
            assert!((*e as f64 - t * rate).abs() <= 2.0, "event {e} vs {t}");
        }
        let cycles = segment_cycles(&series, Side::Left).unwrap();
        assert_eq!(cycles.len(), analytic.len() - 1);
        for c in cycles {
            assert!((c.duration_s(rate) - period).abs() <= 0.02);
        }
    }

    #[test]
    fn constant_series_has_no_stride() {
        let series = series_from_excursion(100.0, &[10.0; 300]);
        assert_eq!(
            detect_heel_strikes(&series, Side::Right),
            Err(GaitError::NoStrideDetected)
        );
        assert_eq!(
            segment_cycles(&series, Side::Right),
            Err(GaitError::NoStrideDetected)
        );
    }

    #[test]
    fn two_strides_give_three_events() {
        // Peaks at samples 10, 110 and 210 of a 221-sample record.
        let rate = 100.0;
        let signal: Vec<f64> = (0..221)
            .map(|i| 100.0 * (2.0 * std::f64::consts::PI * (i as f64 - 10.0) / 100.0).cos())
            .collect();
        let series = series_from_excursion(rate, &signal);
        let events = detect_heel_strikes(&series, Side::Left).unwrap();
        assert_eq!(events, brute_force_peaks(&signal, MIN_STRIDE_SEPARATION_S * rate));
        assert_eq!(events, vec![10, 110, 210]);
        let cycles = segment_cycles(&series, Side::Left).unwrap();
        assert_eq!(cycles.len(), 2);
        assert_eq!((cycles[0].start_index, cycles[0].end_index), (10, 110));
        assert_eq!((cycles[1].start_index, cycles[1].end_index), (110, 210));
    }

    #[test]
    fn close_secondary_peaks_are_suppressed() {
        // Main stride peaks every 100 samples plus a small bump 20 samples later.
        let rate = 100.0;
        let signal: Vec<f64> = (0..420)
            .map(|i| {
                let x = i as f64;
                let main = 100.0 * (2.0 * std::f64::consts::PI * (x - 15.0) / 100.0).cos();
                let bump = 40.0 * (-((x % 100.0 - 35.0).powi(2)) / 8.0).exp();
                main + bump
            })
            .collect();
        let series = series_from_excursion(rate, &signal);
        let events = detect_heel_strikes(&series, Side::Left).unwrap();
        assert_eq!(events, brute_force_peaks(&signal, 40.0));
        for w in events.windows(2) {
            assert!(w[1] - w[0] >= 40);
        }
    }

    #[test]
    fn two_stride_events_segment_to_one_cycle() {
        let signal: Vec<f64> = (0..160)
            .map(|i| 100.0 * (2.0 * std::f64::consts::PI * (i as f64 - 20.0) / 100.0).cos())
            .collect();
        let series = series_from_excursion(100.0, &signal);
        let cycles = segment_cycles(&series, Side::Right).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!((cycles[0].start_index, cycles[0].end_index), (20, 120));
    }
}
