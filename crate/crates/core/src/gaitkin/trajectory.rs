use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Axis, GaitError, Joint, Side};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// The seven markers every trajectory must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CanonicalMarker {
    #[serde(rename = "HIP_L")]
    HipL,
    #[serde(rename = "HIP_R")]
    HipR,
    #[serde(rename = "KNEE_L")]
    KneeL,
    #[serde(rename = "KNEE_R")]
    KneeR,
    #[serde(rename = "ANKLE_L")]
    AnkleL,
    #[serde(rename = "ANKLE_R")]
    AnkleR,
    #[serde(rename = "TORSO")]
    Torso,
}

impl CanonicalMarker {
    pub const REQUIRED: [CanonicalMarker; 7] = [
        CanonicalMarker::HipL,
        CanonicalMarker::HipR,
        CanonicalMarker::KneeL,
        CanonicalMarker::KneeR,
        CanonicalMarker::AnkleL,
        CanonicalMarker::AnkleR,
        CanonicalMarker::Torso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CanonicalMarker::HipL => "HIP_L",
            CanonicalMarker::HipR => "HIP_R",
            CanonicalMarker::KneeL => "KNEE_L",
            CanonicalMarker::KneeR => "KNEE_R",
            CanonicalMarker::AnkleL => "ANKLE_L",
            CanonicalMarker::AnkleR => "ANKLE_R",
            CanonicalMarker::Torso => "TORSO",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::REQUIRED.into_iter().find(|m| m.name() == name)
    }

    /// Marker carrying a joint's trajectory; the torso ignores `side`.
    pub fn for_joint(joint: Joint, side: Side) -> Self {
        match (joint, side) {
            (Joint::Hip, Side::Left) => CanonicalMarker::HipL,
            (Joint::Hip, Side::Right) => CanonicalMarker::HipR,
            (Joint::Knee, Side::Left) => CanonicalMarker::KneeL,
            (Joint::Knee, Side::Right) => CanonicalMarker::KneeR,
            (Joint::Ankle, Side::Left) => CanonicalMarker::AnkleL,
            (Joint::Ankle, Side::Right) => CanonicalMarker::AnkleR,
            (Joint::Torso, _) => CanonicalMarker::Torso,
        }
    }
}

/// Maps vendor marker labels onto canonical names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalMarkerSet {
    aliases: BTreeMap<String, CanonicalMarker>,
}

impl Default for CanonicalMarkerSet {
    fn default() -> Self {
        Self::identity()
    }
}

impl CanonicalMarkerSet {
    /// Labels equal to the canonical names.
    pub fn identity() -> Self {
        let aliases = CanonicalMarker::REQUIRED
            .into_iter()
            .map(|m| (m.name().to_string(), m))
            .collect();
        Self { aliases }
    }

    pub fn empty() -> Self {
        Self {
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_alias(mut self, label: impl Into<String>, marker: CanonicalMarker) -> Self {
        self.aliases.insert(label.into(), marker);
        self
    }

    pub fn resolve(&self, label: &str) -> Option<CanonicalMarker> {
        self.aliases.get(label).copied()
    }
}

/// Uniformly sampled 3D marker positions, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTimeSeries {
    sample_rate_hz: f64,
    start_time_s: f64,
    markers: BTreeMap<CanonicalMarker, Vec<Point3>>,
}

impl MarkerTimeSeries {
    pub fn new(
        sample_rate_hz: f64,
        markers: BTreeMap<CanonicalMarker, Vec<Point3>>,
    ) -> Result<Self, GaitError> {
        Self::with_start_time(sample_rate_hz, 0.0, markers)
    }

    pub fn with_start_time(
        sample_rate_hz: f64,
        start_time_s: f64,
        markers: BTreeMap<CanonicalMarker, Vec<Point3>>,
    ) -> Result<Self, GaitError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(GaitError::InvalidSeries(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        for marker in CanonicalMarker::REQUIRED {
            if !markers.contains_key(&marker) {
                return Err(GaitError::MissingMarker(marker.name().to_string()));
            }
        }
        let len = markers.values().next().map(Vec::len).unwrap_or(0);
        if len < 2 {
            return Err(GaitError::TooFewSamples(len));
        }
        for (marker, points) in &markers {
            if points.len() != len {
                return Err(GaitError::InvalidSeries(format!(
                    "marker {} has {} samples, expected {len}",
                    marker.name(),
                    points.len()
                )));
            }
            if let Some(i) = points.iter().position(|p| !p.is_finite()) {
                return Err(GaitError::InvalidSeries(format!(
                    "marker {} has a non-finite coordinate at sample {i}",
                    marker.name()
                )));
            }
        }
        Ok(Self {
            sample_rate_hz,
            start_time_s,
            markers,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn start_time_s(&self) -> f64 {
        self.start_time_s
    }

    pub fn len(&self) -> usize {
        self.markers.values().next().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        (self.len() - 1) as f64 / self.sample_rate_hz
    }

    pub fn marker(&self, marker: CanonicalMarker) -> &[Point3] {
        // Presence of every required marker is a constructor invariant.
        &self.markers[&marker]
    }

    pub fn markers(&self) -> impl Iterator<Item = (CanonicalMarker, &[Point3])> {
        self.markers.iter().map(|(m, p)| (*m, p.as_slice()))
    }
}

struct LabelColumns {
    label: String,
    cols: [Option<usize>; 3],
}

fn split_header_column(name: &str) -> Option<(&str, Axis)> {
    let stem = name.strip_suffix("_mm")?;
    let (label, axis) = stem.rsplit_once('_')?;
    if label.is_empty() {
        return None;
    }
    Some((label, Axis::parse(axis)?))
}

/// Parses a trajectory CSV export.
///
/// Header: `time_s,<label>_x_mm,<label>_y_mm,<label>_z_mm,...`. Labels not
/// known to `aliases` are ignored. Line numbers in errors are 1-based file
/// lines, columns are 1-based.
pub fn parse_trajectory(
    csv_bytes: &[u8],
    aliases: &CanonicalMarkerSet,
) -> Result<MarkerTimeSeries, GaitError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(csv_bytes);
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(GaitError::EmptyInput),
        Some(Err(e)) => return Err(GaitError::MalformedHeader(e.to_string())),
        Some(Ok(h)) => h,
    };
    let header: Vec<String> = header
        .iter()
        .map(|s| s.trim_start_matches('\u{feff}').to_string())
        .collect();
    if header.first().map(String::as_str) != Some("time_s") {
        return Err(GaitError::MalformedHeader(
            "first column must be time_s".into(),
        ));
    }

    let mut labels: Vec<LabelColumns> = Vec::new();
    for (col, name) in header.iter().enumerate().skip(1) {
        let (label, axis) = split_header_column(name)
            .ok_or_else(|| GaitError::MalformedHeader(format!("unrecognised column {name:?}")))?;
        let idx = match labels.iter().position(|l| l.label == label) {
            Some(i) => i,
            None => {
                labels.push(LabelColumns {
                    label: label.to_string(),
                    cols: [None; 3],
                });
                labels.len() - 1
            }
        };
        let slot = &mut labels[idx].cols[axis as usize];
        if slot.is_some() {
            return Err(GaitError::MalformedHeader(format!("duplicate column {name:?}")));
        }
        *slot = Some(col);
    }

    let mut resolved: BTreeMap<CanonicalMarker, (&str, [usize; 3])> = BTreeMap::new();
    for entry in &labels {
        let Some(marker) = aliases.resolve(&entry.label) else {
            continue;
        };
        let [Some(x), Some(y), Some(z)] = entry.cols else {
            return Err(GaitError::MalformedHeader(format!(
                "marker label {} lacks one of its x/y/z columns",
                entry.label
            )));
        };
        if let Some((first, _)) = resolved.get(&marker) {
            return Err(GaitError::AmbiguousMarker {
                canonical: marker.name().to_string(),
                first: first.to_string(),
                second: entry.label.clone(),
            });
        }
        resolved.insert(marker, (&entry.label, [x, y, z]));
    }
    for marker in CanonicalMarker::REQUIRED {
        if !resolved.contains_key(&marker) {
            return Err(GaitError::MissingMarker(marker.name().to_string()));
        }
    }

    let mut times: Vec<(f64, usize)> = Vec::new();
    let mut points: BTreeMap<CanonicalMarker, Vec<Point3>> =
        resolved.keys().map(|m| (*m, Vec::new())).collect();
    for (row_no, record) in records.enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|_| GaitError::MalformedRow(line))?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != header.len() {
            return Err(GaitError::MalformedRow(line));
        }
        let field = |col: usize| -> Result<f64, GaitError> {
            let v: f64 = record[col]
                .parse()
                .map_err(|_| GaitError::MalformedRow(line))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(GaitError::NonFiniteValue(line, col + 1))
            }
        };
        times.push((field(0)?, line));
        for (marker, (_, [x, y, z])) in &resolved {
            let p = Point3::new(field(*x)?, field(*y)?, field(*z)?);
            points.get_mut(marker).expect("initialised above").push(p);
        }
    }
    if times.len() < 2 {
        return Err(GaitError::TooFewSamples(times.len()));
    }

    let mut deltas: Vec<f64> = times.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let mut sorted = deltas.clone();
    sorted.sort_by(f64::total_cmp);
    let median_dt = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    if median_dt <= 0.0 {
        return Err(GaitError::NonUniformSampling {
            median_dt,
            dt: median_dt,
            line: times[1].1,
        });
    }
    for (i, dt) in deltas.drain(..).enumerate() {
        if (dt - median_dt).abs() > 0.01 * median_dt {
            return Err(GaitError::NonUniformSampling {
                median_dt,
                dt,
                line: times[i + 1].1,
            });
        }
    }

    MarkerTimeSeries::with_start_time(1.0 / median_dt, times[0].0, points)
}

/// Writes a series in the canonical CSV layout, labelled with canonical names.
pub fn write_trajectory_csv(series: &MarkerTimeSeries) -> String {
    let mut out = String::from("time_s");
    for marker in CanonicalMarker::REQUIRED {
        let name = marker.name();
        let _ = write!(out, ",{name}_x_mm,{name}_y_mm,{name}_z_mm");
    }
    out.push('\n');
    for i in 0..series.len() {
        let t = series.start_time_s() + i as f64 / series.sample_rate_hz();
        let _ = write!(out, "{t}");
        for marker in CanonicalMarker::REQUIRED {
            let p = series.marker(marker)[i];
            let _ = write!(out, ",{},{},{}", p.x, p.y, p.z);
        }
        out.push('\n');
    }
    out
}
