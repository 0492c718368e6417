//! Patient-versus-normative comparison plots rendered to PNG.
//!
//! Output is a pure function of the spec: fixed canvas, palette and a
//! built-in bitmap font, and no metadata chunks in the encoded file.

mod font;

use std::collections::BTreeMap;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::gaitkin::{Axis, CurveSide, Joint, NormalizedCurve, Side, CURVE_POINTS};
use crate::normbase::{CurveKey, NormativeSubject};

pub const WIDTH: u32 = 800;
pub const HEIGHT: u32 = 600;

const MARGIN_LEFT: i64 = 80;
const MARGIN_RIGHT: i64 = 20;
const MARGIN_TOP: i64 = 40;
const MARGIN_BOTTOM: i64 = 60;

pub const PATIENT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const NORMATIVE_COLOR: Rgb<u8> = Rgb([0, 0, 0]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([64, 64, 64]);
const GRID: Rgb<u8> = Rgb([200, 200, 200]);

/// Phase boundaries drawn as vertical gridlines, in percent of the cycle.
pub const PHASE_GRIDLINES: [u32; 3] = [60, 61, 80];

const Y_PADDING: f64 = 0.05;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PlotError {
    #[error("curve length mismatch: patient {patient}, normative {normative}, expected {expected}")]
    CurveLengthMismatch {
        patient: usize,
        normative: usize,
        expected: usize,
    },
    #[error("non-finite curve value")]
    NonFinite,
    #[error("missing {which} curve for {key}")]
    MissingCurve { which: &'static str, key: String },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPlotSpec {
    pub case_id: String,
    pub joint: Joint,
    pub axis: Axis,
    pub side: CurveSide,
    pub patient: NormalizedCurve,
    pub normative: NormalizedCurve,
}

impl ComparisonPlotSpec {
    /// `<case>_<joint>_<axis>_<side>`; also the PNG file stem.
    pub fn plot_id(&self) -> String {
        plot_id(&self.case_id, self.joint, self.axis, self.side)
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.plot_id())
    }

    fn check(&self) -> Result<(), PlotError> {
        let (p, n) = (self.patient.values.len(), self.normative.values.len());
        if p != CURVE_POINTS || n != CURVE_POINTS {
            return Err(PlotError::CurveLengthMismatch {
                patient: p,
                normative: n,
                expected: CURVE_POINTS,
            });
        }
        if self
            .patient
            .values
            .iter()
            .chain(&self.normative.values)
            .any(|v| !v.is_finite())
        {
            return Err(PlotError::NonFinite);
        }
        Ok(())
    }
}

pub fn plot_id(case_id: &str, joint: Joint, axis: Axis, side: CurveSide) -> String {
    format!("{case_id}_{}_{}_{}", joint.as_str(), axis.as_str(), side.as_str())
}

/// Value range shown on the y axis: the union of both curves, padded.
pub fn y_range(spec: &ComparisonPlotSpec) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in spec.patient.values.iter().chain(&spec.normative.values) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        return (lo - 1.0, hi + 1.0);
    }
    (lo - Y_PADDING * span, hi + Y_PADDING * span)
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn left() -> i64 {
        MARGIN_LEFT
    }
    fn right() -> i64 {
        WIDTH as i64 - MARGIN_RIGHT
    }
    fn top() -> i64 {
        MARGIN_TOP
    }
    fn bottom() -> i64 {
        HEIGHT as i64 - MARGIN_BOTTOM
    }

    fn x(&self, percent: f64) -> i64 {
        let w = (Self::right() - Self::left()) as f64;
        Self::left() + (w * percent / 100.0).round() as i64
    }

    fn y(&self, value: f64) -> i64 {
        let h = (Self::bottom() - Self::top()) as f64;
        Self::bottom() - (h * (value - self.lo) / (self.hi - self.lo)).round() as i64
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham segment, two pixels thick (the pixel and the one below it).
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        put(img, x, y + 1, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn polyline(img: &mut RgbImage, frame: &Frame, values: &[f64], color: Rgb<u8>) {
    let pts: Vec<(i64, i64)> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| (frame.x(k as f64), frame.y(v)))
        .collect();
    for w in pts.windows(2) {
        line(img, w[0], w[1], color);
    }
}

fn tick_label(v: f64, span: f64) -> String {
    if span >= 10.0 {
        format!("{v:.0}")
    } else if span >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn title(spec: &ComparisonPlotSpec) -> String {
    format!(
        "{} {} ({}) - {}",
        spec.joint.as_str(),
        spec.axis.as_str(),
        spec.axis.plane_name(),
        spec.side.as_str()
    )
    .to_uppercase()
}

pub fn render_image(spec: &ComparisonPlotSpec) -> Result<RgbImage, PlotError> {
    spec.check()?;
    let (lo, hi) = y_range(spec);
    let frame = Frame { lo, hi };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);

    for p in PHASE_GRIDLINES {
        let x = frame.x(p as f64);
        for y in Frame::top()..=Frame::bottom() {
            put(&mut img, x, y, GRID);
        }
    }

    for y in Frame::top()..=Frame::bottom() {
        put(&mut img, Frame::left() - 1, y, INK);
    }
    for x in Frame::left() - 1..=Frame::right() {
        put(&mut img, x, Frame::bottom() + 1, INK);
    }

    for p in (0..=100).step_by(20) {
        let x = frame.x(p as f64);
        for dy in 2..6 {
            put(&mut img, x, Frame::bottom() + dy, INK);
        }
        let label = p.to_string();
        font::draw_text(&mut img, &label, x - font::text_width(&label, 2) / 2, Frame::bottom() + 8, 2, INK);
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = frame.y(v);
        for dx in 2..6 {
            put(&mut img, Frame::left() - dx, y, INK);
        }
        let label = tick_label(v, hi - lo);
        font::draw_text(&mut img, &label, Frame::left() - 8 - font::text_width(&label, 2), y - 7, 2, INK);
    }

    let x_label = "GAIT CYCLE (%)";
    font::draw_text(
        &mut img,
        x_label,
        (Frame::left() + Frame::right()) / 2 - font::text_width(x_label, 2) / 2,
        HEIGHT as i64 - 22,
        2,
        INK,
    );
    font::draw_text(&mut img, "MM", 8, 8, 2, INK);
    font::draw_text(&mut img, &title(spec), Frame::left(), 12, 2, INK);
    let legend = "RED PATIENT  BLACK NORMATIVE";
    font::draw_text(&mut img, legend, Frame::right() - font::text_width(legend, 1), 28, 1, INK);

    polyline(&mut img, &frame, &spec.normative.values, NORMATIVE_COLOR);
    polyline(&mut img, &frame, &spec.patient.values, PATIENT_COLOR);
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, PlotError> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| PlotError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn render_plot(spec: &ComparisonPlotSpec) -> Result<Vec<u8>, PlotError> {
    encode_png(&render_image(spec)?)
}

/// A rendered plot plus the numbers an analyzer prompt quotes alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPlot {
    pub id: String,
    pub joint: Joint,
    pub axis: Axis,
    pub side: CurveSide,
    pub max_abs_deviation_mm: f64,
    pub peak_deviation_percent: usize,
    #[serde(skip)]
    pub png: Vec<u8>,
}

impl RenderedPlot {
    pub fn file_name(&self) -> String {
        format!("{}.png", self.id)
    }
}

/// Keys plotted for one case: every joint and axis on the affected side,
/// plus the torso.
pub fn plot_keys(affected: Side) -> Vec<CurveKey> {
    let mut keys = Vec::with_capacity(12);
    for joint in Joint::ALL {
        for axis in Axis::ALL {
            keys.push(CurveKey::new(joint, axis, joint.curve_side(affected)));
        }
    }
    keys
}

pub fn render_plot_set(
    case_id: &str,
    affected: Side,
    patient: &BTreeMap<CurveKey, NormalizedCurve>,
    normative: &NormativeSubject,
) -> Result<Vec<RenderedPlot>, PlotError> {
    render_plots(case_id, &plot_keys(affected), patient, normative)
}

/// Renders one comparison plot per key, in key order.
pub fn render_plots(
    case_id: &str,
    keys: &[CurveKey],
    patient: &BTreeMap<CurveKey, NormalizedCurve>,
    normative: &NormativeSubject,
) -> Result<Vec<RenderedPlot>, PlotError> {
    keys.iter()
        .map(|&key| {
            let describe = || format!("{}_{}_{}", key.joint.as_str(), key.axis.as_str(), key.side.as_str());
            let p = patient.get(&key).ok_or_else(|| PlotError::MissingCurve {
                which: "patient",
                key: describe(),
            })?;
            let n = normative
                .curve(key.joint, key.axis, key.side)
                .ok_or_else(|| PlotError::MissingCurve {
                    which: "normative",
                    key: describe(),
                })?;
            let spec = ComparisonPlotSpec {
                case_id: case_id.to_string(),
                joint: key.joint,
                axis: key.axis,
                side: key.side,
                patient: p.clone(),
                normative: n.clone(),
            };
            let png = render_plot(&spec)?;
            let (dev, at) = p.max_abs_deviation(n);
            Ok(RenderedPlot {
                id: spec.plot_id(),
                joint: key.joint,
                axis: key.axis,
                side: key.side,
                max_abs_deviation_mm: dev,
                peak_deviation_percent: at,
                png,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn curve(values: Vec<f64>) -> NormalizedCurve {
        NormalizedCurve::new(Joint::Knee, Axis::Y, CurveSide::Left, values).unwrap()
    }

    fn spec(patient: Vec<f64>, normative: Vec<f64>) -> ComparisonPlotSpec {
        ComparisonPlotSpec {
            case_id: "c1".into(),
            joint: Joint::Knee,
            axis: Axis::Y,
            side: CurveSide::Left,
            patient: curve(patient),
            normative: curve(normative),
        }
    }

    fn sine(amp: f64, offset: f64) -> Vec<f64> {
        (0..CURVE_POINTS)
            .map(|k| offset + amp * (2.0 * std::f64::consts::PI * k as f64 / 100.0).sin())
            .collect()
    }

    fn pixels(img: &RgbImage, color: Rgb<u8>) -> BTreeSet<(u32, u32)> {
        img.enumerate_pixels()
            .filter(|(_, _, p)| **p == color)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn png_has_expected_size_and_colors() {
        let s = spec(sine(40.0, 10.0), sine(30.0, 0.0));
        let png = render_plot(&s).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (800, 600));
        assert!(!pixels(&img, PATIENT_COLOR).is_empty());
        assert!(!pixels(&img, NORMATIVE_COLOR).is_empty());
        assert_eq!(s.file_name(), "c1_knee_y_left.png");
    }

    #[test]
    fn identical_curves_draw_red_over_black() {
        let s = spec(sine(20.0, 0.0), sine(20.0, 0.0));
        let img = render_image(&s).unwrap();
        assert!(!pixels(&img, PATIENT_COLOR).is_empty());
        assert!(pixels(&img, NORMATIVE_COLOR).is_empty());
        assert_eq!(render_plot(&s).unwrap(), render_plot(&s).unwrap());
    }

    #[test]
    fn constant_curves_are_distinct_horizontal_lines() {
        let s = spec(vec![100.0; CURVE_POINTS], vec![0.0; CURVE_POINTS]);
        let img = render_image(&s).unwrap();
        let rows = |c| pixels(&img, c).into_iter().map(|(_, y)| y).collect::<BTreeSet<_>>();
        let (red, black) = (rows(PATIENT_COLOR), rows(NORMATIVE_COLOR));
        assert_eq!(red.len(), 2);
        assert_eq!(black.len(), 2);
        assert!(red.iter().max() < black.iter().min());
    }

    #[test]
    fn degenerate_range_is_widened() {
        let s = spec(vec![5.0; CURVE_POINTS], vec![5.0; CURVE_POINTS]);
        assert_eq!(y_range(&s), (4.0, 6.0));
        assert!(render_plot(&s).is_ok());
    }

    #[test]
    fn short_curve_is_rejected() {
        let mut s = spec(sine(1.0, 0.0), sine(1.0, 0.0));
        s.normative.values.pop();
        assert_eq!(
            render_plot(&s),
            Err(PlotError::CurveLengthMismatch {
                patient: 101,
                normative: 100,
                expected: 101
            })
        );
    }

    #[test]
    fn y_mapping_is_affine_with_padding() {
        let s = spec(vec![10.0; CURVE_POINTS], vec![-10.0; CURVE_POINTS]);
        let (lo, hi) = y_range(&s);
        assert!((lo + 11.0).abs() < 1e-12 && (hi - 11.0).abs() < 1e-12);
        let f = Frame { lo, hi };
        assert_eq!(f.y(lo), Frame::bottom());
        assert_eq!(f.y(hi), Frame::top());
        assert_eq!(f.y(0.0), (Frame::top() + Frame::bottom()) / 2);
    }

    #[test]
    fn plot_keys_cover_affected_side_and_torso() {
        let keys = plot_keys(Side::Right);
        assert_eq!(keys.len(), 12);
        for k in &keys {
            let expected = if k.joint == Joint::Torso { CurveSide::Center } else { CurveSide::Right };
            assert_eq!(k.side, expected);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn swapping_curves_swaps_colors(amp in 5.0f64..80.0, gap in 60.0f64..200.0, phase in 0.0f64..6.0) {
            let a: Vec<f64> = (0..CURVE_POINTS)
                .map(|k| amp * (phase + k as f64 / 16.0).sin() + gap)
                .collect();
            let b: Vec<f64> = (0..CURVE_POINTS)
                .map(|k| amp * (phase + k as f64 / 16.0).sin())
                .collect();
            let one = render_image(&spec(a.clone(), b.clone())).unwrap();
            let two = render_image(&spec(b, a)).unwrap();
            prop_assert_eq!(pixels(&one, PATIENT_COLOR), pixels(&two, NORMATIVE_COLOR));
            prop_assert_eq!(pixels(&one, NORMATIVE_COLOR), pixels(&two, PATIENT_COLOR));
        }

        #[test]
        fn rendering_is_byte_deterministic(amp in 0.0f64..500.0, offset in -300.0f64..300.0) {
            let s = spec(sine(amp, offset), sine(amp / 2.0, -offset));
            prop_assert_eq!(render_plot(&s).unwrap(), render_plot(&s.clone()).unwrap());
        }
    }
}
