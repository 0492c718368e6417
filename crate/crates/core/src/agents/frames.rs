use std::path::PathBuf;
use std::process::Command;

use image::{ImageFormat, Rgb};
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::wgs::View;

pub const DEFAULT_FRAME_COUNT: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSampling {
    pub indices: Vec<usize>,
    /// The source had fewer frames than requested.
    pub short_video: bool,
    pub duplicates_removed: usize,
}

/// Evenly spaced source indices: `round(i * (F - 1) / (k - 1))` for
/// `i = 0..k`, rounding halves up. Sources shorter than `k` return every
/// frame and set `short_video`.
pub fn sample_frames(source_frames: usize, k: usize) -> FrameSampling {
    if source_frames == 0 || k == 0 {
        return FrameSampling {
            indices: Vec::new(),
            short_video: source_frames < k,
            duplicates_removed: 0,
        };
    }
    if source_frames < k {
        return FrameSampling {
            indices: (0..source_frames).collect(),
            short_video: true,
            duplicates_removed: 0,
        };
    }
    if k == 1 {
        return FrameSampling {
            indices: vec![0],
            short_video: false,
            duplicates_removed: 0,
        };
    }
    let (f, d) = (source_frames as u128 - 1, k as u128 - 1);
    let mut indices: Vec<usize> = (0..k as u128)
        .map(|i| ((2 * i * f + d) / (2 * d)) as usize)
        .collect();
    let before = indices.len();
    indices.dedup();
    FrameSampling {
        duplicates_removed: before - indices.len(),
        indices,
        short_video: false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub source_index: usize,
    pub bytes: Vec<u8>,
}

impl Frame {
    pub fn media_type(&self) -> &'static str {
        if self.bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            "image/jpeg"
        } else {
            "image/png"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSet {
    pub view: View,
    pub frames: Vec<Frame>,
    pub anonymized: bool,
}

impl FrameSet {
    pub fn new(view: View, frames: Vec<Frame>) -> Self {
        Self {
            view,
            frames,
            anonymized: false,
        }
    }

    /// Keeps the frames picked by [`sample_frames`], in source order.
    pub fn sampled(&self, k: usize) -> (FrameSet, FrameSampling) {
        let sampling = sample_frames(self.frames.len(), k);
        let frames = sampling
            .indices
            .iter()
            .map(|&i| self.frames[i].clone())
            .collect();
        (
            FrameSet {
                view: self.view,
                frames,
                anonymized: self.anonymized,
            },
            sampling,
        )
    }
}

/// Removes identifying content from frames.
pub trait Anonymizer: Send + Sync {
    fn id(&self) -> &str;
    fn process(&self, frames: &FrameSet) -> Result<Vec<Frame>, AgentError>;
}

/// Runs `anonymizer` and checks that every frame came back, in order.
pub fn anonymize_frames(frames: &FrameSet, anonymizer: &dyn Anonymizer) -> Result<FrameSet, AgentError> {
    let out = anonymizer.process(frames)?;
    for (i, f) in frames.frames.iter().enumerate() {
        match out.get(i) {
            Some(o) if o.source_index == f.source_index => {}
            _ => return Err(AgentError::AnonymizerFailed(f.source_index)),
        }
    }
    if out.len() != frames.frames.len() {
        return Err(AgentError::AnonymizerFailed(out.len()));
    }
    Ok(FrameSet {
        view: frames.view,
        frames: out,
        anonymized: true,
    })
}

/// Declared no-op for synthetic recordings that contain no people.
#[derive(Debug, Clone, Default)]
pub struct PassThroughAnonymizer;

impl Anonymizer for PassThroughAnonymizer {
    fn id(&self) -> &str {
        "pass-through"
    }

    fn process(&self, frames: &FrameSet) -> Result<Vec<Frame>, AgentError> {
        Ok(frames.frames.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Paints fixed rectangles black in every frame; output is PNG.
#[derive(Debug, Clone)]
pub struct RectMaskAnonymizer {
    pub rects: Vec<Rect>,
}

impl Anonymizer for RectMaskAnonymizer {
    fn id(&self) -> &str {
        "rect-mask"
    }

    fn process(&self, frames: &FrameSet) -> Result<Vec<Frame>, AgentError> {
        frames
            .frames
            .iter()
            .map(|f| {
                let failed = |_| AgentError::AnonymizerFailed(f.source_index);
                let mut img = image::load_from_memory(&f.bytes).map_err(failed)?.to_rgb8();
                let (w, h) = img.dimensions();
                for r in &self.rects {
                    for y in r.y..r.y.saturating_add(r.height).min(h) {
                        for x in r.x..r.x.saturating_add(r.width).min(w) {
                            img.put_pixel(x, y, Rgb([0, 0, 0]));
                        }
                    }
                }
                let mut bytes = Vec::new();
                img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
                    .map_err(failed)?;
                Ok(Frame {
                    source_index: f.source_index,
                    bytes,
                })
            })
            .collect()
    }
}

/// Delegates to an external program invoked as
/// `<program> <args...> <input dir> <output dir>`. Frames are exchanged as
/// `frame_<index>.png`; a frame missing from the output directory fails the
/// whole set.
#[derive(Debug, Clone)]
pub struct ExternalCommandAnonymizer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Anonymizer for ExternalCommandAnonymizer {
    fn id(&self) -> &str {
        "external-command"
    }

    fn process(&self, frames: &FrameSet) -> Result<Vec<Frame>, AgentError> {
        let io_err = |e: std::io::Error| AgentError::Anonymizer(e.to_string());
        let dir = tempfile::tempdir().map_err(io_err)?;
        let (input, output) = (dir.path().join("in"), dir.path().join("out"));
        std::fs::create_dir_all(&input).map_err(io_err)?;
        std::fs::create_dir_all(&output).map_err(io_err)?;
        for f in &frames.frames {
            std::fs::write(input.join(format!("frame_{}.png", f.source_index)), &f.bytes).map_err(io_err)?;
        }
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(io_err)?;
        if !status.success() {
            return Err(AgentError::Anonymizer(format!("{} exited with {status}", self.program.display())));
        }
        frames
            .frames
            .iter()
            .map(|f| {
                std::fs::read(output.join(format!("frame_{}.png", f.source_index)))
                    .map(|bytes| Frame {
                        source_index: f.source_index,
                        bytes,
                    })
                    .map_err(|_| AgentError::AnonymizerFailed(f.source_index))
            })
            .collect()
    }
}
