//! Frame tensors: per-timestep accumulated inputs and layer activations.

use crate::error::{Error, Result};
use crate::events::AccumMode;

/// Tensor shape in (channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Dense (channels, height, width) activation tensor, row-major within a
/// channel. Channel 0 is negative polarity, channel 1 positive for sensor
/// input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl FrameTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { values: vec![0.0; shape.len()], shape }
    }

    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Validation(format!(
                "value count {} does not match shape {}",
                values.len(),
                shape
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.c && y < self.shape.h && x < self.shape.w);
        (c * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    /// Indices and values of nonzero elements, in memory order.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Output of [`crate::events::accumulate`]: frames plus binning metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<FrameTensor>,
    pub shape: Shape,
    pub window_us: u64,
    pub group: u32,
    pub mode: AccumMode,
    /// True when the last frame covers less sensor time than a full group
    /// of full windows.
    pub tail_partial: bool,
}

impl FrameSequence {
    /// Sensor time covered by one output frame, in microseconds.
    pub fn step_us(&self) -> u64 {
        self.window_us * u64::from(self.group)
    }
}

const FRAMES_MAGIC: &[u8; 4] = b"EVF1";
const FRAMES_VERSION: u16 = 1;
const FRAMES_HEADER_LEN: usize = 32;

/// Serialize a frame sequence into the EVF1 binary layout (little-endian):
/// magic "EVF1", version u16, mode u8, tail_partial u8, channels u16,
/// height u16, width u16, pad u16, window_us u64, group u32, frame count
/// u32, then per frame `c*h*w` f32 values.
pub fn write_frames(seq: &FrameSequence) -> Result<Vec<u8>> {
    let n_frames = u32::try_from(seq.frames.len())
        .map_err(|_| Error::Capacity("frame count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(FRAMES_HEADER_LEN + seq.frames.len() * seq.shape.len() * 4);
    out.extend_from_slice(FRAMES_MAGIC);
    out.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    out.push(match seq.mode {
        AccumMode::Graded => 0,
        AccumMode::Binary => 1,
    });
    out.push(u8::from(seq.tail_partial));
    out.extend_from_slice(&(seq.shape.c as u16).to_le_bytes());
    out.extend_from_slice(&(seq.shape.h as u16).to_le_bytes());
    out.extend_from_slice(&(seq.shape.w as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&seq.window_us.to_le_bytes());
    out.extend_from_slice(&seq.group.to_le_bytes());
    out.extend_from_slice(&n_frames.to_le_bytes());
    debug_assert_eq!(out.len(), FRAMES_HEADER_LEN);
    for frame in &seq.frames {
        debug_assert_eq!(frame.shape(), seq.shape);
        for v in frame.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_frames(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < FRAMES_HEADER_LEN {
        return Err(Error::Truncated { offset: bytes.len() as u64, what: "EVF1 header".into() });
    }
    if &bytes[0..4] != FRAMES_MAGIC {
        return Err(Error::Format("missing EVF1 magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FRAMES_VERSION {
        return Err(Error::Format(format!("unsupported EVF1 version {version}")));
    }
    let mode = match bytes[6] {
        0 => AccumMode::Graded,
        1 => AccumMode::Binary,
        m => return Err(Error::Format(format!("unknown accumulation mode {m}"))),
    };
    let tail_partial = bytes[7] != 0;
    let c = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let h = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let w = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let window_us = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let group = u32::from_le_bytes(bytes[24..28].try_into().expect("4 bytes"));
    let n_frames = u32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes")) as usize;
    let shape = Shape::new(c, h, w);

    let frame_bytes = shape.len() * 4;
    let expected = FRAMES_HEADER_LEN + n_frames * frame_bytes;
    if bytes.len() < expected {
        let complete = (bytes.len() - FRAMES_HEADER_LEN) / frame_bytes.max(1);
        return Err(Error::Truncated {
            offset: (FRAMES_HEADER_LEN + complete * frame_bytes) as u64,
            what: format!("frame {} of {}", complete, n_frames),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} frames",
            bytes.len() - expected,
            n_frames
        )));
    }

    let mut frames = Vec::with_capacity(n_frames);
    let mut off = FRAMES_HEADER_LEN;
    for _ in 0..n_frames {
        let mut values = Vec::with_capacity(shape.len());
        for _ in 0..shape.len() {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            values.push(f64::from(v));
            off += 4;
        }
        frames.push(FrameTensor::from_values(shape, values)?);
    }
    Ok(FrameSequence { frames, shape, window_us, group, mode, tail_partial })
}
