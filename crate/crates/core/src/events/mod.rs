//! Event streams and the interface-board transformations: ROI crop,
//! coordinate downsampling, and accumulation into per-timestep input tensors.

mod codec;
mod frames;

pub use codec::{decode_csv, decode_stream, encode_csv, encode_stream};
pub use frames::{read_frames, write_frames, FrameSequence, FrameTensor, Shape};

use crate::error::{Error, Result};

/// Sign of the brightness change that produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Polarity {
    Neg,
    Pos,
}

impl Polarity {
    /// Input-tensor channel index: 0 for negative, 1 for positive.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Neg => 0,
            Polarity::Pos => 1,
        }
    }
}

/// One sensor event: pixel coordinates, microsecond timestamp, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

/// A bounded, time-sorted sequence of events with sensor geometry.
///
/// Invariants (checked on construction): every event lies inside
/// `width`×`height`, and timestamps are non-decreasing. Events with equal
/// timestamps keep their original order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("stream geometry must be nonzero".into()));
        }
        let mut last_t = 0u64;
        for (i, ev) in events.iter().enumerate() {
            if ev.x >= width || ev.y >= height {
                return Err(Error::Validation(format!(
                    "event {} at ({}, {}) outside {}x{} geometry",
                    i, ev.x, ev.y, width, height
                )));
            }
            if ev.t < last_t {
                return Err(Error::Validation(format!(
                    "event {} timestamp {} decreases below {}",
                    i, ev.t, last_t
                )));
            }
            last_t = ev.t;
        }
        Ok(Self { width, height, events })
    }

    /// Caller guarantees the invariants hold (outputs of the transforms below).
    fn new_unchecked(width: u16, height: u16, events: Vec<Event>) -> Self {
        Self { width, height, events }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Rectangular region of interest; events outside it are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoiConfig {
    pub x0: u16,
    pub y0: u16,
    pub w: u16,
    pub h: u16,
}

impl RoiConfig {
    pub fn validate(&self, src_width: u16, src_height: u16) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Config("roi extent must be nonzero".into()));
        }
        if u32::from(self.x0) + u32::from(self.w) > u32::from(src_width)
            || u32::from(self.y0) + u32::from(self.h) > u32::from(src_height)
        {
            return Err(Error::Config(format!(
                "roi ({},{})+{}x{} exceeds {}x{} source",
                self.x0, self.y0, self.w, self.h, src_width, src_height
            )));
        }
        Ok(())
    }
}

/// How events are binned into frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumMode {
    /// Per-pixel, per-polarity event count.
    Graded,
    /// 1 if at least one event fell in the window, else 0.
    Binary,
}

/// Parameters for [`accumulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AccumulationConfig {
    /// Timestep duration in microseconds.
    pub window_us: u64,
    pub mode: AccumMode,
    /// Expected stream geometry.
    pub width: u16,
    pub height: u16,
    /// Consecutive timesteps merged into one output frame (summed when
    /// graded, OR-ed when binary).
    pub group: u32,
}

impl AccumulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_us == 0 {
            return Err(Error::Config("accumulation window must be positive".into()));
        }
        if self.group == 0 {
            return Err(Error::Config("group must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("accumulation geometry must be nonzero".into()));
        }
        Ok(())
    }
}

/// Keep events inside `roi`, shifting coordinates so the ROI corner becomes
/// the origin. Output geometry is the ROI extent; event order is preserved.
pub fn crop_roi(s: &EventStream, roi: RoiConfig) -> Result<EventStream> {
    roi.validate(s.width, s.height)?;
    let x_end = roi.x0 + roi.w;
    let y_end = roi.y0 + roi.h;
    let events = s
        .events
        .iter()
        .filter(|ev| ev.x >= roi.x0 && ev.x < x_end && ev.y >= roi.y0 && ev.y < y_end)
        .map(|ev| Event { t: ev.t, x: ev.x - roi.x0, y: ev.y - roi.y0, p: ev.p })
        .collect();
    Ok(EventStream::new_unchecked(roi.w, roi.h, events))
}

/// Floor-divide every event's coordinates by `factor`, keeping the event
/// count unchanged. Output geometry is the ceil-divided source geometry.
pub fn downsample(s: &EventStream, factor: u16) -> Result<EventStream> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(s.clone());
    }
    let width = s.width.div_ceil(factor);
    let height = s.height.div_ceil(factor);
    let events = s
        .events
        .iter()
        .map(|ev| Event { t: ev.t, x: ev.x / factor, y: ev.y / factor, p: ev.p })
        .collect();
    Ok(EventStream::new_unchecked(width, height, events))
}

/// Bin events into per-timestep, per-polarity frames.
///
/// Frame `k` covers `t` in `[k*window_us, (k+1)*window_us)`. Graded mode
/// stores event counts, binary mode stores occupancy. When `group > 1`,
/// every `group` consecutive frames are merged (sum / OR) into one output
/// frame. A tail covering less than one full group of full windows is still
/// emitted and flagged via [`FrameSequence::tail_partial`].
pub fn accumulate(s: &EventStream, cfg: &AccumulationConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    if s.width != cfg.width || s.height != cfg.height {
        return Err(Error::Validation(format!(
            "stream geometry {}x{} does not match accumulation geometry {}x{}",
            s.width, s.height, cfg.width, cfg.height
        )));
    }

    let shape = Shape {
        c: 2,
        h: usize::from(cfg.height),
        w: usize::from(cfg.width),
    };
    if s.events.is_empty() {
        return Ok(FrameSequence {
            frames: Vec::new(),
            shape,
            window_us: cfg.window_us,
            group: cfg.group,
            mode: cfg.mode,
            tail_partial: false,
        });
    }

    let max_t = s.events.last().expect("nonempty").t;
    let n_base = (max_t / cfg.window_us) as usize + 1;
    let group = cfg.group as usize;
    let n_out = n_base.div_ceil(group);

    let mut frames = vec![FrameTensor::zeros(shape); n_out];
    let w = usize::from(cfg.width);
    for ev in &s.events {
        let base = (ev.t / cfg.window_us) as usize;
        let frame = &mut frames[base / group];
        let idx = (ev.p.channel() * shape.h + usize::from(ev.y)) * w + usize::from(ev.x);
        match cfg.mode {
            AccumMode::Graded => frame.values_mut()[idx] += 1.0,
            AccumMode::Binary => frame.values_mut()[idx] = 1.0,
        }
    }

    // Tail is partial if the stream does not cover the last group end-to-end.
    let duration = max_t + 1;
    let tail_partial = duration % cfg.window_us != 0 || n_base % group != 0;
    Ok(FrameSequence {
        frames,
        shape,
        window_us: cfg.window_us,
        group: cfg.group,
        mode: cfg.mode,
        tail_partial,
    })
}
