//! Deterministic synthetic labeled event streams.
//!
//! Stands in for recorded footage: a bright blob either drops rapidly
//! through the frame (fall) or moves horizontally with at most a slow
//! vertical drift (no-fall), over a background of uniform noise events.

use crate::error::Result;
use crate::events::{Event, EventStream, Polarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub width: u16,
    pub height: u16,
    pub n_samples: usize,
    /// Fraction of samples labeled fall; the count is rounded, not sampled.
    pub fall_fraction: f64,
    /// Background noise events per second.
    pub noise_rate: f64,
    /// Blob-track events per second.
    pub track_rate: f64,
    pub duration_us: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            n_samples: 100,
            fall_fraction: 0.07,
            noise_rate: 1000.0,
            track_rate: 15_000.0,
            duration_us: 1_200_000,
        }
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStream {
    pub id: String,
    pub stream: EventStream,
    pub label: bool,
}

/// Scripted blob motion for one sample. Exposed so tests can check emitted
/// events against the envelope independently of the generator internals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Idle, then a rapid vertical drop over `fall_dur_us`, then lying.
    Fall { y_start: f64, y_end: f64, t_start_us: u64, fall_dur_us: u64, x0: f64, x_drift: f64 },
    /// Horizontal sweep with slow vertical drift.
    Sweep { x_start: f64, x_end: f64, y0: f64, y_drift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub motion: Motion,
    pub radius: f64,
    pub duration_us: u64,
}

impl Trajectory {
    /// Blob center at time t.
    pub fn center(&self, t_us: u64) -> (f64, f64) {
        let frac = t_us as f64 / self.duration_us as f64;
        match self.motion {
            Motion::Fall { y_start, y_end, t_start_us, fall_dur_us, x0, x_drift } => {
                let y = if t_us < t_start_us {
                    y_start
                } else if t_us < t_start_us + fall_dur_us {
                    let k = (t_us - t_start_us) as f64 / fall_dur_us as f64;
                    y_start + (y_end - y_start) * k * k.sqrt()
                } else {
                    y_end
                };
                (x0 + x_drift * frac, y)
            }
            Motion::Sweep { x_start, x_end, y0, y_drift } => {
                (x_start + (x_end - x_start) * frac, y0 + y_drift * frac)
            }
        }
    }

    /// Instantaneous velocity direction, for polarity assignment.
    fn direction(&self, t_us: u64) -> (f64, f64) {
        let dt = 1000u64;
        let (x0, y0) = self.center(t_us);
        let (x1, y1) = self.center(t_us.saturating_add(dt).min(self.duration_us));
        (x1 - x0, y1 - y0)
    }
}

/// Deterministic trajectory for sample `idx`: the same (seed, params, idx)
/// always scripts the same motion.
pub fn sample_trajectory(seed: u64, params: &SyntheticParams, idx: usize, label: bool) -> Trajectory {
    let mut rng = sample_rng(seed, idx);
    let (w, h) = (f64::from(params.width), f64::from(params.height));
    let radius = (w.min(h) / 8.0).max(2.0);
    // Keep the center at least radius+1 from every edge so pixel rounding
    // never leaves the envelope.
    let margin = radius + 1.0;
    let motion = if label {
        let y_start = rng.gen_range(margin..(0.35 * h).max(margin + 1.0));
        let max_end = h - margin;
        let span = rng.gen_range(0.5 * h..0.75 * h).min(max_end - y_start);
        let fall_dur_us = range_u64(&mut rng, 300_000, 500_000).min(params.duration_us / 2);
        let t_start_us = range_u64(&mut rng, 0, params.duration_us.saturating_sub(2 * fall_dur_us).max(1));
        Motion::Fall {
            y_start,
            y_end: y_start + span,
            t_start_us,
            fall_dur_us,
            x0: rng.gen_range(margin..w - margin),
            x_drift: rng.gen_range(-2.0..2.0),
        }
    } else {
        let y0 = rng.gen_range(margin..h - margin);
        let max_drift = (0.1 * h).min(h - margin - y0).min(y0 - margin);
        Motion::Sweep {
            x_start: rng.gen_range(margin..w - margin),
            x_end: rng.gen_range(margin..w - margin),
            y0,
            y_drift: rng.gen_range(-max_drift..max_drift.max(1e-9)),
        }
    };
    Trajectory { motion, radius, duration_us: params.duration_us }
}

fn sample_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(idx as u64))
}

/// gen_range that tolerates empty ranges by returning the lower bound.
fn range_u64(rng: &mut ChaCha8Rng, lo: u64, hi: u64) -> u64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generate `n_samples` labeled streams. Byte-identical for identical
/// (seed, params); exactly round(n * fall_fraction) samples are falls.
pub fn gen_synthetic(seed: u64, params: &SyntheticParams) -> Result<Vec<LabeledStream>> {
    let n_falls = (params.n_samples as f64 * params.fall_fraction).round() as usize;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![false; params.n_samples];
    // Deterministic label placement: shuffle indices with the master rng.
    let mut order: Vec<usize> = (0..params.n_samples).collect();
    for i in (1..order.len()).rev() {
        let j = master.gen_range(0..=i);
        order.swap(i, j);
    }
    for idx in order.into_iter().take(n_falls) {
        labels[idx] = true;
    }

    let mut out = Vec::with_capacity(params.n_samples);
    for (idx, label) in labels.iter().enumerate() {
        let traj = sample_trajectory(seed, params, idx, *label);
        let mut rng = sample_rng(seed, idx);
        // Burn the draws the trajectory consumed so event noise is
        // decoupled from motion scripting.
        let mut rng2 = ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ 0xabcd_ef01);

        let duration_s = params.duration_us as f64 * 1e-6;
        let n_track = (params.track_rate * duration_s).round() as usize;
        let n_noise = (params.noise_rate * duration_s).round() as usize;
        let mut events = Vec::with_capacity(n_track + n_noise);

        for _ in 0..n_track {
            let t = range_u64(&mut rng2, 0, params.duration_us);
            let (cx, cy) = traj.center(t);
            let angle = rng2.gen_range(0.0..std::f64::consts::TAU);
            let dist = traj.radius * rng2.gen_range(0.0f64..1.0).sqrt();
            let (dx, dy) = (dist * angle.cos(), dist * angle.sin());
            let x = (cx + dx).round().clamp(0.0, f64::from(params.width - 1)) as u16;
            let y = (cy + dy).round().clamp(0.0, f64::from(params.height - 1)) as u16;
            let (vx, vy) = traj.direction(t);
            let speed = vx.hypot(vy);
            let p = if speed > 1e-9 {
                if dx * vx + dy * vy >= 0.0 { Polarity::Pos } else { Polarity::Neg }
            } else if rng2.gen_bool(0.5) {
                Polarity::Pos
            } else {
                Polarity::Neg
            };
            events.push(Event { t, x, y, p });
        }
        for _ in 0..n_noise {
            events.push(Event {
                t: range_u64(&mut rng2, 0, params.duration_us),
                x: Rng::gen_range(&mut rng2, 0..params.width),
                y: Rng::gen_range(&mut rng2, 0..params.height),
                p: if rng2.gen_bool(0.5) { Polarity::Pos } else { Polarity::Neg },
            });
        }

        events.sort_by_key(|e| e.t);
        let stream = EventStream::new(params.width, params.height, events)?;
        out.push(LabeledStream { id: format!("sample_{idx:04}"), stream, label: *label });
    }
    Ok(out)
}
