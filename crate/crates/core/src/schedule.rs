//! Hardware-timestep scheduling and calibrated power estimation.
//!
//! Two processing schemes are modeled: pipelined (one stage advances per
//! hardware timestep; a patched backbone additionally serializes its
//! patches) and fall-through (one input crosses every layer before the next
//! enters). Power is affine: static per core plus dynamic per SynOp/s.

use crate::error::{Error, Result};
use crate::models::ModelGraph;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Pipelined,
    FallThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub scheme: Scheme,
    /// Hardware timestep duration in microseconds.
    pub step_time_us: f64,
    /// Patch count (1 if unpatched).
    pub patches: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_time_us <= 0.0 {
            return Err(Error::Config("step time must be positive".into()));
        }
        if self.patches == 0 {
            return Err(Error::Config("patch count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-core static and per-SynOp dynamic coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub static_mw_per_core: f64,
    pub dynamic_pw_per_synop: f64,
}

impl Default for PowerModel {
    /// Midpoints of the calibrated coefficient bands
    /// (0.75-0.95 mW/core, 8-12 pW per SynOp/s).
    fn default() -> Self {
        Self { static_mw_per_core: 0.85, dynamic_pw_per_synop: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub hardware_steps: usize,
    pub latency_us: f64,
    pub max_throughput_hz: f64,
}

/// Hardware timesteps for one full inference.
///
/// Pipelined with a patched backbone: stages + patches (each patch enters
/// the pipeline serially, the last exits after the full depth). Pipelined
/// unpatched: the pipeline depth itself. Fall-through: one step per
/// synapse-bearing layer.
pub fn hardware_steps(model: &ModelGraph, cfg: &ScheduleConfig) -> Result<usize> {
    cfg.validate()?;
    let model_patches = model.patches_per_step();
    if cfg.patches != model_patches {
        return Err(Error::Config(format!(
            "schedule patch count {} does not match model's {}",
            cfg.patches, model_patches
        )));
    }
    match cfg.scheme {
        Scheme::Pipelined => {
            let stages = model.meta.pipeline_stages;
            Ok(if cfg.patches > 1 { stages + cfg.patches } else { stages })
        }
        Scheme::FallThrough => {
            if model_patches > 1 {
                return Err(Error::Config(
                    "a patched backbone requires pipelined processing".into(),
                ));
            }
            Ok(model.synapse_layer_count())
        }
    }
}

/// Latency and throughput at a given hardware step time. Serialized
/// execution: throughput is the reciprocal of latency.
pub fn timing(steps: usize, step_time_us: f64) -> Result<TimingReport> {
    if steps == 0 {
        return Err(Error::Config("step count must be at least 1".into()));
    }
    if step_time_us <= 0.0 {
        return Err(Error::Config("step time must be positive".into()));
    }
    let latency_us = steps as f64 * step_time_us;
    Ok(TimingReport { hardware_steps: steps, latency_us, max_throughput_hz: 1e6 / latency_us })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub static_mw: f64,
    pub dynamic_mw: f64,
    pub total_mw: f64,
}

/// static = cores * static coefficient; dynamic = SynOps/s * pW coefficient.
pub fn estimate_power(cores: usize, synops_per_s: f64, pm: &PowerModel) -> Result<PowerEstimate> {
    if cores == 0 {
        return Err(Error::Config("core count must be at least 1".into()));
    }
    if synops_per_s < 0.0 {
        return Err(Error::Config("SynOps/s must be non-negative".into()));
    }
    let static_mw = cores as f64 * pm.static_mw_per_core;
    let dynamic_mw = synops_per_s * pm.dynamic_pw_per_synop * 1e-9;
    Ok(PowerEstimate { static_mw, dynamic_mw, total_mw: static_mw + dynamic_mw })
}
