//! Detection decisions, metrics, focal loss, SynOps sparsity, and the
//! benchmark runner.

mod synthetic;

pub use synthetic::{gen_synthetic, sample_trajectory, LabeledStream, Motion, SyntheticParams, Trajectory};

use crate::error::{Error, Result};
use crate::events::{accumulate, AccumMode, AccumulationConfig, FrameTensor};
use crate::layers::{dense_synops, SynOpsLedger};
use crate::models::{DecisionMode, InferenceSession, ModelGraph};
use crate::schedule::{estimate_power, timing, PowerEstimate, PowerModel, TimingReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Output channel assignment: index 0 is NoFall, index 1 is Fall.
pub const NOFALL: usize = 0;
pub const FALL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionClass {
    NoFall,
    Fall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub class: DetectionClass,
    /// Estimated fall probability.
    pub p: f64,
}

/// Collapse per-step outputs of one sample into a class decision.
///
/// spike_count: p = S_fall / (S_fall + S_nofall) over per-class spike-value
/// sums (0/0 gives 0.5). max_logit_diff: p is the logistic of the maximum
/// fall-minus-nofall logit over the sample. The class is Fall only when
/// p exceeds the threshold strictly, so an exact tie resolves to NoFall.
pub fn decide(outputs: &[[f64; 2]], mode: DecisionMode, threshold: f64) -> Result<Decision> {
    if outputs.is_empty() {
        return Err(Error::Validation("decision requires at least one step of outputs".into()));
    }
    let p = match mode {
        DecisionMode::SpikeCount => {
            let s_fall: f64 = outputs.iter().map(|o| o[FALL]).sum::<f64>().max(0.0);
            let s_nofall: f64 = outputs.iter().map(|o| o[NOFALL]).sum::<f64>().max(0.0);
            if s_fall + s_nofall == 0.0 {
                0.5
            } else {
                s_fall / (s_fall + s_nofall)
            }
        }
        DecisionMode::MaxLogitDiff => {
            let max_diff = outputs
                .iter()
                .map(|o| o[FALL] - o[NOFALL])
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 / (1.0 + (-max_diff).exp())
        }
    };
    let class = if p > threshold { DetectionClass::Fall } else { DetectionClass::NoFall };
    Ok(Decision { class, p })
}

// ── Focal loss ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    /// Class-balancing factor in [0, 1].
    pub alpha: f64,
    /// Focusing exponent, >= 0.
    pub gamma: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self { alpha: 0.9, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPrediction {
    /// Estimated fall probability in [0, 1].
    pub p: f64,
    /// Ground truth: true for fall.
    pub y: bool,
}

pub const FOCAL_EPS: f64 = 1e-7;

/// Focal loss with natural log; p is clamped away from {0, 1} by 1e-7.
pub fn focal_loss(pred: &LabeledPrediction, params: &FocalLossParams) -> f64 {
    let p = pred.p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if pred.y {
        -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
    } else {
        -(1.0 - params.alpha) * p.powf(params.gamma) * (1.0 - p).ln()
    }
}

// ── Detection metrics ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted_fall: bool, actual_fall: bool) {
        match (predicted_fall, actual_fall) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// F1 = 2PR / (P + R), defined as 0 when P + R = 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Validation("metrics need at least one sample".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1: f1_from(precision, recall),
    })
}

// ── SynOps sparsity ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub cost_synops_per_s: f64,
    pub dense_synops_per_s: f64,
    /// Dense-over-actual gain; infinity when nothing was executed.
    pub sparsity: f64,
}

/// Executed-SynOps rate and the gain over iso-topology dense processing.
pub fn sparsity(
    ledger: &SynOpsLedger,
    model: &ModelGraph,
    timesteps: u64,
    step_us: u64,
) -> Result<SparsityReport> {
    if timesteps == 0 || step_us == 0 {
        return Err(Error::Validation("sparsity needs timesteps and a step duration".into()));
    }
    let elapsed_s = timesteps as f64 * step_us as f64 * 1e-6;
    let cost = ledger.total_synops() as f64 / elapsed_s;
    let dense = (model.dense_synops_per_step() * timesteps) as f64 / elapsed_s;
    let sparsity = if cost == 0.0 { f64::INFINITY } else { dense / cost };
    Ok(SparsityReport { cost_synops_per_s: cost, dense_synops_per_s: dense, sparsity })
}

// ── Benchmark runner ─────────────────────────────────────────────────────────

/// Anything that can be driven frame by frame and report its cumulative
/// synaptic operations.
pub trait Backend {
    fn reset(&mut self);
    fn step(&mut self, frame: &FrameTensor) -> Result<[f64; 2]>;
    fn total_synops(&self) -> u64;
    /// Per-layer ledger, when the backend has one.
    fn ledger(&self) -> Option<&SynOpsLedger> {
        None
    }
}

impl Backend for InferenceSession {
    fn reset(&mut self) {
        InferenceSession::reset(self);
    }

    fn step(&mut self, frame: &FrameTensor) -> Result<[f64; 2]> {
        self.infer_step(frame)
    }

    fn total_synops(&self) -> u64 {
        self.ledger().total_synops()
    }

    fn ledger(&self) -> Option<&SynOpsLedger> {
        Some(InferenceSession::ledger(self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub cores: usize,
    pub model: PowerModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub window_us: u64,
    pub mode: AccumMode,
    /// Input-frame grouping passed to accumulate.
    pub group: u32,
    pub decision: DecisionMode,
    pub threshold: f64,
    /// Predictions per second reported for context: one prediction per
    /// `decision_group` timesteps.
    pub decision_group: u32,
    pub power: Option<PowerConfig>,
    /// (hardware steps, step time in us) for an optional timing section.
    pub timing_steps: Option<(usize, f64)>,
}

impl BenchConfig {
    /// Defaults drawn from the model metadata: its timestep, input coding,
    /// and decision mode, with ungrouped input frames.
    pub fn for_model(model: &ModelGraph) -> Self {
        Self {
            window_us: model.meta.timestep_us,
            mode: if model.meta.binary_input { AccumMode::Binary } else { AccumMode::Graded },
            group: 1,
            decision: model.meta.decision_mode,
            threshold: 0.5,
            decision_group: model.meta.decision_group,
            power: None,
            timing_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub label: bool,
    pub class: DetectionClass,
    pub p: f64,
    pub synops: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub synops: u64,
    pub neuron_updates: u64,
    pub evaluations: u64,
    pub dense_synops_per_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub model: String,
    pub samples: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub confusion: ConfusionCounts,
    pub metrics: Metrics,
    pub total_synops: u64,
    pub total_neuron_updates: u64,
    pub elapsed_sensor_s: f64,
    pub cost_synops_per_s: f64,
    pub dense_synops_per_s: f64,
    pub sparsity: f64,
    pub predictions_per_s: f64,
    pub per_layer: Vec<LayerReport>,
    pub per_sample: Vec<SampleResult>,
    pub timing: Option<TimingReport>,
    pub power: Option<PowerEstimate>,
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;

impl BenchReport {
    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model: {}\n", self.model));
        s.push_str(&format!(
            "samples: {} (failures: {})\n",
            self.samples, self.failures
        ));
        s.push_str(&format!(
            "accuracy {:6.3}  precision {:6.3}  recall {:6.3}  f1 {:6.3}\n",
            self.metrics.accuracy, self.metrics.precision, self.metrics.recall, self.metrics.f1
        ));
        s.push_str(&format!(
            "cost {:10.3} M SynOps/s   sparsity {:8.2}x   predictions {:6.2}/s\n",
            self.cost_synops_per_s / 1e6,
            self.sparsity,
            self.predictions_per_s
        ));
        s.push_str(&format!(
            "{:<16} {:>14} {:>14} {:>10} {:>16}\n",
            "layer", "synops", "updates", "evals", "dense/step"
        ));
        for l in &self.per_layer {
            s.push_str(&format!(
                "{:<16} {:>14} {:>14} {:>10} {:>16}\n",
                l.name, l.synops, l.neuron_updates, l.evaluations, l.dense_synops_per_step
            ));
        }
        if let Some(t) = &self.timing {
            s.push_str(&format!(
                "timing: {} hardware steps, latency {:.3} ms, max throughput {:.2} Hz\n",
                t.hardware_steps,
                t.latency_us / 1000.0,
                t.max_throughput_hz
            ));
        }
        if let Some(p) = &self.power {
            s.push_str(&format!(
                "power: static {:.1} mW + dynamic {:.2} mW = {:.1} mW\n",
                p.static_mw, p.dynamic_mw, p.total_mw
            ));
        }
        s
    }
}

/// Stream every sample through accumulate, the backend, and decide;
/// aggregate confusion counts and SynOps. Samples run in parallel with a
/// deterministic ordered reduction, so results are invariant to evaluation
/// order and thread count. Per-sample failures are recorded and skipped.
pub fn run_benchmark_with<B, F>(
    factory: F,
    dataset: &[LabeledStream],
    cfg: &BenchConfig,
    model: Option<&ModelGraph>,
) -> Result<BenchReport>
where
    B: Backend,
    F: Fn() -> Result<B> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::Validation("benchmark dataset is empty".into()));
    }

    struct PerSample {
        result: std::result::Result<(SampleResult, Option<SynOpsLedger>, u64), String>,
    }

    let step_us = cfg.window_us * u64::from(cfg.group);
    let outcomes: Vec<PerSample> = dataset
        .par_iter()
        .map(|sample| {
            let run = || -> Result<(SampleResult, Option<SynOpsLedger>, u64)> {
                let acc = AccumulationConfig {
                    window_us: cfg.window_us,
                    mode: cfg.mode,
                    width: sample.stream.width(),
                    height: sample.stream.height(),
                    group: cfg.group,
                };
                let seq = accumulate(&sample.stream, &acc)?;
                if seq.frames.is_empty() {
                    return Err(Error::Validation(format!(
                        "sample {} produced no frames",
                        sample.id
                    )));
                }
                let mut backend = factory()?;
                backend.reset();
                let mut outputs = Vec::with_capacity(seq.frames.len());
                for frame in &seq.frames {
                    outputs.push(backend.step(frame)?);
                }
                let decision = decide(&outputs, cfg.decision, cfg.threshold)?;
                let result = SampleResult {
                    id: sample.id.clone(),
                    label: sample.label,
                    class: decision.class,
                    p: decision.p,
                    synops: backend.total_synops(),
                    steps: seq.frames.len() as u64,
                };
                Ok((result, backend.ledger().cloned(), seq.frames.len() as u64))
            };
            PerSample { result: run().map_err(|e| format!("{}: {e}", sample.id)) }
        })
        .collect();

    let mut confusion = ConfusionCounts::default();
    let mut per_sample = Vec::new();
    let mut failure_messages = Vec::new();
    let mut merged_ledger = model.map(|m| SynOpsLedger::new(m.layers.len()));
    let mut total_synops = 0u64;
    let mut total_steps = 0u64;
    for outcome in outcomes {
        match outcome.result {
            Ok((result, ledger, steps)) => {
                confusion.record(result.class == DetectionClass::Fall, result.label);
                total_synops += result.synops;
                total_steps += steps;
                if let (Some(merged), Some(l)) = (&mut merged_ledger, &ledger) {
                    merged.merge(l);
                }
                per_sample.push(result);
            }
            Err(msg) => failure_messages.push(msg),
        }
    }
    if per_sample.is_empty() {
        return Err(Error::Validation("every benchmark sample failed".into()));
    }

    let elapsed_sensor_s = total_steps as f64 * step_us as f64 * 1e-6;
    let cost = total_synops as f64 / elapsed_sensor_s;
    let (dense_rate, sparsity_factor) = match model {
        Some(m) => {
            let dense = (m.dense_synops_per_step() * total_steps) as f64 / elapsed_sensor_s;
            (dense, if cost == 0.0 { f64::INFINITY } else { dense / cost })
        }
        None => (0.0, f64::NAN),
    };

    let per_layer = match (model, &merged_ledger) {
        (Some(m), Some(ledger)) => m
            .layers
            .iter()
            .zip(&ledger.layers)
            .map(|(spec, c)| LayerReport {
                name: spec.name.clone(),
                synops: c.synops,
                neuron_updates: c.neuron_updates,
                evaluations: c.evaluations,
                dense_synops_per_step: dense_synops(spec),
            })
            .collect(),
        _ => Vec::new(),
    };

    let timing_section = match cfg.timing_steps {
        Some((steps, step_time)) => Some(timing(steps, step_time)?),
        None => None,
    };
    let power_section = match &cfg.power {
        Some(p) => Some(estimate_power(p.cores, cost, &p.model)?),
        None => None,
    };

    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        model: model.map(|m| m.meta.name.clone()).unwrap_or_else(|| "custom-backend".into()),
        samples: dataset.len(),
        failures: failure_messages.len(),
        failure_messages,
        confusion,
        metrics: metrics(&confusion)?,
        total_synops,
        total_neuron_updates: merged_ledger.as_ref().map_or(0, |l| l.total_neuron_updates()),
        elapsed_sensor_s,
        cost_synops_per_s: cost,
        dense_synops_per_s: dense_rate,
        sparsity: sparsity_factor,
        predictions_per_s: 1e6 / (step_us as f64 * f64::from(cfg.decision_group)),
        per_layer,
        per_sample,
        timing: timing_section,
        power: power_section,
    })
}

/// Benchmark a model graph with one fresh session per sample.
pub fn run_benchmark(
    model: &ModelGraph,
    dataset: &[LabeledStream],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let graph = Arc::new(model.clone());
    run_benchmark_with(
        || InferenceSession::new(graph.clone()),
        dataset,
        cfg,
        Some(model),
    )
}
