//! Desk-scale supervised training: BPTT with surrogate gradients for
//! spiking models, standard backpropagation for ReLU/S4D paths, focal loss
//! on the sample decision, and quantization-aware forward passes.

mod backprop;

pub use backprop::{EffLayer, GradLayer};

use crate::bench::{focal_loss, FocalLossParams, LabeledPrediction};
use crate::error::{Error, Result};
use crate::events::FrameTensor;
use crate::layers::{quantize_bias, quantize_weights};
use crate::models::{DecisionMode, ModelGraph};
use crate::neurons::NeuronConfig;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ── Surrogate gradients ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    FastSigmoidDerivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Sharpness of the derivative peak around the threshold.
    pub slope: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { kind: SurrogateKind::FastSigmoidDerivative, slope: 1.0 }
    }
}

/// Binary-spike surrogate: 1 / (1 + s|u - theta|)^2, peaking at 1 on the
/// threshold.
pub fn surrogate_binary(u: f64, theta: f64, spec: &SurrogateSpec) -> f64 {
    let SurrogateKind::FastSigmoidDerivative = spec.kind;
    let d = 1.0 + spec.slope * (u - theta).abs();
    1.0 / (d * d)
}

/// Graded-spike surrogate: pass-through above threshold plus the
/// threshold-crossing term, H(u - theta) + u * g(u).
pub fn surrogate_graded(u: f64, theta: f64, spec: &SurrogateSpec) -> f64 {
    let h = if u - theta >= 0.0 { 1.0 } else { 0.0 };
    h + u * surrogate_binary(u, theta, spec)
}

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate (weights, biases, thresholds).
    pub lr: f64,
    /// Learning rate for S4D neuron parameters.
    pub lr_s4d: f64,
    pub surrogate: SurrogateSpec,
    pub qat: bool,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip_norm: f64,
    pub learn_thresholds: bool,
    pub focal: FocalLossParams,
    /// Temperature of the training-side probability for spike-count
    /// decisions, p = logistic((S_fall - S_nofall) / (temp * steps)). This
    /// shares the inference rule's decision boundary (S_fall > S_nofall)
    /// but keeps a useful gradient scale as spike sums grow; the
    /// inference-side decide() is untouched.
    pub margin_temp: f64,
    /// Build every batch with a quarter of minority-class samples (drawn
    /// round-robin) instead of plain shuffling. Useful under heavy class
    /// imbalance, where most shuffled batches carry no positives at all.
    pub balance_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-5,
            lr_s4d: 5e-6,
            surrogate: SurrogateSpec::default(),
            qat: true,
            seed: 0,
            grad_clip_norm: 1.0,
            learn_thresholds: true,
            focal: FocalLossParams::default(),
            margin_temp: 0.5,
            balance_batches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub frames: Vec<FrameTensor>,
    pub label: bool,
}

// ── Loss on the sample decision ──────────────────────────────────────────────

/// d(focal)/dp at clamped p.
fn focal_grad(p: f64, y: bool, params: &FocalLossParams) -> f64 {
    let p = p.clamp(crate::bench::FOCAL_EPS, 1.0 - crate::bench::FOCAL_EPS);
    let (alpha, gamma) = (params.alpha, params.gamma);
    if y {
        alpha * (gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p)
    } else {
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

/// Loss and dL/d(output) per step for one sample's output sequence.
fn decision_loss(
    outputs: &[Vec<f64>],
    label: bool,
    mode: DecisionMode,
    focal: &FocalLossParams,
    margin_temp: f64,
) -> (f64, Vec<Vec<f64>>) {
    let steps = outputs.len();
    let mut d_out = vec![vec![0.0; 2]; steps];
    let (p, fills): (f64, Box<dyn Fn(&mut Vec<Vec<f64>>, f64)>) = match mode {
        DecisionMode::SpikeCount => {
            let s_fall: f64 = outputs.iter().map(|o| o[crate::bench::FALL]).sum();
            let s_nofall: f64 = outputs.iter().map(|o| o[crate::bench::NOFALL]).sum();
            let scale = 1.0 / (margin_temp * steps as f64);
            let p = 1.0 / (1.0 + (-(s_fall - s_nofall) * scale).exp());
            let dp = p * (1.0 - p) * scale;
            (
                p,
                Box::new(move |d: &mut Vec<Vec<f64>>, dl_dp: f64| {
                    for row in d.iter_mut() {
                        row[crate::bench::FALL] = dl_dp * dp;
                        row[crate::bench::NOFALL] = -dl_dp * dp;
                    }
                }),
            )
        }
        DecisionMode::MaxLogitDiff => {
            let mut best_t = 0;
            let mut best = f64::NEG_INFINITY;
            for (t, o) in outputs.iter().enumerate() {
                let diff = o[crate::bench::FALL] - o[crate::bench::NOFALL];
                if diff > best {
                    best = diff;
                    best_t = t;
                }
            }
            let p = 1.0 / (1.0 + (-best).exp());
            let dsig = p * (1.0 - p);
            (
                p,
                Box::new(move |d: &mut Vec<Vec<f64>>, dl_dp: f64| {
                    d[best_t][crate::bench::FALL] = dl_dp * dsig;
                    d[best_t][crate::bench::NOFALL] = -dl_dp * dsig;
                }),
            )
        }
    };
    let loss = focal_loss(&LabeledPrediction { p, y: label }, focal);
    fills(&mut d_out, focal_grad(p, label, focal));
    (loss, d_out)
}

// ── Trainer ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weights,
    Bias,
    Theta,
    S4dA,
    S4dB,
    S4dC,
}

#[derive(Debug, Clone)]
struct TensorDesc {
    layer: usize,
    kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Holds full-precision master parameters for a model graph and applies
/// surrogate-gradient BPTT updates. The graph itself is the structural
/// template; export re-quantizes the masters into a deployable graph.
pub struct Trainer {
    graph: ModelGraph,
    pub cfg: TrainConfig,
    registry: Vec<TensorDesc>,
    masters: Vec<Vec<f64>>,
    adam: AdamState,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(graph: ModelGraph, cfg: TrainConfig) -> Result<Self> {
        graph.validate()?;
        if graph.meta.patch.is_some() {
            return Err(Error::Config("training runs unpatched models only".into()));
        }
        let mut registry = Vec::new();
        let mut masters: Vec<Vec<f64>> = Vec::new();
        for (l, spec) in graph.layers.iter().enumerate() {
            if let Some(w) = &spec.weights {
                registry.push(TensorDesc { layer: l, kind: ParamKind::Weights });
                masters.push(w.dequantized());
                registry.push(TensorDesc { layer: l, kind: ParamKind::Bias });
                let scale = f64::from(w.scale);
                masters.push(match &w.bias {
                    Some(b) => b.iter().map(|q| f64::from(*q) * scale).collect(),
                    None => vec![0.0; spec.out_shape.c],
                });
            }
            match &spec.neuron {
                NeuronConfig::Lif(p) => {
                    registry.push(TensorDesc { layer: l, kind: ParamKind::Theta });
                    masters.push(vec![p.theta]);
                }
                NeuronConfig::SigmaDelta(p) => {
                    registry.push(TensorDesc { layer: l, kind: ParamKind::Theta });
                    masters.push(vec![p.theta]);
                }
                NeuronConfig::S4d(p) => {
                    registry.push(TensorDesc { layer: l, kind: ParamKind::S4dA });
                    masters.push(p.a.clone());
                    registry.push(TensorDesc { layer: l, kind: ParamKind::S4dB });
                    masters.push(p.b.clone());
                    registry.push(TensorDesc { layer: l, kind: ParamKind::S4dC });
                    masters.push(p.c.clone());
                }
                _ => {}
            }
        }
        let adam = AdamState {
            t: 0,
            m: masters.iter().map(|m| vec![0.0; m.len()]).collect(),
            v: masters.iter().map(|m| vec![0.0; m.len()]).collect(),
        };
        Ok(Self { graph, cfg, registry, masters, adam })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Effective per-layer parameters: fake-quantized when QAT is on.
    fn effective(&self) -> Vec<EffLayer> {
        let mut eff: Vec<EffLayer> = self.graph.layers.iter().map(|_| EffLayer::default()).collect();
        for (desc, master) in self.registry.iter().zip(&self.masters) {
            let slot = &mut eff[desc.layer];
            match desc.kind {
                ParamKind::Weights => {
                    slot.w = if self.cfg.qat {
                        quantize_weights(master).dequantized()
                    } else {
                        master.clone()
                    };
                }
                ParamKind::Bias => {
                    slot.b = if self.cfg.qat {
                        // Bias shares the weight scale, so quantize against it.
                        let w_master = self
                            .registry
                            .iter()
                            .zip(&self.masters)
                            .find(|(d, _)| d.layer == desc.layer && d.kind == ParamKind::Weights)
                            .map(|(_, m)| m)
                            .expect("bias implies weights");
                        let scale = quantize_weights(w_master).scale;
                        quantize_bias(master, scale)
                            .iter()
                            .map(|q| f64::from(*q) * f64::from(scale))
                            .collect()
                    } else {
                        master.clone()
                    };
                }
                ParamKind::Theta => slot.theta = Some(master[0]),
                ParamKind::S4dA | ParamKind::S4dB | ParamKind::S4dC => {
                    let d_state = match &self.graph.layers[desc.layer].neuron {
                        NeuronConfig::S4d(p) => p.d_state,
                        _ => unreachable!("s4d params on non-s4d layer"),
                    };
                    let entry = slot.s4d.get_or_insert_with(|| {
                        (Vec::new(), Vec::new(), Vec::new(), d_state)
                    });
                    match desc.kind {
                        ParamKind::S4dA => entry.0 = master.clone(),
                        ParamKind::S4dB => entry.1 = master.clone(),
                        _ => entry.2 = master.clone(),
                    }
                }
            }
        }
        eff
    }

    /// Forward a sample with the current effective parameters: per-step
    /// outputs and the decision loss.
    pub fn evaluate(&self, sample: &TrainSample) -> Result<(Vec<[f64; 2]>, f64)> {
        let eff = self.effective();
        let tape = backprop::forward(&self.graph, &eff, &sample.frames, &self.cfg.surrogate)?;
        let outputs: Vec<Vec<f64>> = tape.outputs().to_vec();
        let (loss, _) = decision_loss(
            &outputs,
            sample.label,
            self.graph.meta.decision_mode,
            &self.cfg.focal,
            self.cfg.margin_temp,
        );
        Ok((outputs.iter().map(|o| [o[0], o[1]]).collect(), loss))
    }

    fn sample_grads(&self, eff: &[EffLayer], sample: &TrainSample) -> Result<(f64, Vec<GradLayer>)> {
        let tape = backprop::forward(&self.graph, eff, &sample.frames, &self.cfg.surrogate)?;
        let outputs: Vec<Vec<f64>> = tape.outputs().to_vec();
        let (loss, d_out) = decision_loss(
            &outputs,
            sample.label,
            self.graph.meta.decision_mode,
            &self.cfg.focal,
            self.cfg.margin_temp,
        );
        let grads =
            backprop::backward(&self.graph, eff, &sample.frames, &tape, d_out, &self.cfg.surrogate)?;
        Ok((loss, grads))
    }

    /// Gradients for a caller-supplied dL/d(output) sequence, bypassing the
    /// decision loss. Used by gradient-check harnesses.
    pub fn grads_with_output_grads(
        &self,
        frames: &[FrameTensor],
        d_out: Vec<Vec<f64>>,
    ) -> Result<Vec<GradLayer>> {
        let eff = self.effective();
        let tape = backprop::forward(&self.graph, &eff, frames, &self.cfg.surrogate)?;
        backprop::backward(&self.graph, &eff, frames, &tape, d_out, &self.cfg.surrogate)
    }

    /// One optimizer update over a batch. Returns the mean loss.
    ///
    /// Per-sample gradients are computed in parallel and reduced in sample
    /// order, so the result is deterministic for any thread count.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let eff = self.effective();
        let results: Vec<Result<(f64, Vec<GradLayer>)>> =
            batch.par_iter().map(|s| self.sample_grads(&eff, s)).collect();

        let mut total_loss = 0.0;
        let mut grads: Vec<Vec<f64>> = self.masters.iter().map(|m| vec![0.0; m.len()]).collect();
        for result in results {
            let (loss, sample_grads) = result?;
            total_loss += loss;
            for (slot, desc) in self.registry.iter().enumerate() {
                let g = &sample_grads[desc.layer];
                let src: &[f64] = match desc.kind {
                    ParamKind::Weights => &g.w,
                    ParamKind::Bias => &g.b,
                    ParamKind::Theta => std::slice::from_ref(&g.theta),
                    ParamKind::S4dA => &g.s4d_a,
                    ParamKind::S4dB => &g.s4d_b,
                    ParamKind::S4dC => &g.s4d_c,
                };
                for (acc, v) in grads[slot].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mean_loss = total_loss / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {mean_loss} at optimizer step {}",
                self.adam.t + 1
            )));
        }
        let inv = 1.0 / batch.len() as f64;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= inv;
        }

        // Global norm clip.
        let norm: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.cfg.grad_clip_norm && norm > 0.0 {
            let scale = self.cfg.grad_clip_norm / norm;
            for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *g *= scale;
            }
        }

        self.adam.t += 1;
        let t = self.adam.t as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (slot, desc) in self.registry.iter().enumerate() {
            if desc.kind == ParamKind::Theta && !self.cfg.learn_thresholds {
                continue;
            }
            let lr = match desc.kind {
                ParamKind::S4dA | ParamKind::S4dB | ParamKind::S4dC => self.cfg.lr_s4d,
                _ => self.cfg.lr,
            };
            let (m, v) = (&mut self.adam.m[slot], &mut self.adam.v[slot]);
            let master = &mut self.masters[slot];
            for i in 0..master.len() {
                let g = grads[slot][i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                master[i] -= update;
            }
            match desc.kind {
                // Keep the reset convention valid and the dynamics stable.
                ParamKind::Theta => {
                    let floor = match &self.graph.layers[desc.layer].neuron {
                        NeuronConfig::Lif(_) => 1.0,
                        _ => 0.0,
                    };
                    master[0] = master[0].max(floor);
                }
                ParamKind::S4dA => {
                    for a in master.iter_mut() {
                        *a = a.clamp(-0.9995, 0.9995);
                    }
                }
                _ => {}
            }
        }
        Ok(mean_loss)
    }

    /// Shuffle, batch, and run one epoch. Returns the mean loss over batches.
    ///
    /// With `balance_batches` set, batches take three quarters of their
    /// samples from the majority class and cycle the minority class through
    /// the rest.
    pub fn train_epoch(&mut self, data: &[TrainSample], epoch: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(epoch as u64));
        let batch_size = self.cfg.batch_size.max(1);
        let mut losses = Vec::new();

        let positives = data.iter().filter(|s| s.label).count();
        let balanced = self.cfg.balance_batches && positives > 0 && positives < data.len();
        if balanced {
            let minority_label = positives * 2 <= data.len();
            let mut majority: Vec<usize> =
                (0..data.len()).filter(|i| data[*i].label != minority_label).collect();
            let mut minority: Vec<usize> =
                (0..data.len()).filter(|i| data[*i].label == minority_label).collect();
            majority.shuffle(&mut rng);
            minority.shuffle(&mut rng);
            let k = (batch_size / 4).max(1).min(batch_size.saturating_sub(1).max(1));
            let mut cursor = 0usize;
            for chunk in majority.chunks((batch_size - k).max(1)) {
                let mut batch: Vec<TrainSample> =
                    chunk.iter().map(|i| data[*i].clone()).collect();
                for _ in 0..k {
                    batch.push(data[minority[cursor % minority.len()]].clone());
                    cursor += 1;
                }
                losses.push(self.train_step(&batch)?);
            }
        } else {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<TrainSample> = chunk.iter().map(|i| data[*i].clone()).collect();
                losses.push(self.train_step(&batch)?);
            }
        }
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Quantize the masters back into a deployable graph (weights and
    /// biases to 8 bits on a shared scale, learned thresholds and S4D
    /// parameters written into the neuron configs).
    pub fn export(&self) -> ModelGraph {
        let mut graph = self.graph.clone();
        for (desc, master) in self.registry.iter().zip(&self.masters) {
            let spec = &mut graph.layers[desc.layer];
            match desc.kind {
                ParamKind::Weights => {
                    let bias = spec.weights.as_ref().and_then(|w| w.bias.clone());
                    let mut q = quantize_weights(master);
                    q.bias = bias;
                    spec.weights = Some(q);
                }
                ParamKind::Bias => {
                    let w = spec.weights.as_mut().expect("bias implies weights");
                    w.bias = Some(quantize_bias(master, w.scale));
                }
                ParamKind::Theta => match &mut spec.neuron {
                    NeuronConfig::Lif(p) => p.theta = master[0],
                    NeuronConfig::SigmaDelta(p) => p.theta = master[0],
                    _ => unreachable!("theta on non-spiking layer"),
                },
                ParamKind::S4dA | ParamKind::S4dB | ParamKind::S4dC => {
                    if let NeuronConfig::S4d(p) = &mut spec.neuron {
                        match desc.kind {
                            ParamKind::S4dA => p.a = master.clone(),
                            ParamKind::S4dB => p.b = master.clone(),
                            _ => p.c = master.clone(),
                        }
                    }
                }
            }
        }
        graph
    }

    // Internal parameter access for the finite-difference harness.
    fn flat_len(&self) -> usize {
        self.masters.iter().map(Vec::len).sum()
    }

    fn get_flat(&self, idx: usize) -> f64 {
        let mut i = idx;
        for m in &self.masters {
            if i < m.len() {
                return m[i];
            }
            i -= m.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, idx: usize, v: f64) {
        let mut i = idx;
        for m in &mut self.masters {
            if i < m.len() {
                m[i] = v;
                return;
            }
            i -= m.len();
        }
        panic!("flat index out of range");
    }

    fn grad_flat(&self, grads: &[GradLayer]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for desc in &self.registry {
            let g = &grads[desc.layer];
            match desc.kind {
                ParamKind::Weights => out.extend_from_slice(&g.w),
                ParamKind::Bias => out.extend_from_slice(&g.b),
                ParamKind::Theta => out.push(g.theta),
                ParamKind::S4dA => out.extend_from_slice(&g.s4d_a),
                ParamKind::S4dB => out.extend_from_slice(&g.s4d_b),
                ParamKind::S4dC => out.extend_from_slice(&g.s4d_c),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences of the
/// decision loss on up to `max_checks` randomly chosen parameters.
///
/// Meaningful as an exactness check only for truly differentiable paths
/// (ReLU away from kinks, S4D, linear layers) with QAT off; on spiking
/// paths the surrogate is expected to deviate and the report is
/// informational.
pub fn finite_diff_check(
    trainer: &mut Trainer,
    sample: &TrainSample,
    epsilon: f64,
    max_checks: usize,
    seed: u64,
) -> Result<FdReport> {
    if trainer.cfg.qat {
        return Err(Error::Config("finite differences require qat = false".into()));
    }
    let eff = trainer.effective();
    let (_, grads) = trainer.sample_grads(&eff, sample)?;
    let analytic = trainer.grad_flat(&grads);

    let n = trainer.flat_len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(max_checks.min(n));

    let mut max_rel = 0.0f64;
    for idx in &indices {
        let orig = trainer.get_flat(*idx);
        trainer.set_flat(*idx, orig + epsilon);
        let (_, loss_plus) = trainer.evaluate(sample)?;
        trainer.set_flat(*idx, orig - epsilon);
        let (_, loss_minus) = trainer.evaluate(sample)?;
        trainer.set_flat(*idx, orig);
        let fd = (loss_plus - loss_minus) / (2.0 * epsilon);
        let a = analytic[*idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(FdReport { max_rel_err: max_rel, checked: indices.len() })
}

// ── Optimizer-state sidecar ──────────────────────────────────────────────────

const OPT_MAGIC: &[u8; 4] = b"EVSO";
const OPT_VERSION: u16 = 1;

/// Serialize Adam state (step count and both moment vectors).
pub fn save_optimizer(trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&OPT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&trainer.adam.t.to_le_bytes());
    out.extend_from_slice(&(trainer.masters.len() as u32).to_le_bytes());
    for slot in 0..trainer.masters.len() {
        out.extend_from_slice(&(trainer.masters[slot].len() as u64).to_le_bytes());
        for v in &trainer.adam.m[slot] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &trainer.adam.v[slot] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_optimizer(trainer: &mut Trainer, bytes: &[u8]) -> Result<()> {
    if bytes.len() < 20 || &bytes[0..4] != OPT_MAGIC {
        return Err(Error::Format("missing EVSO magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != OPT_VERSION {
        return Err(Error::Format(format!("unsupported EVSO version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let n = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    if n != trainer.masters.len() {
        return Err(Error::Validation(format!(
            "optimizer state has {n} tensors, model has {}",
            trainer.masters.len()
        )));
    }
    let mut off = 20usize;
    let read_f64 = |bytes: &[u8], off: &mut usize| -> Result<f64> {
        if *off + 8 > bytes.len() {
            return Err(Error::Truncated { offset: *off as u64, what: "EVSO tensor".into() });
        }
        let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().expect("8 bytes"));
        *off += 8;
        Ok(v)
    };
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for slot in 0..n {
        if off + 8 > bytes.len() {
            return Err(Error::Truncated { offset: off as u64, what: "EVSO tensor header".into() });
        }
        let len = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize;
        off += 8;
        if len != trainer.masters[slot].len() {
            return Err(Error::Validation(format!(
                "optimizer tensor {slot} has {len} values, model expects {}",
                trainer.masters[slot].len()
            )));
        }
        let mut mv = Vec::with_capacity(len);
        for _ in 0..len {
            mv.push(read_f64(bytes, &mut off)?);
        }
        let mut vv = Vec::with_capacity(len);
        for _ in 0..len {
            vv.push(read_f64(bytes, &mut off)?);
        }
        m.push(mv);
        v.push(vv);
    }
    trainer.adam = AdamState { t, m, v };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Shape;
    use crate::layers::LayerSpec;
    use crate::models::{
        build_from_config, ArchKind, DecisionMode, ModelConfig, ModelGraph, ModelMeta, NeuronMode,
    };
    use crate::neurons::{LifParams, SpikeMode};

    fn frame(shape: Shape, values: Vec<f64>) -> FrameTensor {
        FrameTensor::from_values(shape, values).unwrap()
    }

    #[test]
    fn surrogate_examples() {
        let spec = SurrogateSpec::default();
        assert_eq!(surrogate_binary(1.0, 1.0, &spec), 1.0);
        let g = surrogate_binary(1.2, 1.0, &spec);
        assert!((g - 1.0 / 1.44).abs() < 1e-12, "{g}");
        let gg = surrogate_graded(1.2, 1.0, &spec);
        assert!((gg - (1.0 + 1.2 / 1.44)).abs() < 1e-12, "{gg}");
    }

    /// Hand-computed one-step LIF gradient: alpha = beta = 0, theta = 1,
    /// graded spikes, w = 0.6, x = 2, loss = y.
    #[test]
    fn one_step_lif_hand_gradient() {
        let w = crate::layers::QuantizedWeights { values: vec![6], scale: 0.1, bias: None };
        let fc = LayerSpec::fc(
            "fc",
            1,
            1,
            w,
            NeuronConfig::Lif(LifParams {
                alpha: 0.0,
                beta: 0.0,
                theta: 1.0,
                spike_mode: SpikeMode::Graded,
            }),
        );
        let graph = ModelGraph {
            meta: ModelMeta {
                name: "one-lif".into(),
                input: Shape::new(1, 1, 1),
                timestep_us: 1000,
                decision_group: 1,
                binary_input: false,
                decision_mode: DecisionMode::SpikeCount,
                pipeline_stages: 1,
                patch: None,
                feature_extractor: true,
            },
            layers: vec![fc],
            backbone_len: 1,
        };
        let cfg = TrainConfig { qat: false, ..Default::default() };
        let mut trainer = Trainer::new(graph, cfg).unwrap();
        trainer.set_flat(0, 0.6);
        let frames = vec![frame(Shape::new(1, 1, 1), vec![2.0])];
        let grads = trainer.grads_with_output_grads(&frames, vec![vec![1.0]]).unwrap();
        // u = 0.6 * 2 = 1.2 fires; dy/du = H(0.2) + 1.2 / (1 + |0.2|)^2.
        let u = 0.6 * 2.0;
        let expect = 2.0 * surrogate_graded(u, 1.0, &SurrogateSpec::default());
        assert!(
            (grads[0].w[0] - expect).abs() < 1e-12,
            "dL/dw = {}, expected {expect}",
            grads[0].w[0]
        );
        assert!((grads[0].w[0] - 11.0 / 3.0).abs() < 1e-9);
    }

    fn reduced_relu_s4d_graph() -> ModelGraph {
        // Tiny ReLU conv + S4D head on 8x8 inputs.
        let cfg = ModelConfig {
            arch: ArchKind::CnnMlp,
            neuron: NeuronMode::Relu,
            input_hw: 8,
            conv_channels: Some(vec![3]),
            fc_dims: Some(vec![6]),
            blocks: 13,
            patch: None,
            model_dim: 4,
            d_state: 2,
            sigma_theta: 1.0,
            lif_alpha: 0.5,
            lif_beta: 0.8,
            lif_theta: 1.0,
            timestep_us: Some(1000),
            decision_group: Some(1),
            seed: 5,
        };
        build_from_config(&cfg).unwrap()
    }

    fn random_sample(shape: Shape, steps: usize, seed: u64, label: bool) -> TrainSample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..steps)
            .map(|_| {
                frame(
                    shape,
                    (0..shape.len())
                        .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.5..3.0) } else { 0.0 })
                        .collect(),
                )
            })
            .collect();
        TrainSample { frames, label }
    }

    #[test]
    fn relu_path_matches_finite_differences() {
        let graph = reduced_relu_s4d_graph();
        let cfg = TrainConfig { qat: false, ..Default::default() };
        let mut trainer = Trainer::new(graph, cfg).unwrap();
        let sample = random_sample(Shape::new(2, 8, 8), 4, 3, true);
        let report = finite_diff_check(&mut trainer, &sample, 1e-5, 64, 11).unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn s4d_head_matches_finite_differences() {
        // Linear encode + S4D + linear decode, fully differentiable.
        let head = crate::models::build_s4d_head(&crate::models::S4dHeadConfig {
            feature_dim: 6,
            model_dim: 4,
            d_state: 2,
            seed: 9,
        })
        .unwrap();
        let graph = ModelGraph {
            meta: ModelMeta {
                name: "head-only".into(),
                input: Shape::new(6, 1, 1),
                timestep_us: 1000,
                decision_group: 1,
                binary_input: false,
                decision_mode: DecisionMode::MaxLogitDiff,
                pipeline_stages: 2,
                patch: None,
                feature_extractor: false,
            },
            layers: head,
            backbone_len: 2,
        };
        let cfg = TrainConfig { qat: false, ..Default::default() };
        let mut trainer = Trainer::new(graph, cfg).unwrap();
        let sample = random_sample(Shape::new(6, 1, 1), 6, 7, false);
        let report = finite_diff_check(&mut trainer, &sample, 1e-5, 64, 13).unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn linear_layer_fd_is_tight() {
        let w = crate::layers::quantize_weights(&[0.3, -0.2, 0.15, 0.4, -0.35, 0.05]);
        let fc = LayerSpec::fc("fc", 3, 2, w, NeuronConfig::Identity);
        let graph = ModelGraph {
            meta: ModelMeta {
                name: "linear".into(),
                input: Shape::new(3, 1, 1),
                timestep_us: 1000,
                decision_group: 1,
                binary_input: false,
                decision_mode: DecisionMode::MaxLogitDiff,
                pipeline_stages: 1,
                patch: None,
                feature_extractor: false,
            },
            layers: vec![fc],
            backbone_len: 1,
        };
        let cfg = TrainConfig { qat: false, ..Default::default() };
        let mut trainer = Trainer::new(graph, cfg).unwrap();
        let sample = TrainSample {
            frames: vec![frame(Shape::new(3, 1, 1), vec![1.0, -0.5, 2.0])],
            label: true,
        };
        let report = finite_diff_check(&mut trainer, &sample, 1e-5, 64, 17).unwrap();
        assert!(report.max_rel_err < 1e-7, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_identical() {
        let graph = reduced_relu_s4d_graph();
        let cfg = TrainConfig { lr: 0.0, lr_s4d: 0.0, qat: false, ..Default::default() };
        let mut trainer = Trainer::new(graph, cfg).unwrap();
        let before = trainer.masters.clone();
        let batch = vec![random_sample(Shape::new(2, 8, 8), 3, 1, true)];
        trainer.train_step(&batch).unwrap();
        assert_eq!(trainer.masters, before);
    }

    #[test]
    fn fixed_seed_reproduces_loss_trajectory() {
        let data: Vec<TrainSample> = (0..8)
            .map(|i| random_sample(Shape::new(2, 8, 8), 3, i, i % 3 == 0))
            .collect();
        let run = || -> Vec<f64> {
            let cfg = TrainConfig {
                qat: false,
                lr: 1e-3,
                batch_size: 4,
                ..Default::default()
            };
            let mut trainer = Trainer::new(reduced_relu_s4d_graph(), cfg).unwrap();
            (0..3).map(|e| trainer.train_epoch(&data, e).unwrap()).collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn focal_grad_matches_numeric_derivative_and_vanishes_at_confident_p() {
        let params = FocalLossParams { alpha: 0.9, gamma: 2.0 };
        for y in [true, false] {
            for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let eps = 1e-7;
                let fd = (focal_loss(&LabeledPrediction { p: p + eps, y }, &params)
                    - focal_loss(&LabeledPrediction { p: p - eps, y }, &params))
                    / (2.0 * eps);
                let a = focal_grad(p, y, &params);
                assert!((a - fd).abs() < 1e-5, "p={p} y={y}: {a} vs {fd}");
            }
        }
        assert!(focal_grad(1.0 - 1e-9, true, &params).abs() < 1e-6);
    }

    #[test]
    fn optimizer_sidecar_round_trips() {
        let graph = reduced_relu_s4d_graph();
        let cfg = TrainConfig { qat: false, lr: 1e-3, ..Default::default() };
        let mut trainer = Trainer::new(graph.clone(), cfg.clone()).unwrap();
        let batch = vec![random_sample(Shape::new(2, 8, 8), 3, 2, true)];
        trainer.train_step(&batch).unwrap();
        let bytes = save_optimizer(&trainer);

        let mut fresh = Trainer::new(graph, cfg).unwrap();
        load_optimizer(&mut fresh, &bytes).unwrap();
        assert_eq!(fresh.adam.t, trainer.adam.t);
        assert_eq!(fresh.adam.m, trainer.adam.m);
        assert_eq!(fresh.adam.v, trainer.adam.v);
    }
}
