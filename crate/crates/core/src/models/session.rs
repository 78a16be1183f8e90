//! Stateful inference execution over a model graph.

use crate::error::{Error, Result};
use crate::events::{FrameTensor, Shape};
use crate::layers::{forward_layer, LayerExecState, PrecisionMode, SkipSource, SynOpsLedger};
use crate::models::ModelGraph;
use std::sync::Arc;

/// Tracks live intermediate-activation elements during execution. The model
/// input frame is streamed and not counted; everything the session
/// allocates (layer outputs, patch slices, the assembled map) is.
#[derive(Debug, Clone, Default)]
pub struct MemTracker {
    current: usize,
    peak: usize,
}

impl MemTracker {
    fn alloc(&mut self, elems: usize) {
        self.current += elems;
        self.peak = self.peak.max(self.current);
    }

    fn free(&mut self, elems: usize) {
        debug_assert!(self.current >= elems);
        self.current -= elems;
    }

    /// Peak live activation footprint in bytes (f64 elements).
    pub fn peak_bytes(&self) -> usize {
        self.peak * std::mem::size_of::<f64>()
    }

    pub fn reset(&mut self) {
        self.current = 0;
        self.peak = 0;
    }
}

/// One worker's execution state over an immutable, shareable graph.
pub struct InferenceSession {
    graph: Arc<ModelGraph>,
    states: Vec<LayerExecState>,
    ledger: SynOpsLedger,
    precision: PrecisionMode,
    /// Index after which layer `i`'s output tensor can be dropped.
    last_use: Vec<usize>,
    mem: MemTracker,
    steps: u64,
}

impl InferenceSession {
    pub fn new(graph: Arc<ModelGraph>) -> Result<Self> {
        Self::with_precision(graph, PrecisionMode::Reference)
    }

    pub fn with_precision(graph: Arc<ModelGraph>, precision: PrecisionMode) -> Result<Self> {
        graph.validate()?;
        let states = graph.layers.iter().map(LayerExecState::new).collect();
        let ledger = SynOpsLedger::new(graph.layers.len());
        let mut last_use: Vec<usize> = (0..graph.layers.len()).map(|i| i + 1).collect();
        for (i, spec) in graph.layers.iter().enumerate() {
            if let Some(SkipSource::Layer(j)) = spec.skip {
                last_use[j] = last_use[j].max(i);
            }
        }
        Ok(Self { graph, states, ledger, precision, last_use, mem: MemTracker::default(), steps: 0 })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn ledger(&self) -> &SynOpsLedger {
        &self.ledger
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn mem(&self) -> &MemTracker {
        &self.mem
    }

    /// Zero all neuron states, sigma accumulators, and reset counters so a
    /// replayed input reproduces the exact same outputs.
    pub fn reset(&mut self) {
        for st in &mut self.states {
            st.reset();
        }
        self.steps = 0;
    }

    pub fn reset_ledger(&mut self) {
        self.ledger.reset();
    }

    /// One full network evaluation for one timestep, returning the final
    /// tensor. Stateful neurons advance exactly once; the ledger
    /// accumulates.
    pub fn forward(&mut self, frame: &FrameTensor) -> Result<FrameTensor> {
        if frame.shape() != self.graph.meta.input {
            return Err(Error::Validation(format!(
                "frame shape {} does not match model input {}",
                frame.shape(),
                self.graph.meta.input
            )));
        }
        let n = self.graph.layers.len();
        let out = if self.graph.meta.patch.is_some() {
            let assembled = self.patched_infer(frame)?;
            let backbone_len = self.graph.backbone_len;
            if backbone_len < n {
                let out = self.run_segment(backbone_len, n, &assembled)?;
                self.mem.free(assembled.shape().len());
                out
            } else {
                assembled
            }
        } else {
            self.run_segment(0, n, frame)?
        };
        self.steps += 1;
        self.mem.free(out.shape().len());
        Ok(out)
    }

    /// [`Self::forward`] for classifiers: the two output logits.
    pub fn infer_step(&mut self, frame: &FrameTensor) -> Result<[f64; 2]> {
        let out = self.forward(frame)?;
        let logits = out.values();
        if logits.len() != 2 {
            return Err(Error::Validation(format!(
                "model produced {} outputs, expected 2",
                logits.len()
            )));
        }
        Ok([logits[0], logits[1]])
    }

    /// Run the backbone on every patch of the frame (states reset per
    /// patch), assembling each patch's final feature map into its grid cell.
    /// The head takes the assembled map afterwards.
    pub fn patched_infer(&mut self, frame: &FrameTensor) -> Result<FrameTensor> {
        let patch_cfg = self
            .graph
            .meta
            .patch
            .ok_or_else(|| Error::Config("model has no patch configuration".into()))?;
        let backbone_len = self.graph.backbone_len;
        let bb_out = self.graph.layers[backbone_len - 1].out_shape;
        let input = self.graph.meta.input;
        let (gy, gx) = (patch_cfg.grid(input.h), patch_cfg.grid(input.w));
        let assembled_shape = Shape::new(bb_out.c, gy * bb_out.h, gx * bb_out.w);
        let mut assembled = FrameTensor::zeros(assembled_shape);
        self.mem.alloc(assembled_shape.len());

        let patch_shape = Shape::new(input.c, patch_cfg.patch, patch_cfg.patch);
        for cy in 0..gy {
            for cx in 0..gx {
                let (oy, ox) = (cy * patch_cfg.stride, cx * patch_cfg.stride);
                let mut patch = FrameTensor::zeros(patch_shape);
                self.mem.alloc(patch_shape.len());
                for c in 0..patch_shape.c {
                    for y in 0..patch_shape.h {
                        for x in 0..patch_shape.w {
                            patch.set(c, y, x, frame.get(c, oy + y, ox + x));
                        }
                    }
                }
                for st in &mut self.states[..backbone_len] {
                    st.reset();
                }
                let out = self.run_segment(0, backbone_len, &patch)?;
                self.mem.free(patch_shape.len());
                for c in 0..bb_out.c {
                    for y in 0..bb_out.h {
                        for x in 0..bb_out.w {
                            assembled.set(c, cy * bb_out.h + y, cx * bb_out.w + x, out.get(c, y, x));
                        }
                    }
                }
                self.mem.free(out.shape().len());
            }
        }
        Ok(assembled)
    }

    /// Execute layers [start, end) on `input`, freeing intermediate outputs
    /// as soon as their last consumer has run. The returned tensor stays
    /// accounted until the caller frees it.
    fn run_segment(&mut self, start: usize, end: usize, input: &FrameTensor) -> Result<FrameTensor> {
        debug_assert!(start < end && end <= self.graph.layers.len());
        let mut outputs: Vec<Option<FrameTensor>> = vec![None; end - start];
        for i in start..end {
            let spec = &self.graph.layers[i];
            let cur = if i == start {
                input
            } else {
                outputs[i - 1 - start].as_ref().expect("live predecessor output")
            };
            let skip = match spec.skip {
                Some(SkipSource::Layer(j)) => {
                    Some(outputs[j - start].as_ref().expect("live skip output"))
                }
                Some(SkipSource::ModelInput) => Some(input),
                None => None,
            };
            let out = forward_layer(
                spec,
                cur,
                skip,
                &mut self.states[i],
                &mut self.ledger,
                i,
                self.precision,
            )?;
            self.mem.alloc(out.shape().len());
            outputs[i - start] = Some(out);
            for j in start..i {
                if self.last_use[j] == i {
                    if let Some(t) = outputs[j - start].take() {
                        self.mem.free(t.shape().len());
                    }
                }
            }
        }
        Ok(outputs[end - 1 - start].take().expect("final segment output"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Padding, QuantizedWeights};
    use crate::models::builders::{build_cnn_mlp, build_mcu_s4d, NeuronMode};
    use crate::models::{DecisionMode, ModelMeta, PatchConfig};
    use crate::neurons::NeuronConfig;
    use rand::{Rng, SeedableRng};

    fn random_frame(shape: Shape, seed: u64, density: f64) -> FrameTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.len())
            .map(|_| if rng.gen_bool(density) { rng.gen_range(1.0f64..6.0).round() } else { 0.0 })
            .collect();
        FrameTensor::from_values(shape, values).unwrap()
    }

    fn single_conv_graph(input_hw: usize, patch: Option<PatchConfig>) -> ModelGraph {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let in_shape = match &patch {
            Some(p) => Shape::new(1, p.patch, p.patch),
            None => Shape::new(1, input_hw, input_hw),
        };
        let conv = LayerSpec::conv2d(
            "conv",
            in_shape,
            1,
            3,
            1,
            Padding::Valid,
            QuantizedWeights { values: crate::layers::quantize_weights(&w).values, scale: crate::layers::quantize_weights(&w).scale, bias: None },
            NeuronConfig::Relu,
        );
        ModelGraph {
            meta: ModelMeta {
                name: "single-conv".into(),
                input: Shape::new(1, input_hw, input_hw),
                timestep_us: 1000,
                decision_group: 1,
                binary_input: false,
                decision_mode: DecisionMode::MaxLogitDiff,
                pipeline_stages: 1,
                patch,
                feature_extractor: true,
            },
            layers: vec![conv],
            backbone_len: 1,
        }
    }

    #[test]
    fn stateless_model_is_pure_across_steps() {
        let g = Arc::new(build_cnn_mlp(NeuronMode::Relu));
        let mut sess = InferenceSession::new(g.clone()).unwrap();
        let frame = random_frame(g.meta.input, 9, 0.05);
        let a = sess.infer_step(&frame).unwrap();
        let b = sess.infer_step(&frame).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reset_restores_exact_replay() {
        let g = Arc::new(build_cnn_mlp(NeuronMode::LifGraded));
        let mut sess = InferenceSession::new(g.clone()).unwrap();
        let frames: Vec<FrameTensor> =
            (0..4).map(|s| random_frame(g.meta.input, s, 0.03)).collect();
        let first: Vec<[f64; 2]> =
            frames.iter().map(|f| sess.infer_step(f).unwrap()).collect();
        sess.reset();
        let second: Vec<[f64; 2]> =
            frames.iter().map(|f| sess.infer_step(f).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn sigma_delta_second_identical_frame_is_cheaper() {
        let g = Arc::new(build_cnn_mlp(NeuronMode::SigmaDelta));
        let mut sess = InferenceSession::new(g.clone()).unwrap();
        let frame = random_frame(g.meta.input, 21, 0.1);
        sess.infer_step(&frame).unwrap();
        let first: u64 = sess.ledger().total_synops();
        sess.infer_step(&frame).unwrap();
        let second = sess.ledger().total_synops() - first;
        assert!(
            second < first,
            "second identical step should move less traffic: {second} vs {first}"
        );
        // The raw-input conv repeats its work; everything downstream sees
        // zero deltas on the second step.
        let downstream: u64 =
            sess.ledger().layers[1..].iter().map(|l| l.synops).sum();
        let conv1 = sess.ledger().layers[0].synops;
        assert_eq!(conv1 % 2, 0);
        assert_eq!(downstream, sess.ledger().total_synops() - conv1);
    }

    #[test]
    fn degenerate_single_patch_equals_full_inference() {
        let full = Arc::new(single_conv_graph(12, None));
        let patched =
            Arc::new(single_conv_graph(12, Some(PatchConfig { patch: 12, stride: 12 })));
        let frame = random_frame(Shape::new(1, 12, 12), 5, 0.5);
        let mut a = InferenceSession::new(full).unwrap();
        let mut b = InferenceSession::new(patched).unwrap();
        let out_a = a.run_segment(0, 1, &frame).unwrap();
        let out_b = b.patched_infer(&frame).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn patched_single_conv_matches_full_when_overlap_covers_kernel() {
        // 3x3 valid conv: overlap of k-1 = 2 pixels makes grid assembly
        // exactly tile the full output.
        let input_hw = 20;
        let patch = PatchConfig { patch: 8, stride: 6 };
        let full = Arc::new(single_conv_graph(input_hw, None));
        let patched = Arc::new(single_conv_graph(input_hw, Some(patch)));
        let frame = random_frame(Shape::new(1, input_hw, input_hw), 17, 0.6);
        let mut a = InferenceSession::new(full).unwrap();
        let mut b = InferenceSession::new(patched).unwrap();
        let out_full = a.run_segment(0, 1, &frame).unwrap();
        let out_patched = b.patched_infer(&frame).unwrap();
        assert_eq!(out_full.shape(), out_patched.shape());
        assert_eq!(out_full, out_patched);
    }

    #[test]
    fn patched_backbone_touches_weights_25_times_per_frame() {
        let g = Arc::new(build_mcu_s4d(2, Some(PatchConfig { patch: 40, stride: 30 })).unwrap());
        let mut sess = InferenceSession::new(g.clone()).unwrap();
        let frame = random_frame(g.meta.input, 2, 0.02);
        sess.infer_step(&frame).unwrap();
        for (i, l) in sess.ledger().layers.iter().enumerate() {
            let expect = if i < g.backbone_len { 25 } else { 1 };
            assert_eq!(l.evaluations, expect, "layer {i}");
        }
    }

    #[test]
    fn zero_frame_through_bias_free_relu_model_is_zero() {
        let g = Arc::new(build_cnn_mlp(NeuronMode::Relu));
        let mut sess = InferenceSession::new(g.clone()).unwrap();
        let frame = FrameTensor::zeros(g.meta.input);
        // Builder biases are zero, so the bias-only forward is all zeros.
        assert_eq!(sess.infer_step(&frame).unwrap(), [0.0, 0.0]);
        assert_eq!(sess.ledger().total_synops(), 0);
    }

    #[test]
    fn zero_frame_reports_bias_only_forward() {
        // A nonzero bias must show through on an all-zero frame.
        let mut w = crate::layers::quantize_weights(&[0.5, -0.25]);
        w.bias = Some(vec![64, -32]);
        let fc = LayerSpec::fc("fc", 1, 2, w.clone(), NeuronConfig::Identity);
        let expect = [w.bias_value(0), w.bias_value(1)];
        let g = ModelGraph {
            meta: ModelMeta {
                name: "bias-only".into(),
                input: Shape::new(1, 1, 1),
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
        let mut sess = InferenceSession::new(Arc::new(g)).unwrap();
        let out = sess.infer_step(&FrameTensor::zeros(Shape::new(1, 1, 1))).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn stateful_backbone_with_patching_is_rejected() {
        let mut g = build_cnn_mlp(NeuronMode::LifGraded);
        g.meta.patch = Some(PatchConfig { patch: 160, stride: 160 });
        assert!(matches!(InferenceSession::new(Arc::new(g)), Err(Error::Config(_))));
    }
}
