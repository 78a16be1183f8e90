//! Architecture builders: the 5-conv CNN + MLP, MCUNet-style inverted
//! residual backbones, and the S4D sequence head, plus the JSON model config.

use crate::error::{Error, Result};
use crate::events::Shape;
use crate::layers::{quantize_weights, LayerSpec, Padding, QuantizedWeights, SkipSource};
use crate::models::{DecisionMode, ModelGraph, ModelMeta, PatchConfig};
use crate::neurons::{LifParams, NeuronConfig, S4dLayerParams, SigmaDeltaParams, SpikeMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Neuron model attached to every synapse layer of a CNN+MLP build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeuronMode {
    Relu,
    SigmaDelta,
    LifBinary,
    #[default]
    LifGraded,
}

impl NeuronMode {
    pub fn is_spiking(self) -> bool {
        !matches!(self, NeuronMode::Relu)
    }
}

/// Fan-in scaled uniform init, quantized to 8 bits, zero bias.
fn init_weights(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, c_out: usize) -> QuantizedWeights {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut q = quantize_weights(&w);
    q.bias = Some(vec![0; c_out]);
    q
}

fn neuron_for(mode: NeuronMode, cfg: &CnnMlpConfig) -> NeuronConfig {
    match mode {
        NeuronMode::Relu => NeuronConfig::Relu,
        NeuronMode::SigmaDelta => NeuronConfig::SigmaDelta(SigmaDeltaParams { theta: cfg.sigma_theta }),
        NeuronMode::LifBinary => NeuronConfig::Lif(LifParams {
            alpha: cfg.lif_alpha,
            beta: cfg.lif_beta,
            theta: cfg.lif_theta,
            spike_mode: SpikeMode::Binary,
        }),
        NeuronMode::LifGraded => NeuronConfig::Lif(LifParams {
            alpha: cfg.lif_alpha,
            beta: cfg.lif_beta,
            theta: cfg.lif_theta,
            spike_mode: SpikeMode::Graded,
        }),
    }
}

// ── CNN + MLP ────────────────────────────────────────────────────────────────

/// Configurable CNN+MLP: stride-2 valid 3x3 convolutions followed by a
/// fully-connected stack ending in 2 output units, every synapse layer
/// driven by the selected neuron model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnMlpConfig {
    pub input_hw: usize,
    pub conv_channels: Vec<usize>,
    /// Hidden fully-connected widths; the final 2-unit layer is implicit.
    pub fc_dims: Vec<usize>,
    pub neuron: NeuronMode,
    pub sigma_theta: f64,
    pub lif_alpha: f64,
    pub lif_beta: f64,
    pub lif_theta: f64,
    pub timestep_us: u64,
    pub decision_group: u32,
    pub seed: u64,
}

impl CnnMlpConfig {
    /// The published full-scale topology:
    /// 160x160x2 - 16c3 - 32c3 - 64c3 - 128c3 - 256c3 (stride 2, valid),
    /// then fc 4096-128-64-2, at 20 ms steps with 3-step predictions.
    pub fn full_scale(neuron: NeuronMode) -> Self {
        Self {
            input_hw: 160,
            conv_channels: vec![16, 32, 64, 128, 256],
            fc_dims: vec![128, 64],
            neuron,
            sigma_theta: 1.0,
            lif_alpha: 0.5,
            lif_beta: 0.8,
            lif_theta: 1.0,
            timestep_us: 20_000,
            decision_group: 3,
            seed: 0,
        }
    }

    pub fn build(&self) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let neuron = neuron_for(self.neuron, self);
        let mut layers = Vec::new();
        let mut shape = Shape::new(2, self.input_hw, self.input_hw);
        let mut delta_coded = false;

        for (i, c_out) in self.conv_channels.iter().enumerate() {
            if shape.h < 3 || shape.w < 3 {
                return Err(Error::Config(format!(
                    "input {} too small for conv {} under valid padding",
                    shape,
                    i + 1
                )));
            }
            let n = c_out * shape.c * 9;
            let w = init_weights(&mut rng, n, shape.c * 9, *c_out);
            let spec = LayerSpec::conv2d(
                format!("conv{}", i + 1),
                shape,
                *c_out,
                3,
                2,
                Padding::Valid,
                w,
                neuron.clone(),
            )
            .with_sigma_input(delta_coded);
            shape = spec.out_shape;
            delta_coded = spec.neuron.emits_deltas();
            layers.push(spec);
        }

        layers.push(LayerSpec::flatten("flatten", shape));
        let mut n_in = shape.len();
        let mut dims = self.fc_dims.clone();
        dims.push(2);
        for (i, n_out) in dims.iter().enumerate() {
            let w = init_weights(&mut rng, n_in * n_out, n_in, *n_out);
            let spec = LayerSpec::fc(format!("fc{}", i + 1), n_in, *n_out, w, neuron.clone())
                .with_sigma_input(delta_coded);
            delta_coded = spec.neuron.emits_deltas();
            n_in = *n_out;
            layers.push(spec);
        }

        let pipeline_stages = layers.iter().filter(|l| l.has_synapses()).count();
        let graph = ModelGraph {
            meta: ModelMeta {
                name: format!("cnn-mlp-{:?}", self.neuron).to_lowercase(),
                input: Shape::new(2, self.input_hw, self.input_hw),
                timestep_us: self.timestep_us,
                decision_group: self.decision_group,
                binary_input: self.neuron == NeuronMode::LifBinary,
                decision_mode: if self.neuron.is_spiking() {
                    DecisionMode::SpikeCount
                } else {
                    DecisionMode::MaxLogitDiff
                },
                pipeline_stages,
                patch: None,
                feature_extractor: false,
            },
            backbone_len: self.conv_channels.len(),
            layers,
        };
        graph.validate()?;
        Ok(graph)
    }
}

/// The full-scale CNN+MLP with the selected neuron model.
pub fn build_cnn_mlp(neuron: NeuronMode) -> ModelGraph {
    CnnMlpConfig::full_scale(neuron).build().expect("full-scale topology is valid")
}

// ── MCUNet backbone ──────────────────────────────────────────────────────────

/// Inverted-residual backbone configuration.
///
/// Block schedule (1-indexed block b of up to 18):
///   stride 2 at b in {1, 4, 7, 10, 13}, stride 1 otherwise;
///   output channels start at `width_base` and double at every stride-2
///   block: 8, 8, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64, 128, 128, ...;
///   hidden width is `expansion` times the block input channels.
/// Each block is pointwise expand (ReLU), depthwise 3x3 same-padded
/// (ReLU), pointwise project (linear), with a residual add when stride is 1
/// and channels match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McuConfig {
    pub input: Shape,
    pub blocks: usize,
    pub width_base: usize,
    pub expansion: usize,
    pub seed: u64,
}

pub const MCU_MAX_BLOCKS: usize = 18;

impl McuConfig {
    pub fn new(input: Shape, blocks: usize) -> Self {
        Self { input, blocks, width_base: 8, expansion: 6, seed: 0 }
    }

    fn block_stride(b: usize) -> usize {
        if b <= 13 && b % 3 == 1 {
            2
        } else {
            1
        }
    }

    fn block_channels(&self, b: usize) -> usize {
        let stride2_seen = ((b + 2) / 3).min(5);
        self.width_base << (stride2_seen - 1)
    }

    /// Backbone block layers only (no pooling); returns the layers and the
    /// output shape.
    fn build_blocks(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<LayerSpec>, Shape)> {
        if self.blocks == 0 || self.blocks > MCU_MAX_BLOCKS {
            return Err(Error::Config(format!(
                "block count {} outside 1..={}",
                self.blocks, MCU_MAX_BLOCKS
            )));
        }
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut shape = self.input;
        for b in 1..=self.blocks {
            let stride = Self::block_stride(b);
            let c_out = self.block_channels(b);
            let hidden = self.expansion * shape.c;
            let block_in_idx = layers.len().checked_sub(1);
            let residual = stride == 1 && c_out == shape.c;

            let w = init_weights(rng, hidden * shape.c, shape.c, hidden);
            let expand = LayerSpec::pwconv2d(format!("b{b}-expand"), shape, hidden, w, NeuronConfig::Relu);
            let expand_out = expand.out_shape;
            layers.push(expand);

            let w = init_weights(rng, hidden * 9, 9, hidden);
            let dw = LayerSpec::dwconv2d(
                format!("b{b}-dw"),
                expand_out,
                3,
                stride,
                Padding::Same,
                w,
                NeuronConfig::Relu,
            );
            let dw_out = dw.out_shape;
            layers.push(dw);

            let w = init_weights(rng, c_out * hidden, hidden, c_out);
            let project =
                LayerSpec::pwconv2d(format!("b{b}-project"), dw_out, c_out, w, NeuronConfig::Identity);
            let project_out = project.out_shape;
            layers.push(project);

            if residual {
                let skip = match block_in_idx {
                    Some(idx) => SkipSource::Layer(idx),
                    None => SkipSource::ModelInput,
                };
                layers.push(LayerSpec::residual_add(format!("b{b}-add"), project_out, skip));
            }
            shape = project_out;
        }
        Ok((layers, shape))
    }
}

/// Backbone-only MCUNet feature extractor: `blocks` inverted residual
/// blocks, then global average pooling and flatten.
pub fn build_mcu(blocks: usize) -> Result<ModelGraph> {
    let cfg = McuConfig::new(Shape::new(2, 160, 160), blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut layers, shape) = cfg.build_blocks(&mut rng)?;
    let backbone_len = layers.len();
    layers.push(LayerSpec::avgpool("pool", shape, shape.h, shape.h));
    let pooled = layers.last().expect("pool").out_shape;
    layers.push(LayerSpec::flatten("flatten", pooled));

    let graph = ModelGraph {
        meta: ModelMeta {
            name: format!("mcu{blocks}b"),
            input: cfg.input,
            timestep_us: 60_000,
            decision_group: 1,
            binary_input: false,
            decision_mode: DecisionMode::MaxLogitDiff,
            pipeline_stages: blocks,
            patch: None,
            feature_extractor: true,
        },
        layers,
        backbone_len,
    };
    graph.validate()?;
    Ok(graph)
}

// ── S4D head ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S4dHeadConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub d_state: usize,
    pub seed: u64,
}

impl S4dHeadConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self { feature_dim, model_dim: 128, d_state: 4, seed: 1 }
    }
}

/// Temporal head: linear encode to `model_dim`, one S4D neuron per channel,
/// linear decode to the 2 output units.
///
/// Decays are initialized stably as a = exp(-dt * (1 + d)) with dt
/// log-uniform per neuron, so |a| < 1 always holds at build time.
pub fn build_s4d_head(cfg: &S4dHeadConfig) -> Result<Vec<LayerSpec>> {
    if cfg.feature_dim == 0 || cfg.model_dim == 0 || cfg.d_state == 0 {
        return Err(Error::Config("s4d head dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.model_dim * cfg.d_state;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let c_bound = (1.0 / cfg.d_state as f64).sqrt();
    for _ in 0..cfg.model_dim {
        let dt = 10f64.powf(rng.gen_range(-3.0..-1.0));
        for d in 0..cfg.d_state {
            a.push((-dt * (1.0 + d as f64)).exp());
            b.push(1.0);
            c.push(rng.gen_range(-c_bound..c_bound));
        }
    }
    let s4d = S4dLayerParams { d_state: cfg.d_state, a, b, c };
    debug_assert!(s4d.is_stable());

    let w = init_weights(&mut rng, cfg.feature_dim * cfg.model_dim, cfg.feature_dim, cfg.model_dim);
    let encode = LayerSpec::fc("s4d-encode", cfg.feature_dim, cfg.model_dim, w, NeuronConfig::S4d(s4d));
    let w = init_weights(&mut rng, cfg.model_dim * 2, cfg.model_dim, 2);
    let decode = LayerSpec::fc("s4d-decode", cfg.model_dim, 2, w, NeuronConfig::Identity);
    Ok(vec![encode, decode])
}

// ── Composed classifiers ─────────────────────────────────────────────────────

/// 5-conv ReLU CNN backbone, global average pooling, and the S4D head.
pub fn build_cnn_s4d() -> ModelGraph {
    let cnn = CnnMlpConfig::full_scale(NeuronMode::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(cnn.seed);
    let mut layers = Vec::new();
    let mut shape = Shape::new(2, 160, 160);
    for (i, c_out) in cnn.conv_channels.iter().enumerate() {
        let w = init_weights(&mut rng, c_out * shape.c * 9, shape.c * 9, *c_out);
        let spec = LayerSpec::conv2d(
            format!("conv{}", i + 1),
            shape,
            *c_out,
            3,
            2,
            Padding::Valid,
            w,
            NeuronConfig::Relu,
        );
        shape = spec.out_shape;
        layers.push(spec);
    }
    let backbone_len = layers.len();
    layers.push(LayerSpec::avgpool("pool", shape, shape.h, shape.h));
    layers.push(LayerSpec::flatten("flatten", Shape::new(shape.c, 1, 1)));
    layers.extend(build_s4d_head(&S4dHeadConfig::new(shape.c)).expect("valid head dims"));

    let stages = layers.iter().filter(|l| l.has_synapses()).count();
    let graph = ModelGraph {
        meta: ModelMeta {
            name: "cnn-s4d".into(),
            input: Shape::new(2, 160, 160),
            timestep_us: 60_000,
            decision_group: 1,
            binary_input: false,
            decision_mode: DecisionMode::MaxLogitDiff,
            pipeline_stages: stages,
            patch: None,
            feature_extractor: false,
        },
        layers,
        backbone_len,
    };
    graph.validate().expect("cnn-s4d topology is valid");
    graph
}

/// MCUNet backbone with the S4D head, optionally with input-patched
/// inference (the backbone then runs per patch and the head consumes the
/// assembled feature-map grid).
pub fn build_mcu_s4d(blocks: usize, patch: Option<PatchConfig>) -> Result<ModelGraph> {
    let input = Shape::new(2, 160, 160);
    let segment_input = match &patch {
        Some(p) => {
            p.validate(input.h)?;
            Shape::new(input.c, p.patch, p.patch)
        }
        None => input,
    };
    let cfg = McuConfig::new(segment_input, blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut layers, bb_shape) = cfg.build_blocks(&mut rng)?;
    let backbone_len = layers.len();

    let head_input = match &patch {
        Some(p) => {
            let g = p.grid(input.h);
            Shape::new(bb_shape.c, g * bb_shape.h, g * bb_shape.w)
        }
        None => bb_shape,
    };
    layers.push(LayerSpec::avgpool("pool", head_input, head_input.h, head_input.h));
    layers.push(LayerSpec::flatten("flatten", Shape::new(head_input.c, 1, 1)));
    let mut head = S4dHeadConfig::new(head_input.c);
    head.seed = cfg.seed.wrapping_add(1);
    layers.extend(build_s4d_head(&head)?);

    let graph = ModelGraph {
        meta: ModelMeta {
            name: format!("mcu{blocks}b-s4d"),
            input,
            timestep_us: 60_000,
            decision_group: 1,
            binary_input: false,
            decision_mode: DecisionMode::MaxLogitDiff,
            pipeline_stages: blocks,
            patch,
            feature_extractor: false,
        },
        layers,
        backbone_len,
    };
    graph.validate()?;
    Ok(graph)
}

// ── JSON model configuration ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    CnnMlp,
    CnnS4d,
    McuS4d,
    Mcu,
}

fn default_input_hw() -> usize {
    160
}
fn default_blocks() -> usize {
    13
}
fn default_model_dim() -> usize {
    128
}
fn default_d_state() -> usize {
    4
}
fn default_sigma_theta() -> f64 {
    1.0
}
fn default_lif_alpha() -> f64 {
    0.5
}
fn default_lif_beta() -> f64 {
    0.8
}
fn default_lif_theta() -> f64 {
    1.0
}

/// Text-file description of an architecture choice: which model to build,
/// its neuron mode, dims, and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    #[serde(default)]
    pub neuron: NeuronMode,
    #[serde(default = "default_input_hw")]
    pub input_hw: usize,
    #[serde(default)]
    pub conv_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub fc_dims: Option<Vec<usize>>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    #[serde(default = "default_sigma_theta")]
    pub sigma_theta: f64,
    #[serde(default = "default_lif_alpha")]
    pub lif_alpha: f64,
    #[serde(default = "default_lif_beta")]
    pub lif_beta: f64,
    #[serde(default = "default_lif_theta")]
    pub lif_theta: f64,
    #[serde(default)]
    pub timestep_us: Option<u64>,
    #[serde(default)]
    pub decision_group: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

/// Build the model a JSON config describes.
pub fn build_from_config(cfg: &ModelConfig) -> Result<ModelGraph> {
    let graph = match cfg.arch {
        ArchKind::CnnMlp => {
            let mut c = CnnMlpConfig::full_scale(cfg.neuron);
            c.input_hw = cfg.input_hw;
            if let Some(ch) = &cfg.conv_channels {
                c.conv_channels = ch.clone();
            }
            if let Some(fc) = &cfg.fc_dims {
                c.fc_dims = fc.clone();
            }
            c.sigma_theta = cfg.sigma_theta;
            c.lif_alpha = cfg.lif_alpha;
            c.lif_beta = cfg.lif_beta;
            c.lif_theta = cfg.lif_theta;
            if let Some(t) = cfg.timestep_us {
                c.timestep_us = t;
            }
            if let Some(g) = cfg.decision_group {
                c.decision_group = g;
            }
            c.seed = cfg.seed;
            c.build()?
        }
        ArchKind::CnnS4d => build_cnn_s4d(),
        ArchKind::McuS4d => build_mcu_s4d(cfg.blocks, cfg.patch)?,
        ArchKind::Mcu => build_mcu(cfg.blocks)?,
    };
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_backbone_ends_at_4x4x256() {
        let g = build_cnn_mlp(NeuronMode::Relu);
        assert_eq!(g.layers[4].out_shape, Shape::new(256, 4, 4));
        assert_eq!(g.layers.last().unwrap().out_shape.len(), 2);
        assert_eq!(g.meta.pipeline_stages, 8);
    }

    #[test]
    fn cnn_mlp_stays_under_a_million_params() {
        for mode in [NeuronMode::Relu, NeuronMode::SigmaDelta, NeuronMode::LifGraded] {
            let g = build_cnn_mlp(mode);
            assert!(g.n_params() < 1_000_000, "{} params", g.n_params());
        }
    }

    #[test]
    fn cnn_mlp_dense_synops_matches_pinned_constant() {
        // Sum of the per-layer closed forms for the full-scale topology.
        let g = build_cnn_mlp(NeuronMode::Relu);
        assert_eq!(g.dense_synops_per_step(), 26_683_296);
    }

    #[test]
    fn sigma_delta_sets_sigma_input_downstream() {
        let g = build_cnn_mlp(NeuronMode::SigmaDelta);
        assert!(!g.layers[0].sigma_input, "first conv sees raw frames");
        for spec in g.layers.iter().skip(1).filter(|l| l.has_synapses()) {
            assert!(spec.sigma_input, "layer '{}' should sigma-accumulate", spec.name);
        }
        let g = build_cnn_mlp(NeuronMode::LifGraded);
        assert!(g.layers.iter().all(|l| !l.sigma_input));
    }

    #[test]
    fn mcu_block_schedule() {
        for (b, stride, ch) in [
            (1, 2, 8),
            (2, 1, 8),
            (4, 2, 16),
            (7, 2, 32),
            (10, 2, 64),
            (13, 2, 128),
            (14, 1, 128),
            (18, 1, 128),
        ] {
            assert_eq!(McuConfig::block_stride(b), stride, "stride of block {b}");
            let cfg = McuConfig::new(Shape::new(2, 160, 160), 18);
            assert_eq!(cfg.block_channels(b), ch, "channels of block {b}");
        }
    }

    #[test]
    fn mcu_feature_extractor_builds_for_all_block_counts() {
        for blocks in [1, 13, 18] {
            let g = build_mcu(blocks).unwrap();
            assert_eq!(g.meta.pipeline_stages, blocks);
            assert_eq!(g.layers.last().unwrap().out_shape.h, 1);
        }
        assert!(build_mcu(0).is_err());
        assert!(build_mcu(19).is_err());
    }

    #[test]
    fn mcu13b_s4d_patched_is_paper_scale() {
        let g = build_mcu_s4d(13, Some(PatchConfig { patch: 40, stride: 30 })).unwrap();
        assert_eq!(g.patches_per_step(), 25);
        assert!(g.n_params() < 1_000_000, "{} params", g.n_params());
        assert_eq!(g.layers.last().unwrap().out_shape.len(), 2);
        // Per-patch backbone output is 2x2 so the assembled map is 10x10.
        assert_eq!(g.layers[g.backbone_len - 1].out_shape, Shape::new(128, 2, 2));
        assert_eq!(g.layers[g.backbone_len].in_shape, Shape::new(128, 10, 10));
    }

    #[test]
    fn mcu_stride1_blocks_are_residual() {
        let g = build_mcu_s4d(13, Some(PatchConfig { patch: 40, stride: 30 })).unwrap();
        let adds = g.layers.iter().filter(|l| l.name.ends_with("-add")).count();
        // Blocks 2,3,5,6,8,9,11,12 are stride-1 channel-preserving.
        assert_eq!(adds, 8);
    }

    #[test]
    fn s4d_head_is_stable_and_shaped() {
        let head = build_s4d_head(&S4dHeadConfig::new(256)).unwrap();
        assert_eq!(head.len(), 2);
        match &head[0].neuron {
            NeuronConfig::S4d(p) => {
                assert_eq!(p.d_state, 4);
                assert!(p.is_stable());
                assert_eq!(p.n_neurons(), 128);
            }
            other => panic!("expected S4D neuron, got {other:?}"),
        }
        assert_eq!(head[1].out_shape.len(), 2);
    }

    #[test]
    fn config_roundtrip_builds_reduced_model() {
        let json = r#"{
            "arch": "cnn_mlp",
            "neuron": "lif_graded",
            "input_hw": 32,
            "conv_channels": [8, 16, 32],
            "fc_dims": [32],
            "seed": 7
        }"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        let g = build_from_config(&cfg).unwrap();
        assert_eq!(g.meta.input, Shape::new(2, 32, 32));
        assert_eq!(g.layers.last().unwrap().out_shape.len(), 2);
        // 32 -> 15 -> 7 -> 3 under stride-2 valid 3x3.
        assert_eq!(g.layers[2].out_shape, Shape::new(32, 3, 3));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_mcu_s4d(13, Some(PatchConfig { patch: 40, stride: 30 })).unwrap();
        let b = build_mcu_s4d(13, Some(PatchConfig { patch: 40, stride: 30 })).unwrap();
        assert_eq!(a, b);
    }
}
