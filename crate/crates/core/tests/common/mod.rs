//! Shared fixtures for the integration suites: published reference figures
//! for the target neuromorphic platform and independent layer oracles.

use evspike_core::events::{FrameTensor, Shape};
use evspike_core::layers::{quantize_weights, LayerKind, LayerSpec, Padding};
use evspike_core::models::{DecisionMode, ModelGraph, ModelMeta, PatchConfig};
use evspike_core::neurons::NeuronConfig;
use rand::Rng;

pub mod reference {
    //! Published evaluation figures for the six model variants and the
    //! three deployed configurations, used for consistency checks only.

    pub struct DetectionRow {
        pub name: &'static str,
        pub precision: f64,
        pub recall: f64,
        pub f1: f64,
        pub f1_err: f64,
    }

    pub const DETECTION_ROWS: &[DetectionRow] = &[
        DetectionRow { name: "cnn-mlp relu", precision: 32.4, recall: 81.0, f1: 46.3, f1_err: 0.7 },
        DetectionRow { name: "cnn-mlp sigma-delta", precision: 33.9, recall: 66.4, f1: 44.9, f1_err: 2.0 },
        DetectionRow { name: "cnn-mlp binary lif", precision: 41.0, recall: 70.4, f1: 51.9, f1_err: 1.4 },
        DetectionRow { name: "cnn-mlp graded lif", precision: 61.6, recall: 54.6, f1: 58.1, f1_err: 1.2 },
        DetectionRow { name: "cnn-s4d", precision: 81.8, recall: 72.5, f1: 76.9, f1_err: 0.9 },
        DetectionRow { name: "mcu13b-s4d", precision: 87.1, recall: 80.4, f1: 83.6, f1_err: 0.3 },
    ];

    /// (cost M SynOps/s, sparsity gain) for the four CNN+MLP variants.
    pub const CNN_MLP_COST_SPARSITY: &[(f64, f64)] =
        &[(433.0, 3.3), (100.0, 14.5), (125.0, 11.6), (26.0, 55.5)];

    pub struct PowerRow {
        pub name: &'static str,
        pub cores: usize,
        pub static_mw: f64,
        pub dynamic_mw: f64,
        pub total_mw: f64,
        pub synops_m_per_s: f64,
    }

    pub const POWER_ROWS: &[PowerRow] = &[
        PowerRow { name: "cnn-mlp graded lif", cores: 61, static_mw: 46.0, dynamic_mw: 0.3, total_mw: 46.3, synops_m_per_s: 26.0 },
        PowerRow { name: "cnn-s4d", cores: 80, static_mw: 76.0, dynamic_mw: 1.5, total_mw: 77.5, synops_m_per_s: 198.0 },
        PowerRow { name: "mcu13b-s4d", cores: 99, static_mw: 80.7, dynamic_mw: 8.2, total_mw: 88.9, synops_m_per_s: 1059.0 },
    ];
}

pub fn random_frame(shape: Shape, density: f64, rng: &mut impl Rng) -> FrameTensor {
    let values = (0..shape.len())
        .map(|_| if rng.gen_bool(density) { rng.gen_range(1.0f64..6.0).round() } else { 0.0 })
        .collect();
    FrameTensor::from_values(shape, values).unwrap()
}

/// Random small synapse layer (<= 10k synapses) of any kind/padding.
pub fn random_small_layer(rng: &mut impl Rng) -> LayerSpec {
    let neuron = NeuronConfig::Identity;
    match rng.gen_range(0..4) {
        0 => {
            let (c_in, c_out) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let hw = rng.gen_range(3..=9);
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=2);
            let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
            let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LayerSpec::conv2d(
                "conv",
                Shape::new(c_in, hw, hw),
                c_out,
                k,
                s,
                padding,
                quantize_weights(&w),
                neuron,
            )
        }
        1 => {
            let c = rng.gen_range(1..=4);
            let hw = rng.gen_range(3..=9);
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=2);
            let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
            let w: Vec<f64> = (0..c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LayerSpec::dwconv2d("dw", Shape::new(c, hw, hw), k, s, padding, quantize_weights(&w), neuron)
        }
        2 => {
            let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let hw = rng.gen_range(1..=7);
            let w: Vec<f64> = (0..c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LayerSpec::pwconv2d("pw", Shape::new(c_in, hw, hw), c_out, quantize_weights(&w), neuron)
        }
        _ => {
            let (n_in, n_out) = (rng.gen_range(1..=32), rng.gen_range(1..=16));
            let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LayerSpec::fc("fc", n_in, n_out, quantize_weights(&w), neuron)
        }
    }
}

/// Output-gathering oracle: walk every output position and its kernel taps,
/// resolve the source input, and sum contributions. Also counts SynOps as
/// one per (nonzero input, synapse) pair via the same walk.
pub fn enumerate_layer(spec: &LayerSpec, input: &FrameTensor) -> (Vec<f64>, u64) {
    let weights = spec.weights.as_ref().expect("synapse layer");
    let scale = f64::from(weights.scale);
    let w_at = |i: usize| f64::from(weights.values[i]) * scale;
    let mut z = vec![0.0f64; spec.out_shape.len()];
    let mut ops = 0u64;
    match spec.kind {
        LayerKind::Fc => {
            let n_in = spec.in_shape.len();
            for (o, zo) in z.iter_mut().enumerate() {
                for i in 0..n_in {
                    let v = input.values()[i];
                    if v != 0.0 {
                        *zo += w_at(o * n_in + i) * v;
                        ops += 1;
                    }
                }
            }
        }
        LayerKind::PwConv2d => {
            let (c_in, c_out) = (spec.in_shape.c, spec.out_shape.c);
            let hw = spec.in_shape.h * spec.in_shape.w;
            for co in 0..c_out {
                for p in 0..hw {
                    for ci in 0..c_in {
                        let v = input.values()[ci * hw + p];
                        if v != 0.0 {
                            z[co * hw + p] += w_at(co * c_in + ci) * v;
                            ops += 1;
                        }
                    }
                }
            }
        }
        LayerKind::Conv2d | LayerKind::DwConv2d => {
            let (k, s) = (spec.kernel, spec.stride);
            let (h_in, w_in, c_in) = (spec.in_shape.h, spec.in_shape.w, spec.in_shape.c);
            let (c_out, h_out, w_out) = (spec.out_shape.c, spec.out_shape.h, spec.out_shape.w);
            let depthwise = spec.kind == LayerKind::DwConv2d;
            let (pad_y, pad_x) = match spec.padding {
                Padding::Valid => (0isize, 0isize),
                Padding::Same => {
                    let total_y = ((h_out - 1) * s + k).saturating_sub(h_in);
                    let total_x = ((w_out - 1) * s + k).saturating_sub(w_in);
                    ((total_y / 2) as isize, (total_x / 2) as isize)
                }
            };
            for co in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yi = (oy * s + ky) as isize - pad_y;
                                let xi = (ox * s + kx) as isize - pad_x;
                                if yi < 0 || xi < 0 || yi >= h_in as isize || xi >= w_in as isize {
                                    continue;
                                }
                                let (yi, xi) = (yi as usize, xi as usize);
                                let sources = if depthwise { co..co + 1 } else { 0..c_in };
                                for ci in sources {
                                    let v = input.get(ci, yi, xi);
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let widx = if depthwise {
                                        (co * k + ky) * k + kx
                                    } else {
                                        ((co * c_in + ci) * k + ky) * k + kx
                                    };
                                    z[(co * h_out + oy) * w_out + ox] += w_at(widx) * v;
                                    ops += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => panic!("enumeration only covers synapse layers"),
    }
    (z, ops)
}

pub fn wrap_single_layer(layer: LayerSpec, input: Shape) -> ModelGraph {
    ModelGraph {
        meta: ModelMeta {
            name: "single-layer".into(),
            input,
            timestep_us: 1000,
            decision_group: 1,
            binary_input: false,
            decision_mode: DecisionMode::SpikeCount,
            pipeline_stages: 1,
            patch: None,
            feature_extractor: true,
        },
        layers: vec![layer],
        backbone_len: 1,
    }
}

/// Single 3x3 valid stride-1 conv as a patchable backbone.
pub fn single_conv_graph(input_hw: usize, patch: Option<PatchConfig>) -> ModelGraph {
    use rand::SeedableRng;
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
        quantize_weights(&w),
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
