//! Event-driven linear-algebra kernels over 8-bit quantized weights.
//!
//! Every kernel iterates only over nonzero input activations, so the work
//! and the synaptic-operation count scale with activation sparsity. A dense
//! route walking the same loops without the zero skip is provided for
//! equivalence checks: both routes add identical terms in identical order,
//! so pre-activations match exactly.

use crate::error::{Error, Result};
use crate::events::{FrameTensor, Shape};
use crate::neurons::{NeuronConfig, NeuronLayerState};
use serde::{Deserialize, Serialize};

// ── Quantized weights ────────────────────────────────────────────────────────

/// Symmetric per-tensor 8-bit weights with an optional integer bias sharing
/// the same scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeights {
    pub values: Vec<i8>,
    pub scale: f32,
    /// Accumulator-precision bias per output channel, dequantized as
    /// `bias * scale`.
    pub bias: Option<Vec<i32>>,
}

impl QuantizedWeights {
    #[inline]
    pub fn weight(&self, idx: usize) -> f64 {
        f64::from(self.values[idx]) * f64::from(self.scale)
    }

    pub fn bias_value(&self, channel: usize) -> f64 {
        match &self.bias {
            Some(b) => f64::from(b[channel]) * f64::from(self.scale),
            None => 0.0,
        }
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.values.iter().map(|q| f64::from(*q) * f64::from(self.scale)).collect()
    }
}

/// Symmetric per-tensor quantization: scale = max|w| / 127, values rounded
/// half away from zero and clamped to [-127, 127]. All-zero tensors get
/// scale 1. Element-wise dequantization error is at most scale / 2.
pub fn quantize_weights(w: &[f64]) -> QuantizedWeights {
    let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let values = w
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedWeights { values, scale: scale as f32, bias: None }
}

/// Quantize a real-valued bias onto an existing weight scale.
pub fn quantize_bias(b: &[f64], scale: f32) -> Vec<i32> {
    b.iter()
        .map(|v| {
            (v / f64::from(scale))
                .round()
                .clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
        })
        .collect()
}

// ── Layer specification ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DwConv2d,
    PwConv2d,
    Fc,
    AvgPool,
    Flatten,
    ResidualAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by the kernel extent.
    Valid,
    /// Zero padding keeping out = ceil(in / stride).
    Same,
}

/// Where a residual-add layer takes its second operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSource {
    ModelInput,
    /// Output of an earlier layer, by index.
    Layer(usize),
}

/// One layer: kind, geometry, weights, and the attached neuron model.
///
/// Weight layouts (row-major, little-endian in containers):
///   conv2d   w[((co*C_in + ci)*k + ky)*k + kx]
///   dwconv2d w[(c*k + ky)*k + kx]
///   pwconv2d w[co*C_in + ci]
///   fc       w[o*N_in + i]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weights: Option<QuantizedWeights>,
    pub neuron: NeuronConfig,
    /// True when the upstream layer emits delta-coded spikes that this layer
    /// must sigma-accumulate before applying its neuron.
    pub sigma_input: bool,
    /// Second operand for residual_add layers.
    pub skip: Option<SkipSource>,
}

fn out_dim(in_dim: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (in_dim - kernel) / stride + 1,
        Padding::Same => in_dim.div_ceil(stride),
    }
}

/// Leading zero rows/cols for same padding.
fn pad_before(in_dim: usize, out_dim: usize, kernel: usize, stride: usize) -> usize {
    let total = ((out_dim - 1) * stride + kernel).saturating_sub(in_dim);
    total / 2
}

/// (pad_y, pad_x) ahead of the first input row/column for a conv layer.
pub(crate) fn conv_padding(spec: &LayerSpec) -> (usize, usize) {
    match spec.padding {
        Padding::Valid => (0, 0),
        Padding::Same => (
            pad_before(spec.in_shape.h, spec.out_shape.h, spec.kernel, spec.stride),
            pad_before(spec.in_shape.w, spec.out_shape.w, spec.kernel, spec.stride),
        ),
    }
}

impl LayerSpec {
    pub fn conv2d(
        name: impl Into<String>,
        in_shape: Shape,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weights: QuantizedWeights,
        neuron: NeuronConfig,
    ) -> Self {
        let out_shape = Shape::new(
            c_out,
            out_dim(in_shape.h, kernel, stride, padding),
            out_dim(in_shape.w, kernel, stride, padding),
        );
        Self {
            name: name.into(),
            kind: LayerKind::Conv2d,
            in_shape,
            out_shape,
            kernel,
            stride,
            padding,
            weights: Some(weights),
            neuron,
            sigma_input: false,
            skip: None,
        }
    }

    pub fn dwconv2d(
        name: impl Into<String>,
        in_shape: Shape,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weights: QuantizedWeights,
        neuron: NeuronConfig,
    ) -> Self {
        let out_shape = Shape::new(
            in_shape.c,
            out_dim(in_shape.h, kernel, stride, padding),
            out_dim(in_shape.w, kernel, stride, padding),
        );
        Self {
            name: name.into(),
            kind: LayerKind::DwConv2d,
            in_shape,
            out_shape,
            kernel,
            stride,
            padding,
            weights: Some(weights),
            neuron,
            sigma_input: false,
            skip: None,
        }
    }

    pub fn pwconv2d(
        name: impl Into<String>,
        in_shape: Shape,
        c_out: usize,
        weights: QuantizedWeights,
        neuron: NeuronConfig,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::PwConv2d,
            in_shape,
            out_shape: Shape::new(c_out, in_shape.h, in_shape.w),
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            weights: Some(weights),
            neuron,
            sigma_input: false,
            skip: None,
        }
    }

    pub fn fc(
        name: impl Into<String>,
        n_in: usize,
        n_out: usize,
        weights: QuantizedWeights,
        neuron: NeuronConfig,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc,
            in_shape: Shape::new(n_in, 1, 1),
            out_shape: Shape::new(n_out, 1, 1),
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            weights: None,
            neuron,
            sigma_input: false,
            skip: None,
        }
        .with_weights(weights)
    }

    pub fn avgpool(name: impl Into<String>, in_shape: Shape, kernel: usize, stride: usize) -> Self {
        let out_shape = Shape::new(
            in_shape.c,
            out_dim(in_shape.h, kernel, stride, Padding::Valid),
            out_dim(in_shape.w, kernel, stride, Padding::Valid),
        );
        Self {
            name: name.into(),
            kind: LayerKind::AvgPool,
            in_shape,
            out_shape,
            kernel,
            stride,
            padding: Padding::Valid,
            weights: None,
            neuron: NeuronConfig::Identity,
            sigma_input: false,
            skip: None,
        }
    }

    pub fn flatten(name: impl Into<String>, in_shape: Shape) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Flatten,
            in_shape,
            out_shape: Shape::new(in_shape.len(), 1, 1),
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            weights: None,
            neuron: NeuronConfig::Identity,
            sigma_input: false,
            skip: None,
        }
    }

    pub fn residual_add(name: impl Into<String>, in_shape: Shape, skip: SkipSource) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::ResidualAdd,
            in_shape,
            out_shape: in_shape,
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            weights: None,
            neuron: NeuronConfig::Identity,
            sigma_input: false,
            skip: Some(skip),
        }
    }

    fn with_weights(mut self, weights: QuantizedWeights) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_sigma_input(mut self, sigma_input: bool) -> Self {
        self.sigma_input = sigma_input;
        self
    }

    /// Synapses converging on one output neuron.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.kernel * self.kernel * self.in_shape.c,
            LayerKind::DwConv2d => self.kernel * self.kernel,
            LayerKind::PwConv2d => self.in_shape.c,
            LayerKind::Fc => self.in_shape.len(),
            LayerKind::AvgPool | LayerKind::Flatten | LayerKind::ResidualAdd => 0,
        }
    }

    pub fn expected_weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.out_shape.c * self.in_shape.c * self.kernel * self.kernel,
            LayerKind::DwConv2d => self.in_shape.c * self.kernel * self.kernel,
            LayerKind::PwConv2d => self.out_shape.c * self.in_shape.c,
            LayerKind::Fc => self.out_shape.len() * self.in_shape.len(),
            LayerKind::AvgPool | LayerKind::Flatten | LayerKind::ResidualAdd => 0,
        }
    }

    pub fn n_params(&self) -> usize {
        match &self.weights {
            Some(w) => w.values.len() + w.bias.as_ref().map_or(0, Vec::len),
            None => 0,
        }
    }

    pub fn has_synapses(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d | LayerKind::DwConv2d | LayerKind::PwConv2d | LayerKind::Fc
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("layer '{}': {}", self.name, msg)));
        match self.kind {
            LayerKind::Conv2d | LayerKind::DwConv2d => {
                if self.kernel == 0 || self.stride == 0 {
                    return fail("kernel and stride must be positive".into());
                }
                if self.padding == Padding::Valid
                    && (self.in_shape.h < self.kernel || self.in_shape.w < self.kernel)
                {
                    return fail("input smaller than kernel under valid padding".into());
                }
                let expect = Shape::new(
                    self.out_shape.c,
                    out_dim(self.in_shape.h, self.kernel, self.stride, self.padding),
                    out_dim(self.in_shape.w, self.kernel, self.stride, self.padding),
                );
                if self.out_shape != expect {
                    return fail(format!("out shape {} inconsistent, expected {expect}", self.out_shape));
                }
                if self.kind == LayerKind::DwConv2d && self.out_shape.c != self.in_shape.c {
                    return fail("depthwise conv must preserve channel count".into());
                }
            }
            LayerKind::PwConv2d => {
                if self.out_shape.h != self.in_shape.h || self.out_shape.w != self.in_shape.w {
                    return fail("pointwise conv must preserve spatial dims".into());
                }
            }
            LayerKind::Fc => {
                if self.out_shape.h != 1 || self.out_shape.w != 1 {
                    return fail("fc output must be a vector".into());
                }
            }
            LayerKind::AvgPool => {
                if self.kernel == 0 || self.stride == 0 {
                    return fail("kernel and stride must be positive".into());
                }
            }
            LayerKind::Flatten => {
                if self.out_shape.len() != self.in_shape.len() {
                    return fail("flatten must preserve element count".into());
                }
            }
            LayerKind::ResidualAdd => {
                if self.out_shape != self.in_shape {
                    return fail("residual add must preserve shape".into());
                }
                if self.skip.is_none() {
                    return fail("residual add needs a skip source".into());
                }
            }
        }
        if self.has_synapses() {
            match &self.weights {
                None => return fail("synapse layer without weights".into()),
                Some(w) => {
                    if w.values.len() != self.expected_weight_len() {
                        return fail(format!(
                            "weight count {} does not match expected {}",
                            w.values.len(),
                            self.expected_weight_len()
                        ));
                    }
                    if w.scale <= 0.0 {
                        return fail("weight scale must be positive".into());
                    }
                    if let Some(b) = &w.bias {
                        if b.len() != self.out_shape.c {
                            return fail("bias length must match output channels".into());
                        }
                    }
                }
            }
        }
        if let NeuronConfig::S4d(p) = &self.neuron {
            if p.n_neurons() != self.out_shape.len() {
                return fail("S4D parameter count must match output neurons".into());
            }
            if !p.is_stable() {
                log::warn!("layer '{}': unstable S4D decay (|a| >= 1)", self.name);
            }
        }
        Ok(())
    }
}

/// Analytic per-timestep SynOps of dense (all-nonzero) processing.
///
/// For valid padding this is the closed form out_elems * fan_in; for same
/// padding, pad positions carry no synapse, so the count sums live fan-in
/// over output positions. Either way it equals the ledger count produced by
/// an all-nonzero input exactly.
pub fn dense_synops(spec: &LayerSpec) -> u64 {
    match spec.kind {
        LayerKind::Conv2d | LayerKind::DwConv2d => {
            let per_pos = live_positions(spec) as u64;
            let channel_factor = match spec.kind {
                LayerKind::Conv2d => (spec.in_shape.c * spec.out_shape.c) as u64,
                _ => spec.in_shape.c as u64,
            };
            per_pos * channel_factor
        }
        LayerKind::PwConv2d => (spec.in_shape.c * spec.out_shape.c * spec.out_shape.h * spec.out_shape.w) as u64,
        LayerKind::Fc => (spec.in_shape.len() * spec.out_shape.len()) as u64,
        LayerKind::AvgPool | LayerKind::Flatten | LayerKind::ResidualAdd => 0,
    }
}

/// Spatial (output position, kernel tap) pairs that hit a real input pixel.
fn live_positions(spec: &LayerSpec) -> usize {
    let (k, s) = (spec.kernel, spec.stride);
    let live_1d = |in_dim: usize, out_dim_: usize| -> usize {
        match spec.padding {
            Padding::Valid => out_dim_ * k,
            Padding::Same => {
                let pad = pad_before(in_dim, out_dim_, k, s);
                (0..out_dim_)
                    .map(|o| {
                        (0..k)
                            .filter(|t| {
                                let pos = (o * s + t).wrapping_sub(pad);
                                pos < in_dim && o * s + t >= pad
                            })
                            .count()
                    })
                    .sum()
            }
        }
    };
    live_1d(spec.in_shape.h, spec.out_shape.h) * live_1d(spec.in_shape.w, spec.out_shape.w)
}

// ── SynOps ledger ────────────────────────────────────────────────────────────

/// Per-layer synaptic-operation counters. Counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounters {
    /// One count per (nonzero input activation, destination synapse) pair.
    pub synops: u64,
    /// Neuron state updates (bias adds and dynamics), kept separate from
    /// synops.
    pub neuron_updates: u64,
    /// How many times the layer was evaluated.
    pub evaluations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynOpsLedger {
    pub layers: Vec<LayerCounters>,
}

impl SynOpsLedger {
    pub fn new(n_layers: usize) -> Self {
        Self { layers: vec![LayerCounters::default(); n_layers] }
    }

    pub fn total_synops(&self) -> u64 {
        self.layers.iter().map(|l| l.synops).sum()
    }

    pub fn total_neuron_updates(&self) -> u64 {
        self.layers.iter().map(|l| l.neuron_updates).sum()
    }

    /// Ordered, deterministic merge of per-worker ledgers.
    pub fn merge(&mut self, other: &SynOpsLedger) {
        assert_eq!(self.layers.len(), other.layers.len(), "ledger layer count mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.synops += b.synops;
            a.neuron_updates += b.neuron_updates;
            a.evaluations += b.evaluations;
        }
    }

    pub fn reset(&mut self) {
        self.layers.fill(LayerCounters::default());
    }
}

// ── Fixed-point evaluation mode ──────────────────────────────────────────────

/// Emulation of the quantized deployment datapath: activations and neuron
/// states snap to a power-of-two grid inside a 24-bit signed range, and the
/// synaptic accumulator must fit 32 signed bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSpec {
    pub frac_bits: u8,
}

impl Default for FixedPointSpec {
    fn default() -> Self {
        Self { frac_bits: 12 }
    }
}

impl FixedPointSpec {
    #[inline]
    pub fn grid(&self) -> f64 {
        (2.0f64).powi(-i32::from(self.frac_bits))
    }

    /// Largest representable magnitude for a 24-bit signed state.
    pub fn max_state(&self) -> f64 {
        ((1i64 << 23) - 1) as f64 * self.grid()
    }

    /// Snap to the grid with saturation.
    #[inline]
    pub fn snap(&self, v: f64) -> f64 {
        let q = (v / self.grid()).round();
        let q = q.clamp(-((1i64 << 23) as f64), ((1i64 << 23) - 1) as f64);
        q * self.grid()
    }

    /// The i32 accumulator holds drive / (weight_scale * grid).
    pub fn accumulator_ok(&self, drive: f64, weight_scale: f32) -> bool {
        (drive / (f64::from(weight_scale) * self.grid())).abs() <= f64::from(i32::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PrecisionMode {
    /// Double-precision reference path.
    #[default]
    Reference,
    Fixed(FixedPointSpec),
}

// ── Forward evaluation ───────────────────────────────────────────────────────

/// Execution state owned by one layer within one session.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExecState {
    pub neuron: NeuronLayerState,
    /// Sigma-decoder accumulator over delta-coded synaptic drive, one value
    /// per output neuron. Present only when `sigma_input` is set.
    pub recon: Option<Vec<f64>>,
}

impl LayerExecState {
    pub fn new(spec: &LayerSpec) -> Self {
        let n = spec.out_shape.len();
        Self {
            neuron: NeuronLayerState::new(&spec.neuron, n),
            recon: spec.sigma_input.then(|| vec![0.0; n]),
        }
    }

    pub fn reset(&mut self) {
        self.neuron.reset();
        if let Some(r) = &mut self.recon {
            r.fill(0.0);
        }
    }
}

/// Evaluate one layer for one timestep: synaptic drive from nonzero inputs,
/// optional sigma accumulation, bias, neuron step. Updates the ledger entry
/// `layer_idx`.
pub fn forward_layer(
    spec: &LayerSpec,
    input: &FrameTensor,
    skip: Option<&FrameTensor>,
    state: &mut LayerExecState,
    ledger: &mut SynOpsLedger,
    layer_idx: usize,
    precision: PrecisionMode,
) -> Result<FrameTensor> {
    if input.shape() != spec.in_shape {
        return Err(Error::Validation(format!(
            "layer '{}': input shape {} does not match {}",
            spec.name,
            input.shape(),
            spec.in_shape
        )));
    }

    let counters = &mut ledger.layers[layer_idx];
    counters.evaluations += 1;

    let mut z = match spec.kind {
        LayerKind::Conv2d | LayerKind::DwConv2d | LayerKind::PwConv2d | LayerKind::Fc => {
            let mut synops = 0u64;
            let drive = compute_drive(spec, input, true, &mut synops);
            counters.synops += synops;
            drive
        }
        LayerKind::AvgPool => pool_forward(spec, input),
        LayerKind::Flatten => input.values().to_vec(),
        LayerKind::ResidualAdd => {
            let skip = skip.ok_or_else(|| {
                Error::Validation(format!("layer '{}': missing skip operand", spec.name))
            })?;
            if skip.shape() != spec.in_shape {
                return Err(Error::Validation(format!(
                    "layer '{}': skip shape {} does not match {}",
                    spec.name,
                    skip.shape(),
                    spec.in_shape
                )));
            }
            input.values().iter().zip(skip.values()).map(|(a, b)| a + b).collect()
        }
    };

    if spec.has_synapses() {
        let weights = spec.weights.as_ref().expect("validated");
        if let PrecisionMode::Fixed(fx) = precision {
            for (o, v) in z.iter().enumerate() {
                if !fx.accumulator_ok(*v, weights.scale) {
                    let _ = o;
                    return Err(Error::Overflow { layer: spec.name.clone() });
                }
            }
        }
        // Sigma-accumulate delta-coded drive before bias and neuron.
        if let Some(recon) = &mut state.recon {
            for (acc, d) in recon.iter_mut().zip(z.iter_mut()) {
                *acc += *d;
                *d = *acc;
            }
        }
        if weights.bias.is_some() {
            let per_channel = spec.out_shape.h * spec.out_shape.w;
            for c in 0..spec.out_shape.c {
                let b = weights.bias_value(c);
                if b != 0.0 {
                    for v in &mut z[c * per_channel..(c + 1) * per_channel] {
                        *v += b;
                    }
                }
            }
        }
    }

    state.neuron.step(&spec.neuron, &mut z);
    if !matches!(spec.neuron, NeuronConfig::Identity) {
        counters.neuron_updates += spec.out_shape.len() as u64;
    }

    if let PrecisionMode::Fixed(fx) = precision {
        for v in &mut z {
            *v = fx.snap(*v);
        }
        quantize_state(&mut state.neuron, fx);
        if let Some(recon) = &mut state.recon {
            for v in recon.iter_mut() {
                *v = fx.snap(*v);
            }
        }
    }

    FrameTensor::from_values(spec.out_shape, z)
}

fn quantize_state(state: &mut NeuronLayerState, fx: FixedPointSpec) {
    match state {
        NeuronLayerState::Stateless => {}
        NeuronLayerState::SigmaDelta(v) => {
            for s in v {
                s.r = fx.snap(s.r);
                s.a_prev = fx.snap(s.a_prev);
                s.sum_y = fx.snap(s.sum_y);
                s.sigma_acc = fx.snap(s.sigma_acc);
            }
        }
        NeuronLayerState::Lif(v) => {
            for s in v {
                s.i = fx.snap(s.i);
                s.u = fx.snap(s.u);
            }
        }
        NeuronLayerState::S4d(v) => {
            for s in v {
                *s = fx.snap(*s);
            }
        }
    }
}

/// Pre-activations from the sparse route (nonzero inputs only), without
/// bias or neuron. Returns the synaptic drive and the SynOps count.
pub fn sparse_preactivations(spec: &LayerSpec, input: &FrameTensor) -> (Vec<f64>, u64) {
    let mut synops = 0u64;
    let drive = compute_drive(spec, input, true, &mut synops);
    (drive, synops)
}

/// Pre-activations from the dense route: identical loops without the zero
/// skip, so additions happen in the same order and results are identical.
pub fn dense_preactivations(spec: &LayerSpec, input: &FrameTensor) -> Vec<f64> {
    let mut synops = 0u64;
    compute_drive(spec, input, false, &mut synops)
}

fn compute_drive(spec: &LayerSpec, input: &FrameTensor, sparse: bool, synops: &mut u64) -> Vec<f64> {
    let weights = spec.weights.as_ref().expect("synapse layer has weights");
    let scale = f64::from(weights.scale);
    drive_with(spec, &|i| f64::from(weights.values[i]) * scale, input.values(), sparse, synops)
}

/// Synaptic drive with an arbitrary weight source. Inference (dequantized
/// int8) and training (f64 masters) share these loops, so their summation
/// order and results coincide for identical weight values.
pub fn drive_with(
    spec: &LayerSpec,
    weight_at: &impl Fn(usize) -> f64,
    input: &[f64],
    sparse: bool,
    synops: &mut u64,
) -> Vec<f64> {
    let mut z = vec![0.0f64; spec.out_shape.len()];
    match spec.kind {
        LayerKind::Fc => {
            let n_in = spec.in_shape.len();
            let n_out = spec.out_shape.len();
            for (i, v) in input.iter().enumerate() {
                if sparse && *v == 0.0 {
                    continue;
                }
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += weight_at(o * n_in + i) * *v;
                }
                *synops += n_out as u64;
            }
        }
        LayerKind::PwConv2d => {
            let (c_in, c_out) = (spec.in_shape.c, spec.out_shape.c);
            let hw = spec.in_shape.h * spec.in_shape.w;
            for ci in 0..c_in {
                for p in 0..hw {
                    let v = input[ci * hw + p];
                    if sparse && v == 0.0 {
                        continue;
                    }
                    for co in 0..c_out {
                        z[co * hw + p] += weight_at(co * c_in + ci) * v;
                    }
                    *synops += c_out as u64;
                }
            }
        }
        LayerKind::Conv2d | LayerKind::DwConv2d => {
            conv_drive(spec, weight_at, input, sparse, synops, &mut z);
        }
        _ => unreachable!("drive only defined for synapse layers"),
    }
    z
}

fn conv_drive(
    spec: &LayerSpec,
    weight_at: &impl Fn(usize) -> f64,
    input: &[f64],
    sparse: bool,
    synops: &mut u64,
    z: &mut [f64],
) {
    let (k, s) = (spec.kernel, spec.stride);
    let (h_in, w_in) = (spec.in_shape.h, spec.in_shape.w);
    let (c_out, h_out, w_out) = (spec.out_shape.c, spec.out_shape.h, spec.out_shape.w);
    let c_in = spec.in_shape.c;
    let depthwise = spec.kind == LayerKind::DwConv2d;
    let (pad_y, pad_x) = match spec.padding {
        Padding::Valid => (0usize, 0usize),
        Padding::Same => (pad_before(h_in, h_out, k, s), pad_before(w_in, w_out, k, s)),
    };

    // Input pixel (yi, xi) feeds output (oy, ox) through tap (ky, kx) when
    // oy*s + ky = yi + pad. Iterate inputs, scatter into outputs.
    for ci in 0..c_in {
        for yi in 0..h_in {
            for xi in 0..w_in {
                let v = input[(ci * h_in + yi) * w_in + xi];
                if sparse && v == 0.0 {
                    continue;
                }
                let mut fan_out = 0u64;
                for ky in 0..k {
                    let oy_num = yi + pad_y;
                    if oy_num < ky {
                        continue;
                    }
                    let oy_s = oy_num - ky;
                    if oy_s % s != 0 {
                        continue;
                    }
                    let oy = oy_s / s;
                    if oy >= h_out {
                        continue;
                    }
                    for kx in 0..k {
                        let ox_num = xi + pad_x;
                        if ox_num < kx {
                            continue;
                        }
                        let ox_s = ox_num - kx;
                        if ox_s % s != 0 {
                            continue;
                        }
                        let ox = ox_s / s;
                        if ox >= w_out {
                            continue;
                        }
                        if depthwise {
                            z[(ci * h_out + oy) * w_out + ox] += weight_at((ci * k + ky) * k + kx) * v;
                            fan_out += 1;
                        } else {
                            for co in 0..c_out {
                                z[(co * h_out + oy) * w_out + ox] +=
                                    weight_at(((co * c_in + ci) * k + ky) * k + kx) * v;
                            }
                            fan_out += c_out as u64;
                        }
                    }
                }
                *synops += fan_out;
            }
        }
    }
}

fn pool_forward(spec: &LayerSpec, input: &FrameTensor) -> Vec<f64> {
    let (k, s) = (spec.kernel, spec.stride);
    let (c, h_out, w_out) = (spec.out_shape.c, spec.out_shape.h, spec.out_shape.w);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0f64; spec.out_shape.len()];
    for ci in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut sum = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        sum += input.get(ci, oy * s + ky, ox * s + kx);
                    }
                }
                out[(ci * h_out + oy) * w_out + ox] = sum * norm;
            }
        }
    }
    out
}
