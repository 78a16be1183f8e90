//! Sequential backpropagation through time over a layer graph.
//!
//! Forward runs layer-major: each layer consumes its full input sequence
//! and produces its full output sequence, handling its own temporal
//! recurrence (LIF state, sigma accumulators, S4D convolution kernel)
//! internally. Backward mirrors this in reverse. Spike nonlinearities use
//! surrogate derivatives; reset gates are detached.

use crate::error::{Error, Result};
use crate::events::FrameTensor;
use crate::layers::{conv_padding, drive_with, LayerKind, LayerSpec, SkipSource};
use crate::models::ModelGraph;
use crate::neurons::{relu_step, NeuronConfig, SpikeMode};
use crate::train::{surrogate_binary, SurrogateSpec};

/// Effective (possibly fake-quantized) parameters of one layer.
#[derive(Debug, Clone, Default)]
pub struct EffLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Option<f64>,
    /// (a, b, c, d_state) for S4D neurons.
    pub s4d: Option<(Vec<f64>, Vec<f64>, Vec<f64>, usize)>,
}

/// Per-layer gradient accumulators, parallel to [`EffLayer`].
#[derive(Debug, Clone, Default)]
pub struct GradLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: f64,
    pub s4d_a: Vec<f64>,
    pub s4d_b: Vec<f64>,
    pub s4d_c: Vec<f64>,
}

impl GradLayer {
    fn zeros_like(eff: &EffLayer) -> Self {
        let (na, nb, nc) = match &eff.s4d {
            Some((a, b, c, _)) => (a.len(), b.len(), c.len()),
            None => (0, 0, 0),
        };
        Self {
            w: vec![0.0; eff.w.len()],
            b: vec![0.0; eff.b.len()],
            theta: 0.0,
            s4d_a: vec![0.0; na],
            s4d_b: vec![0.0; nb],
            s4d_c: vec![0.0; nc],
        }
    }
}

/// Everything the backward pass needs from one forward run.
pub struct Tape {
    /// Pre-neuron activations (after sigma accumulation and bias), [layer][t][n].
    z: Vec<Vec<Vec<f64>>>,
    /// Post-neuron outputs, [layer][t][n].
    y: Vec<Vec<Vec<f64>>>,
    /// LIF internals, [layer] -> ([t][n] current, [t][n] voltage).
    lif: Vec<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    /// SigmaDelta gate arguments da and relu outputs a, [layer] -> ([t][n] da, [t][n] a).
    sigma: Vec<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    steps: usize,
}

impl Tape {
    /// Final-layer output per step (the classifier logits / spikes).
    pub fn outputs(&self) -> &[Vec<f64>] {
        self.y.last().expect("nonempty graph")
    }
}

pub fn forward(
    graph: &ModelGraph,
    eff: &[EffLayer],
    frames: &[FrameTensor],
    surrogate: &SurrogateSpec,
) -> Result<Tape> {
    let _ = surrogate;
    if frames.is_empty() {
        return Err(Error::Validation("training sample has no frames".into()));
    }
    let steps = frames.len();
    let n_layers = graph.layers.len();
    let mut tape = Tape {
        z: vec![Vec::new(); n_layers],
        y: vec![Vec::new(); n_layers],
        lif: vec![None; n_layers],
        sigma: vec![None; n_layers],
        steps,
    };

    let input_seq: Vec<&[f64]> = frames.iter().map(|f| f.values()).collect();
    for (l, spec) in graph.layers.iter().enumerate() {
        // Linear stage: drive per step, sigma accumulation, bias. The
        // accumulator and bias application mirror the inference path
        // operation for operation so QAT forwards match it exactly.
        let mut recon = spec.sigma_input.then(|| vec![0.0f64; spec.out_shape.len()]);
        let mut z_seq: Vec<Vec<f64>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let x: &[f64] = if l == 0 { input_seq[t] } else { &tape.y[l - 1][t] };
            let mut z = match spec.kind {
                LayerKind::Conv2d | LayerKind::DwConv2d | LayerKind::PwConv2d | LayerKind::Fc => {
                    let mut synops = 0u64;
                    drive_with(spec, &|i| eff[l].w[i], x, true, &mut synops)
                }
                LayerKind::AvgPool => pool_forward(spec, x),
                LayerKind::Flatten => x.to_vec(),
                LayerKind::ResidualAdd => {
                    let skip: &[f64] = match spec.skip {
                        Some(SkipSource::Layer(j)) => &tape.y[j][t],
                        Some(SkipSource::ModelInput) => input_seq[t],
                        None => {
                            return Err(Error::Validation(format!(
                                "layer '{}' has no skip source",
                                spec.name
                            )));
                        }
                    };
                    x.iter().zip(skip).map(|(a, b)| a + b).collect()
                }
            };
            if spec.has_synapses() {
                if let Some(acc) = &mut recon {
                    for (a, d) in acc.iter_mut().zip(z.iter_mut()) {
                        *a += *d;
                        *d = *a;
                    }
                }
                if !eff[l].b.is_empty() {
                    let per_channel = spec.out_shape.h * spec.out_shape.w;
                    for c in 0..spec.out_shape.c {
                        let b = eff[l].b[c];
                        if b != 0.0 {
                            for v in &mut z[c * per_channel..(c + 1) * per_channel] {
                                *v += b;
                            }
                        }
                    }
                }
            }
            z_seq.push(z);
        }

        // Neuron stage over the whole sequence.
        let n = spec.out_shape.len();
        let mut y_seq: Vec<Vec<f64>> = Vec::with_capacity(steps);
        match &spec.neuron {
            NeuronConfig::Identity => {
                y_seq = z_seq.clone();
            }
            NeuronConfig::Relu => {
                y_seq = z_seq
                    .iter()
                    .map(|z| z.iter().map(|v| relu_step(*v)).collect())
                    .collect();
            }
            NeuronConfig::Lif(p) => {
                let mut i_seq = vec![vec![0.0; n]; steps];
                let mut u_seq = vec![vec![0.0; n]; steps];
                let theta = eff[l].theta.unwrap_or(p.theta);
                for t in 0..steps {
                    let mut y = vec![0.0; n];
                    for j in 0..n {
                        let i_prev = if t == 0 { 0.0 } else { i_seq[t - 1][j] };
                        let u_prev = if t == 0 { 0.0 } else { u_seq[t - 1][j] };
                        let y_prev = if t == 0 { 0.0 } else { y_seq[t - 1][j] };
                        let reset = if y_prev - 1.0 >= 0.0 { 0.0 } else { 1.0 };
                        let i = p.alpha * i_prev + z_seq[t][j];
                        let u = p.beta * u_prev * reset + i;
                        i_seq[t][j] = i;
                        u_seq[t][j] = u;
                        y[j] = if u >= theta {
                            match p.spike_mode {
                                SpikeMode::Graded => u,
                                SpikeMode::Binary => 1.0,
                            }
                        } else {
                            0.0
                        };
                    }
                    y_seq.push(y);
                }
                tape.lif[l] = Some((i_seq, u_seq));
            }
            NeuronConfig::SigmaDelta(p) => {
                let theta = eff[l].theta.unwrap_or(p.theta);
                let mut da_seq = vec![vec![0.0; n]; steps];
                let mut a_seq = vec![vec![0.0; n]; steps];
                let mut sum_y = vec![0.0; n];
                for t in 0..steps {
                    let mut y = vec![0.0; n];
                    for j in 0..n {
                        let a = relu_step(z_seq[t][j]);
                        let da = a - sum_y[j];
                        a_seq[t][j] = a;
                        da_seq[t][j] = da;
                        if da >= theta {
                            y[j] = da;
                            sum_y[j] += da;
                        }
                    }
                    y_seq.push(y);
                }
                tape.sigma[l] = Some((da_seq, a_seq));
            }
            NeuronConfig::S4d(_) => {
                let (a, bb, cc, d_state) =
                    eff[l].s4d.as_ref().expect("s4d layer has parameters");
                y_seq = vec![vec![0.0; n]; steps];
                for j in 0..n {
                    let lo = j * d_state;
                    let (aj, bj, cj) = (&a[lo..lo + d_state], &bb[lo..lo + d_state], &cc[lo..lo + d_state]);
                    let kernel = s4d_kernel_slices(aj, bj, cj, steps);
                    for t in 0..steps {
                        let mut acc = 0.0;
                        for tau in 0..=t {
                            acc += kernel[t - tau] * z_seq[tau][j];
                        }
                        y_seq[t][j] = acc;
                    }
                }
            }
        }
        tape.z[l] = z_seq;
        tape.y[l] = y_seq;
    }
    Ok(tape)
}

fn s4d_kernel_slices(a: &[f64], b: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    let mut pow = vec![1.0; a.len()];
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        let mut v = 0.0;
        for d in 0..a.len() {
            v += c[d] * pow[d] * b[d];
            pow[d] *= a[d];
        }
        k.push(v);
    }
    k
}

fn pool_forward(spec: &LayerSpec, x: &[f64]) -> Vec<f64> {
    let (k, s) = (spec.kernel, spec.stride);
    let (h_in, w_in) = (spec.in_shape.h, spec.in_shape.w);
    let (c, h_out, w_out) = (spec.out_shape.c, spec.out_shape.h, spec.out_shape.w);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; spec.out_shape.len()];
    for ci in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut sum = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        sum += x[(ci * h_in + oy * s + ky) * w_in + ox * s + kx];
                    }
                }
                out[(ci * h_out + oy) * w_out + ox] = sum * norm;
            }
        }
    }
    out
}

/// Reverse sweep. `d_out` is dL/d(final layer output) per step; returns
/// per-layer parameter gradients.
pub fn backward(
    graph: &ModelGraph,
    eff: &[EffLayer],
    frames: &[FrameTensor],
    tape: &Tape,
    d_out: Vec<Vec<f64>>,
    surrogate: &SurrogateSpec,
) -> Result<Vec<GradLayer>> {
    let n_layers = graph.layers.len();
    let steps = tape.steps;
    debug_assert_eq!(d_out.len(), steps);
    let mut grads: Vec<GradLayer> = eff.iter().map(GradLayer::zeros_like).collect();
    // dL/d(layer output), accumulated from every consumer.
    let mut dy: Vec<Option<Vec<Vec<f64>>>> = vec![None; n_layers];
    dy[n_layers - 1] = Some(d_out);

    let input_seq: Vec<&[f64]> = frames.iter().map(|f| f.values()).collect();
    for l in (0..n_layers).rev() {
        let spec = &graph.layers[l];
        let n = spec.out_shape.len();
        let dy_l = match dy[l].take() {
            Some(d) => d,
            // Dead branch (possible only for unused feature outputs).
            None => vec![vec![0.0; n]; steps],
        };

        // Neuron stage backward: dy -> dz (+ theta / s4d gradients).
        let mut dz = vec![vec![0.0; n]; steps];
        match &spec.neuron {
            NeuronConfig::Identity => {
                dz = dy_l;
            }
            NeuronConfig::Relu => {
                for t in 0..steps {
                    for j in 0..n {
                        dz[t][j] = if tape.z[l][t][j] >= 0.0 { dy_l[t][j] } else { 0.0 };
                    }
                }
            }
            NeuronConfig::Lif(p) => {
                let (_, u_seq) = tape.lif[l].as_ref().expect("lif tape");
                let theta = eff[l].theta.unwrap_or(p.theta);
                let mut carry_di = vec![0.0; n];
                let mut carry_du = vec![0.0; n];
                for t in (0..steps).rev() {
                    for j in 0..n {
                        let u = u_seq[t][j];
                        let g = surrogate_binary(u, theta, surrogate);
                        let (dy_du, dy_dtheta) = match p.spike_mode {
                            SpikeMode::Binary => (g, -g),
                            SpikeMode::Graded => {
                                let h = if u - theta >= 0.0 { 1.0 } else { 0.0 };
                                (h + u * g, -(u * g))
                            }
                        };
                        let du = carry_du[j] + dy_l[t][j] * dy_du;
                        grads[l].theta += dy_l[t][j] * dy_dtheta;
                        let di = carry_di[j] + du;
                        dz[t][j] = di;
                        carry_di[j] = di * p.alpha;
                        // u[t] = beta * u[t-1] * reset(y[t-1]) + i[t]; the
                        // reset gate is detached and keyed on the previous
                        // step's output.
                        let y_prev = if t == 0 { 0.0 } else { tape.y[l][t - 1][j] };
                        let reset = if y_prev - 1.0 >= 0.0 { 0.0 } else { 1.0 };
                        carry_du[j] = du * p.beta * reset;
                    }
                }
            }
            NeuronConfig::SigmaDelta(p) => {
                let (da_seq, _a_seq) = tape.sigma[l].as_ref().expect("sigma tape");
                let theta = eff[l].theta.unwrap_or(p.theta);
                let mut carry_dsum = vec![0.0; n];
                for t in (0..steps).rev() {
                    for j in 0..n {
                        let da = da_seq[t][j];
                        let g = surrogate_binary(da, theta, surrogate);
                        let h = if da - theta >= 0.0 { 1.0 } else { 0.0 };
                        let gate_grad = h + da * g;
                        let dy_total = dy_l[t][j] + carry_dsum[j];
                        let dda = dy_total * gate_grad;
                        grads[l].theta += dy_total * -(da * g);
                        // da = relu(z) - sum_prev; sum = sum_prev + y.
                        dz[t][j] = if tape.z[l][t][j] >= 0.0 { dda } else { 0.0 };
                        carry_dsum[j] += -dda;
                    }
                }
            }
            NeuronConfig::S4d(_) => {
                let (a, bb, cc, d_state) = eff[l].s4d.as_ref().expect("s4d params");
                for j in 0..n {
                    let lo = j * d_state;
                    let (aj, bj, cj) =
                        (&a[lo..lo + d_state], &bb[lo..lo + d_state], &cc[lo..lo + d_state]);
                    let kernel = s4d_kernel_slices(aj, bj, cj, steps);
                    // dz[tau] = sum_{t >= tau} dy[t] k[t - tau]
                    for tau in 0..steps {
                        let mut acc = 0.0;
                        for t in tau..steps {
                            acc += dy_l[t][j] * kernel[t - tau];
                        }
                        dz[tau][j] = acc;
                    }
                    // dk[m] = sum_{t >= m} dy[t] z[t - m]
                    let mut dk = vec![0.0; steps];
                    for m in 0..steps {
                        let mut acc = 0.0;
                        for t in m..steps {
                            acc += dy_l[t][j] * tape.z[l][t - m][j];
                        }
                        dk[m] = acc;
                    }
                    // k[m] = sum_d c a^m b
                    for d in 0..*d_state {
                        let (ad, bd, cd) = (aj[d], bj[d], cj[d]);
                        let mut pow = 1.0; // a^m
                        let mut pow_prev = 0.0; // a^(m-1)
                        for (m, dkm) in dk.iter().enumerate() {
                            if m > 0 {
                                grads[l].s4d_a[lo + d] += dkm * cd * bd * m as f64 * pow_prev;
                            }
                            grads[l].s4d_b[lo + d] += dkm * cd * pow;
                            grads[l].s4d_c[lo + d] += dkm * pow * bd;
                            pow_prev = pow;
                            pow *= ad;
                        }
                    }
                }
            }
        }

        // Bias and sigma-accumulation backward.
        if spec.has_synapses() {
            if !eff[l].b.is_empty() {
                let per_channel = spec.out_shape.h * spec.out_shape.w;
                for dz_t in &dz {
                    for c in 0..spec.out_shape.c {
                        let mut acc = 0.0;
                        for v in &dz_t[c * per_channel..(c + 1) * per_channel] {
                            acc += v;
                        }
                        grads[l].b[c] += acc;
                    }
                }
            }
            if spec.sigma_input {
                // zhat[t] = sum_{tau <= t} drive[tau]: suffix-sum the grads.
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in (0..steps).rev() {
                        acc += dz[t][j];
                        dz[t][j] = acc;
                    }
                }
            }
        }

        // Linear stage backward: dz -> dx and weight gradients.
        let needs_dx = l > 0;
        let mut dx_seq: Vec<Vec<f64>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let x: &[f64] = if l == 0 { input_seq[t] } else { &tape.y[l - 1][t] };
            let dz_t = &dz[t];
            let mut dx = vec![0.0; spec.in_shape.len()];
            match spec.kind {
                LayerKind::Fc => {
                    let n_in = spec.in_shape.len();
                    for o in 0..n {
                        let d = dz_t[o];
                        if d == 0.0 {
                            continue;
                        }
                        for i in 0..n_in {
                            dx[i] += eff[l].w[o * n_in + i] * d;
                            grads[l].w[o * n_in + i] += x[i] * d;
                        }
                    }
                }
                LayerKind::PwConv2d => {
                    let (c_in, c_out) = (spec.in_shape.c, spec.out_shape.c);
                    let hw = spec.in_shape.h * spec.in_shape.w;
                    for co in 0..c_out {
                        for p in 0..hw {
                            let d = dz_t[co * hw + p];
                            if d == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                dx[ci * hw + p] += eff[l].w[co * c_in + ci] * d;
                                grads[l].w[co * c_in + ci] += x[ci * hw + p] * d;
                            }
                        }
                    }
                }
                LayerKind::Conv2d | LayerKind::DwConv2d => {
                    conv_backward(spec, &eff[l].w, x, dz_t, &mut dx, &mut grads[l].w);
                }
                LayerKind::AvgPool => {
                    let (k, s) = (spec.kernel, spec.stride);
                    let (h_in, w_in) = (spec.in_shape.h, spec.in_shape.w);
                    let (h_out, w_out) = (spec.out_shape.h, spec.out_shape.w);
                    let norm = 1.0 / (k * k) as f64;
                    for ci in 0..spec.out_shape.c {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let d = dz_t[(ci * h_out + oy) * w_out + ox] * norm;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        dx[(ci * h_in + oy * s + ky) * w_in + ox * s + kx] += d;
                                    }
                                }
                            }
                        }
                    }
                }
                LayerKind::Flatten => {
                    dx.copy_from_slice(dz_t);
                }
                LayerKind::ResidualAdd => {
                    dx.copy_from_slice(dz_t);
                    if let Some(SkipSource::Layer(j)) = spec.skip {
                        let slot = dy[j].get_or_insert_with(|| vec![vec![0.0; dz_t.len()]; steps]);
                        for (a, b) in slot[t].iter_mut().zip(dz_t) {
                            *a += b;
                        }
                    }
                }
            }
            dx_seq.push(dx);
        }

        if needs_dx {
            let slot = dy[l - 1].get_or_insert_with(|| {
                vec![vec![0.0; graph.layers[l - 1].out_shape.len()]; steps]
            });
            for (acc, dx) in slot.iter_mut().zip(dx_seq) {
                for (a, b) in acc.iter_mut().zip(dx) {
                    *a += b;
                }
            }
        }
    }
    Ok(grads)
}

fn conv_backward(
    spec: &LayerSpec,
    w: &[f64],
    x: &[f64],
    dz: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let (k, s) = (spec.kernel, spec.stride);
    let (h_in, w_in, c_in) = (spec.in_shape.h, spec.in_shape.w, spec.in_shape.c);
    let (c_out, h_out, w_out) = (spec.out_shape.c, spec.out_shape.h, spec.out_shape.w);
    let depthwise = spec.kind == LayerKind::DwConv2d;
    let (pad_y, pad_x) = conv_padding(spec);

    for ci in 0..c_in {
        for yi in 0..h_in {
            for xi in 0..w_in {
                let in_idx = (ci * h_in + yi) * w_in + xi;
                let xv = x[in_idx];
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
                            let widx = (ci * k + ky) * k + kx;
                            let d = dz[(ci * h_out + oy) * w_out + ox];
                            dx[in_idx] += w[widx] * d;
                            dw[widx] += xv * d;
                        } else {
                            for co in 0..c_out {
                                let widx = ((co * c_in + ci) * k + ky) * k + kx;
                                let d = dz[(co * h_out + oy) * w_out + ox];
                                dx[in_idx] += w[widx] * d;
                                dw[widx] += xv * d;
                            }
                        }
                    }
                }
            }
        }
    }
}
