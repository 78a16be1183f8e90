//! Per-neuron dynamics: ReLU, SigmaDelta delta/sigma coding, current-based
//! LIF with binary or graded spikes, and the diagonal state-space recurrence.
//!
//! Step functions are deterministic and state-pure: the same (state, input,
//! params) always produces the same (output, next state). The reference path
//! computes in f64 throughout.

use serde::{Deserialize, Serialize};

/// Heaviside step with H(0) = 1, so a unit binary spike always triggers the
/// hard reset.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// y = max(z, 0).
#[inline]
pub fn relu_step(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        0.0
    }
}

// ── SigmaDelta ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaDeltaParams {
    /// Spike threshold, in activation units.
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SigmaDeltaState {
    /// Residual not yet transmitted.
    pub r: f64,
    /// Previous ReLU output.
    pub a_prev: f64,
    /// Running sum of emitted spikes. Always equals a_prev - r; kept
    /// explicitly so the residual identity is float-exact.
    pub sum_y: f64,
    /// Receiver-side accumulator (sigma decoder).
    pub sigma_acc: f64,
}

/// Delta encoder step: ReLU, difference against the previous output plus the
/// carried residual, thresholded graded spike.
///
/// Since r[t-1] = a[t-1] - sum_y[t-1], the update
/// delta = a - a_prev + r collapses to delta = a - sum_y, which is the form
/// computed here; it keeps the identity a[t] - sum(y[0..=t]) = r[t] exact in
/// floating point against a sequentially accumulated spike sum.
pub fn sigma_delta_step(state: &mut SigmaDeltaState, z: f64, p: &SigmaDeltaParams) -> f64 {
    let a = relu_step(z);
    let da = a - state.sum_y;
    let y = if da >= p.theta { da } else { 0.0 };
    state.sum_y += y;
    state.r = a - state.sum_y;
    state.a_prev = a;
    y
}

/// Sigma decoder step: accumulate sparse messages to restore the signal.
pub fn sigma_decode_step(state: &mut SigmaDeltaState, y: f64) -> f64 {
    state.sigma_acc += y;
    state.sigma_acc
}

// ── LIF ──────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    Binary,
    Graded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Synaptic current decay, in [0, 1].
    pub alpha: f64,
    /// Membrane voltage decay, in [0, 1].
    pub beta: f64,
    /// Spike threshold. Constrained to >= 1 so the reset term H(y - 1)
    /// fires on every spike in both spike modes.
    pub theta: f64,
    pub spike_mode: SpikeMode,
}

impl LifParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(crate::Error::Config(format!(
                "LIF decays must lie in [0, 1], got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.theta < 1.0 {
            return Err(crate::Error::Config(format!(
                "LIF threshold must be >= 1 (reset term is H(y - 1)), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LifState {
    /// Synaptic current.
    pub i: f64,
    /// Membrane voltage.
    pub u: f64,
    /// Previous output, drives the hard reset.
    pub y_prev: f64,
}

/// Current-based LIF step:
///   i[t] = alpha * i[t-1] + z[t]
///   u[t] = beta * u[t-1] * (1 - H(y[t-1] - 1)) + i[t]
///   y[t] = u[t] (graded) or 1 (binary) when u[t] >= theta, else 0
pub fn lif_step(state: &mut LifState, z: f64, p: &LifParams) -> f64 {
    state.i = p.alpha * state.i + z;
    state.u = p.beta * state.u * (1.0 - heaviside(state.y_prev - 1.0)) + state.i;
    let y = if state.u >= p.theta {
        match p.spike_mode {
            SpikeMode::Graded => state.u,
            SpikeMode::Binary => 1.0,
        }
    } else {
        0.0
    };
    state.y_prev = y;
    y
}

// ── S4D ──────────────────────────────────────────────────────────────────────

/// Diagonal state-space parameters for one neuron: per-state-element decay,
/// input projection, and output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S4dParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl S4dParams {
    pub fn d_state(&self) -> usize {
        self.a.len()
    }

    /// All decays strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a.iter().all(|a| a.abs() < 1.0)
    }

    /// Emits a warning (not an error) for unstable decays.
    pub fn warn_if_unstable(&self, context: &str) {
        if !self.is_stable() {
            log::warn!("unstable S4D decay (|a| >= 1) in {context}");
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct S4dState {
    pub s: Vec<f64>,
}

impl S4dState {
    pub fn zeros(d_state: usize) -> Self {
        Self { s: vec![0.0; d_state] }
    }
}

/// Recurrent step: s' = a (.) s + b * z, y = sum(c (.) s').
pub fn s4d_step(state: &mut S4dState, z: f64, p: &S4dParams) -> f64 {
    debug_assert_eq!(state.s.len(), p.a.len());
    let mut y = 0.0;
    for d in 0..state.s.len() {
        state.s[d] = p.a[d] * state.s[d] + p.b[d] * z;
        y += p.c[d] * state.s[d];
    }
    y
}

/// Convolutional form of the recurrence: k[n] = sum_d c_d * a_d^n * b_d.
///
/// Driving the recurrent step with an input sequence z is equivalent to
/// convolving z with this kernel.
pub fn s4d_kernel(p: &S4dParams, length: usize) -> Vec<f64> {
    let d = p.a.len();
    let mut pow = vec![1.0f64; d];
    let mut kernel = Vec::with_capacity(length);
    for _ in 0..length {
        let mut k = 0.0;
        for i in 0..d {
            k += p.c[i] * pow[i] * p.b[i];
            pow[i] *= p.a[i];
        }
        kernel.push(k);
    }
    kernel
}

// ── Layer-level containers ───────────────────────────────────────────────────

/// Neuron model attached to a layer's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeuronConfig {
    /// Pass-through (linear layers, pooling, reshape).
    Identity,
    Relu,
    SigmaDelta(SigmaDeltaParams),
    Lif(LifParams),
    S4d(S4dLayerParams),
}

impl NeuronConfig {
    /// Whether the dynamics carry state across timesteps.
    pub fn is_stateful(&self) -> bool {
        matches!(self, NeuronConfig::SigmaDelta(_) | NeuronConfig::Lif(_) | NeuronConfig::S4d(_))
    }

    /// Whether outputs are delta-coded graded spikes that downstream layers
    /// must sigma-accumulate.
    pub fn emits_deltas(&self) -> bool {
        matches!(self, NeuronConfig::SigmaDelta(_))
    }

    /// Whether outputs are binary spikes.
    pub fn emits_binary(&self) -> bool {
        matches!(
            self,
            NeuronConfig::Lif(LifParams { spike_mode: SpikeMode::Binary, .. })
        )
    }
}

/// Per-layer S4D parameters: `n_neurons` neurons, each with `d_state` local
/// scalars, stored concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S4dLayerParams {
    pub d_state: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl S4dLayerParams {
    pub fn n_neurons(&self) -> usize {
        self.a.len() / self.d_state
    }

    /// Parameter slices for neuron `i`.
    pub fn neuron(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let lo = i * self.d_state;
        let hi = lo + self.d_state;
        (&self.a[lo..hi], &self.b[lo..hi], &self.c[lo..hi])
    }

    pub fn neuron_params(&self, i: usize) -> S4dParams {
        let (a, b, c) = self.neuron(i);
        S4dParams { a: a.to_vec(), b: b.to_vec(), c: c.to_vec() }
    }

    pub fn is_stable(&self) -> bool {
        self.a.iter().all(|a| a.abs() < 1.0)
    }
}

/// Dynamical state for every neuron of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NeuronLayerState {
    Stateless,
    SigmaDelta(Vec<SigmaDeltaState>),
    Lif(Vec<LifState>),
    /// Concatenated state vectors, `n_neurons * d_state` long.
    S4d(Vec<f64>),
}

impl NeuronLayerState {
    pub fn new(config: &NeuronConfig, n_neurons: usize) -> Self {
        match config {
            NeuronConfig::Identity | NeuronConfig::Relu => NeuronLayerState::Stateless,
            NeuronConfig::SigmaDelta(_) => {
                NeuronLayerState::SigmaDelta(vec![SigmaDeltaState::default(); n_neurons])
            }
            NeuronConfig::Lif(_) => NeuronLayerState::Lif(vec![LifState::default(); n_neurons]),
            NeuronConfig::S4d(p) => NeuronLayerState::S4d(vec![0.0; n_neurons * p.d_state]),
        }
    }

    pub fn reset(&mut self) {
        match self {
            NeuronLayerState::Stateless => {}
            NeuronLayerState::SigmaDelta(v) => v.fill(SigmaDeltaState::default()),
            NeuronLayerState::Lif(v) => v.fill(LifState::default()),
            NeuronLayerState::S4d(v) => v.fill(0.0),
        }
    }

    /// Apply one neuron step to every pre-activation in `z`, in place.
    pub fn step(&mut self, config: &NeuronConfig, z: &mut [f64]) {
        match (self, config) {
            (NeuronLayerState::Stateless, NeuronConfig::Identity) => {}
            (NeuronLayerState::Stateless, NeuronConfig::Relu) => {
                for v in z.iter_mut() {
                    *v = relu_step(*v);
                }
            }
            (NeuronLayerState::SigmaDelta(states), NeuronConfig::SigmaDelta(p)) => {
                debug_assert_eq!(states.len(), z.len());
                for (state, v) in states.iter_mut().zip(z.iter_mut()) {
                    *v = sigma_delta_step(state, *v, p);
                }
            }
            (NeuronLayerState::Lif(states), NeuronConfig::Lif(p)) => {
                debug_assert_eq!(states.len(), z.len());
                for (state, v) in states.iter_mut().zip(z.iter_mut()) {
                    *v = lif_step(state, *v, p);
                }
            }
            (NeuronLayerState::S4d(s), NeuronConfig::S4d(p)) => {
                debug_assert_eq!(s.len(), z.len() * p.d_state);
                for (i, v) in z.iter_mut().enumerate() {
                    let (a, b, c) = p.neuron(i);
                    let lo = i * p.d_state;
                    let mut y = 0.0;
                    for d in 0..p.d_state {
                        s[lo + d] = a[d] * s[lo + d] + b[d] * *v;
                        y += c[d] * s[lo + d];
                    }
                    *v = y;
                }
            }
            _ => unreachable!("state/config kind mismatch"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        assert_eq!(relu_step(-3.0), 0.0);
        assert_eq!(relu_step(0.0), 0.0);
        assert_eq!(relu_step(2.5), 2.5);
    }

    #[test]
    fn sigma_delta_example_sequence() {
        let p = SigmaDeltaParams { theta: 1.0 };
        let mut st = SigmaDeltaState::default();
        let zs = [3.0, 3.0, 5.0, 4.0, -2.0];
        let expect_y = [3.0, 0.0, 2.0, 0.0, 0.0];
        let expect_r = [0.0, 0.0, 0.0, -1.0, -5.0];
        let mut sum_y = 0.0;
        for (i, z) in zs.iter().enumerate() {
            let y = sigma_delta_step(&mut st, *z, &p);
            sum_y += y;
            assert_eq!(y, expect_y[i], "y at step {i}");
            assert_eq!(st.r, expect_r[i], "r at step {i}");
            // Residual identity: a - running sum of y = r, exactly.
            assert_eq!(relu_step(*z) - sum_y, st.r, "identity at step {i}");
        }
        assert_eq!(sum_y, 5.0);
    }

    #[test]
    fn sigma_decode_accumulates() {
        let mut st = SigmaDeltaState::default();
        let ys = [3.0, 0.0, 2.0, 0.0, 0.0];
        let expect = [3.0, 3.0, 5.0, 5.0, 5.0];
        for (y, e) in ys.iter().zip(expect) {
            assert_eq!(sigma_decode_step(&mut st, *y), e);
        }
        let mut st = SigmaDeltaState::default();
        for _ in 0..5 {
            assert_eq!(sigma_decode_step(&mut st, 0.0), 0.0);
        }
    }

    #[test]
    fn encoder_decoder_pairing_reconstructs_within_residual() {
        // a[t] - a_hat[t] = r[t] for every step.
        let p = SigmaDeltaParams { theta: 0.75 };
        let mut enc = SigmaDeltaState::default();
        let mut dec = SigmaDeltaState::default();
        let zs = [0.3, 2.0, 1.9, -0.5, 4.2, 4.2, 0.0];
        for z in zs {
            let y = sigma_delta_step(&mut enc, z, &p);
            let a_hat = sigma_decode_step(&mut dec, y);
            assert!((relu_step(z) - a_hat - enc.r).abs() < 1e-15);
        }
    }

    #[test]
    fn lif_example_sequence_graded() {
        let p = LifParams { alpha: 0.5, beta: 0.5, theta: 1.0, spike_mode: SpikeMode::Graded };
        let mut st = LifState::default();
        let y1 = lif_step(&mut st, 1.0, &p);
        assert_eq!((st.i, st.u, y1), (1.0, 1.0, 1.0));
        let y2 = lif_step(&mut st, 0.0, &p);
        assert_eq!((st.i, st.u, y2), (0.5, 0.5, 0.0));
        let y3 = lif_step(&mut st, 0.6, &p);
        assert_eq!(st.i, 0.85);
        assert!((st.u - 1.1).abs() < 1e-15);
        assert!((y3 - 1.1).abs() < 1e-15);
    }

    #[test]
    fn lif_example_sequence_binary() {
        let p = LifParams { alpha: 0.5, beta: 0.5, theta: 1.0, spike_mode: SpikeMode::Binary };
        let mut st = LifState::default();
        assert_eq!(lif_step(&mut st, 1.0, &p), 1.0);
        assert_eq!(lif_step(&mut st, 0.0, &p), 0.0);
        assert_eq!(lif_step(&mut st, 0.6, &p), 1.0);
    }

    #[test]
    fn lif_theta_below_one_rejected() {
        let p = LifParams { alpha: 0.5, beta: 0.5, theta: 0.5, spike_mode: SpikeMode::Graded };
        assert!(p.validate().is_err());
    }

    #[test]
    fn s4d_example_recurrence() {
        let p = S4dParams { a: vec![0.5], b: vec![1.0], c: vec![2.0] };
        let mut st = S4dState::zeros(1);
        let ys: Vec<f64> = [1.0, 0.0, 0.0].iter().map(|z| s4d_step(&mut st, *z, &p)).collect();
        assert_eq!(ys, vec![2.0, 1.0, 0.5]);
        assert_eq!(st.s, vec![0.25]);
    }

    #[test]
    fn s4d_zero_input_is_zero_output() {
        let p = S4dParams { a: vec![0.9, -0.3], b: vec![1.0, 0.5], c: vec![2.0, 1.0] };
        let mut st = S4dState::zeros(2);
        for _ in 0..8 {
            assert_eq!(s4d_step(&mut st, 0.0, &p), 0.0);
        }
    }

    #[test]
    fn s4d_kernel_closed_form() {
        let p = S4dParams { a: vec![0.5], b: vec![1.0], c: vec![2.0] };
        assert_eq!(s4d_kernel(&p, 3), vec![2.0, 1.0, 0.5]);
        let memoryless = S4dParams { a: vec![0.0], b: vec![3.0], c: vec![2.0] };
        assert_eq!(s4d_kernel(&memoryless, 4), vec![6.0, 0.0, 0.0, 0.0]);
    }

    /// Direct convolution used as the independent route for the
    /// recurrent-vs-convolutional equivalence.
    fn conv_oracle(z: &[f64], k: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|t| (0..=t).map(|n| k[n] * z[t - n]).sum())
            .collect()
    }

    #[test]
    fn s4d_recurrent_equals_convolutional() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let d = rng.gen_range(1..=4);
            let p = S4dParams {
                a: (0..d).map(|_| rng.gen_range(-0.99..0.99)).collect(),
                b: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let len = rng.gen_range(1..=64);
            let z: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k = s4d_kernel(&p, len);
            let mut st = S4dState::zeros(d);
            let rec: Vec<f64> = z.iter().map(|z| s4d_step(&mut st, *z, &p)).collect();
            for (r, c) in rec.iter().zip(conv_oracle(&z, &k)) {
                assert!((r - c).abs() < 1e-6, "recurrent {r} vs conv {c}");
            }
        }
    }

    #[test]
    fn layer_state_reset_restores_initial() {
        let cfg = NeuronConfig::Lif(LifParams {
            alpha: 0.5,
            beta: 0.5,
            theta: 1.0,
            spike_mode: SpikeMode::Graded,
        });
        let mut st = NeuronLayerState::new(&cfg, 3);
        let mut z = [2.0, 0.0, 1.5];
        st.step(&cfg, &mut z);
        st.reset();
        assert_eq!(st, NeuronLayerState::new(&cfg, 3));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Residual identity holds exactly and r < theta, for random
            /// sequences and thresholds.
            #[test]
            fn sigma_delta_residual_identity(
                zs in proptest::collection::vec(-50.0f64..50.0, 1..64),
                theta in 1e-6f64..10.0,
            ) {
                let p = SigmaDeltaParams { theta };
                let mut st = SigmaDeltaState::default();
                let mut sum_y = 0.0;
                for z in &zs {
                    let y = sigma_delta_step(&mut st, *z, &p);
                    sum_y += y;
                    prop_assert_eq!(relu_step(*z) - sum_y, st.r);
                    prop_assert!(st.r < theta);
                }
            }

            #[test]
            fn lif_output_ranges(
                zs in proptest::collection::vec(-5.0f64..5.0, 1..64),
                alpha in 0.0f64..=1.0,
                beta in 0.0f64..=1.0,
                theta in 1.0f64..4.0,
            ) {
                let binary = LifParams { alpha, beta, theta, spike_mode: SpikeMode::Binary };
                let graded = LifParams { spike_mode: SpikeMode::Graded, ..binary };
                let mut sb = LifState::default();
                let mut sg = LifState::default();
                for z in &zs {
                    let yb = lif_step(&mut sb, *z, &binary);
                    let yg = lif_step(&mut sg, *z, &graded);
                    prop_assert!(yb == 0.0 || yb == 1.0);
                    prop_assert!(yg == 0.0 || yg >= theta);
                }
            }

            /// Binary and graded LIF fire at exactly the same timesteps when
            /// theta = 1 (the reset is then active at every spike in both).
            #[test]
            fn lif_firing_times_agree_at_unit_threshold(
                zs in proptest::collection::vec(-5.0f64..5.0, 1..64),
                alpha in 0.0f64..=1.0,
                beta in 0.0f64..=1.0,
            ) {
                let binary = LifParams { alpha, beta, theta: 1.0, spike_mode: SpikeMode::Binary };
                let graded = LifParams { spike_mode: SpikeMode::Graded, ..binary };
                let mut sb = LifState::default();
                let mut sg = LifState::default();
                for z in &zs {
                    let yb = lif_step(&mut sb, *z, &binary);
                    let yg = lif_step(&mut sg, *z, &graded);
                    prop_assert_eq!(yb > 0.0, yg > 0.0);
                }
            }

            /// With alpha = beta = 0 and theta -> 0+, graded LIF reduces to
            /// ReLU (inputs kept away from the (0, theta) dead band).
            #[test]
            fn graded_lif_degenerates_to_relu(
                zs in proptest::collection::vec(-5.0f64..5.0, 1..64),
            ) {
                let theta = 1e-300;
                let p = LifParams { alpha: 0.0, beta: 0.0, theta, spike_mode: SpikeMode::Graded };
                let mut st = LifState::default();
                for z in &zs {
                    prop_assume!(*z <= 0.0 || *z >= theta);
                    prop_assert_eq!(lif_step(&mut st, *z, &p), relu_step(*z));
                }
            }

            #[test]
            fn s4d_recurrent_matches_convolution(
                z in proptest::collection::vec(-2.0f64..2.0, 1..128),
                a in proptest::collection::vec(-0.99f64..0.99, 1..4),
            ) {
                let d = a.len();
                let p = S4dParams { a, b: vec![1.0; d], c: vec![0.5; d] };
                let k = s4d_kernel(&p, z.len());
                let mut st = S4dState::zeros(d);
                for t in 0..z.len() {
                    let y = s4d_step(&mut st, z[t], &p);
                    let conv: f64 = (0..=t).map(|n| k[n] * z[t - n]).sum();
                    prop_assert!((y - conv).abs() < 1e-6);
                }
            }
        }
    }
}
