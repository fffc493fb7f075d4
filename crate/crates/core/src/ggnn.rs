//! Gated graph recurrent layers, deep stacks, and the delayed variant.
//!
//! One layer keeps a hidden signal x in [-1, 1]^{N x F} and updates it from
//! the current input signal u through six graph filter banks: a state pair
//! (modulated by the forget and input gates) and two gate pairs feeding
//! logistic nonlinearities. The update is
//!
//! ```text
//!   input_gate  = logistic(input_x(x)  + input_u(u)  + input_bias)
//!   forget_gate = logistic(forget_x(x) + forget_u(u) + forget_bias)
//!   x_next      = tanh(forget_gate o state_x(x) + input_gate o state_u(u) + state_bias)
//! ```
//!
//! Deep stacks feed each layer's fresh state to the next layer as its
//! input; a graph output filter plus a small dense head produce the
//! control. Every agent runs the same weights, so the whole construction
//! is permutation equivariant and executes distributedly.

use crate::filters::{delayed_filter_apply, filter_apply, FilterBank, FilterError, SignalHistory};
use crate::graph::{SupportKind, SupportMatrix};
use crate::mat::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GgnnError {
    #[error("input out of unit ball: sup norm {0} exceeds 1")]
    InputOutOfUnitBall(f64),
    #[error("state count mismatch: network has {expected} layers, got {got} states")]
    StateCountMismatch { expected: usize, got: usize },
    #[error("layer parameter shapes are inconsistent: {0}")]
    MalformedParams(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Hidden signal of one layer; entries stay in [-1, 1] because every
/// update passes through tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState(Mat);

impl LayerState {
    pub fn new(m: Mat) -> Result<Self, GgnnError> {
        let norm = m.sup_norm();
        if norm > 1.0 {
            return Err(GgnnError::InputOutOfUnitBall(norm));
        }
        Ok(Self(m))
    }

    pub fn zeros(n_agents: usize, features: usize) -> Self {
        Self(Mat::zeros(n_agents, features))
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

/// Gate activations from one update, each in (0, 1)^{N x F}.
#[derive(Debug, Clone)]
pub struct Gates {
    pub forget: Mat,
    pub input: Mat,
}

/// All filter banks and biases of one gated layer.
///
/// `*_x` banks read the hidden state (width F), `*_u` banks read the layer
/// input (width G); biases are a single row broadcast to every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub state_x: FilterBank,
    pub state_u: FilterBank,
    pub forget_x: FilterBank,
    pub forget_u: FilterBank,
    pub input_x: FilterBank,
    pub input_u: FilterBank,
    pub state_bias: Mat,
    pub forget_bias: Mat,
    pub input_bias: Mat,
}

impl LayerParams {
    pub fn zeros(features: usize, input_width: usize, k_order: usize) -> Self {
        Self {
            state_x: FilterBank::zeros(features, features, k_order),
            state_u: FilterBank::zeros(input_width, features, k_order),
            forget_x: FilterBank::zeros(features, features, k_order),
            forget_u: FilterBank::zeros(input_width, features, k_order),
            input_x: FilterBank::zeros(features, features, k_order),
            input_u: FilterBank::zeros(input_width, features, k_order),
            state_bias: Mat::zeros(1, features),
            forget_bias: Mat::zeros(1, features),
            input_bias: Mat::zeros(1, features),
        }
    }

    pub fn features(&self) -> usize {
        self.state_x.output_width()
    }

    pub fn input_width(&self) -> usize {
        self.state_u.input_width()
    }

    pub fn k_order(&self) -> usize {
        self.state_x.k_order()
    }

    pub fn validate(&self) -> Result<(), GgnnError> {
        let f = self.features();
        let g = self.input_width();
        let k = self.k_order();
        let banks: [(&str, &FilterBank, usize); 6] = [
            ("state_x", &self.state_x, f),
            ("state_u", &self.state_u, g),
            ("forget_x", &self.forget_x, f),
            ("forget_u", &self.forget_u, g),
            ("input_x", &self.input_x, f),
            ("input_u", &self.input_u, g),
        ];
        for (name, bank, width) in banks {
            if bank.k_order() != k {
                return Err(GgnnError::MalformedParams(format!(
                    "{name} has K={}, expected {k}",
                    bank.k_order()
                )));
            }
            if bank.input_width() != width || bank.output_width() != f {
                return Err(GgnnError::MalformedParams(format!(
                    "{name} is {}x{}, expected {width}x{f}",
                    bank.input_width(),
                    bank.output_width()
                )));
            }
        }
        for (name, bias) in [
            ("state_bias", &self.state_bias),
            ("forget_bias", &self.forget_bias),
            ("input_bias", &self.input_bias),
        ] {
            if bias.rows() != 1 || bias.cols() != f {
                return Err(GgnnError::MalformedParams(format!(
                    "{name} is {}x{}, expected 1x{f}",
                    bias.rows(),
                    bias.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Shared arithmetic of the instantaneous and delayed updates.
///
/// Both paths must issue the same operations in the same order so that a
/// delayed layer over a static, constant history reproduces the
/// instantaneous layer bit for bit.
fn gated_update(
    params: &LayerParams,
    eval_x: &mut dyn FnMut(&FilterBank) -> Result<Mat, FilterError>,
    eval_u: &mut dyn FnMut(&FilterBank) -> Result<Mat, FilterError>,
) -> Result<(LayerState, Gates), GgnnError> {
    let input_gate = eval_x(&params.input_x)?
        .add(&eval_u(&params.input_u)?)
        .broadcast_row_add(&params.input_bias)
        .map(logistic);
    let forget_gate = eval_x(&params.forget_x)?
        .add(&eval_u(&params.forget_u)?)
        .broadcast_row_add(&params.forget_bias)
        .map(logistic);
    let next = forget_gate
        .hadamard(&eval_x(&params.state_x)?)
        .add(&input_gate.hadamard(&eval_u(&params.state_u)?))
        .broadcast_row_add(&params.state_bias)
        .map(f64::tanh);
    Ok((
        LayerState(next),
        Gates {
            forget: forget_gate,
            input: input_gate,
        },
    ))
}

/// One synchronous layer update on the current support.
pub fn layer_forward(
    params: &LayerParams,
    support: &SupportMatrix,
    state: &LayerState,
    input: &Mat,
) -> Result<(LayerState, Gates), GgnnError> {
    let input_norm = input.sup_norm();
    if input_norm > 1.0 {
        return Err(GgnnError::InputOutOfUnitBall(input_norm));
    }
    gated_update(
        params,
        &mut |bank| filter_apply(bank, support, state.mat()),
        &mut |bank| filter_apply(bank, support, input),
    )
}

/// Layer update where every filter runs on histories: tap k reads signals
/// k steps old shifted through the k most recent supports.
pub fn delayed_forward(
    params: &LayerParams,
    state_history: &SignalHistory,
    input_history: &SignalHistory,
) -> Result<LayerState, GgnnError> {
    let (state, _gates) = gated_update(
        params,
        &mut |bank| delayed_filter_apply(bank, state_history),
        &mut |bank| delayed_filter_apply(bank, input_history),
    )?;
    Ok(state)
}

/// Worst-case gate activations reachable from unit-bounded state and
/// input, given a bound on the stacked shift norm `||[I, S, ..., S^K]||`.
/// Returns `(forget_bound, input_bound)`, each in (0, 1).
pub fn gate_bounds(params: &LayerParams, s_k_norm: f64) -> (f64, f64) {
    debug_assert!(s_k_norm >= 1.0, "stacked norm includes the identity block");
    let forget = logistic(
        s_k_norm * (params.forget_x.stacked_norm() + params.forget_u.stacked_norm())
            + params.forget_bias.sup_norm(),
    );
    let input = logistic(
        s_k_norm * (params.input_x.stacked_norm() + params.input_u.stacked_norm())
            + params.input_bias.sup_norm(),
    );
    (forget, input)
}

/// One dense affine map shared by every agent (rows of the signal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Mat,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
            bias: Mat::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.matmul(&self.weight).broadcast_row_add(&self.bias)
    }
}

/// Two tanh-activated affine maps; squashes raw features into the unit
/// ball the recurrent layers assume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub l1: Affine,
    pub l2: Affine,
}

impl Encoder {
    pub fn forward(&self, raw: &Mat) -> Mat {
        let h = self.l1.forward(raw).map(f64::tanh);
        self.l2.forward(&h).map(f64::tanh)
    }
}

/// Dense head after the graph output filter; the final tanh is scaled by
/// the actuator saturation so controls stay admissible by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutHead {
    pub l1: Affine,
    pub l2: Affine,
    pub saturation: f64,
}

impl ReadoutHead {
    pub fn forward(&self, z: &Mat) -> Mat {
        let h = self.l1.forward(z).map(f64::tanh);
        let sat = self.saturation;
        self.l2.forward(&h).map(|v| sat * v.tanh())
    }
}

/// Full network: encoder, a stack of gated layers, and a readout.
///
/// `encoder: None` means the raw input is already unit-bounded and is fed
/// straight to the first layer; `head: None` means the graph output filter
/// plus its bias IS the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub encoder: Option<Encoder>,
    pub layers: Vec<LayerParams>,
    pub readout: FilterBank,
    pub readout_bias: Mat,
    pub head: Option<ReadoutHead>,
    pub support_kind: SupportKind,
}

impl NetworkParams {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn features(&self) -> usize {
        self.layers[0].features()
    }

    pub fn k_order(&self) -> usize {
        self.layers[0].k_order()
    }

    pub fn saturation(&self) -> Option<f64> {
        self.head.as_ref().map(|h| h.saturation)
    }

    pub fn validate(&self) -> Result<(), GgnnError> {
        if self.layers.is_empty() {
            return Err(GgnnError::MalformedParams("no layers".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_width() != pair[0].features() {
                return Err(GgnnError::MalformedParams(format!(
                    "layer {} input width {} != layer {} state width {}",
                    i + 1,
                    pair[1].input_width(),
                    i,
                    pair[0].features()
                )));
            }
        }
        if let Some(enc) = &self.encoder {
            if enc.l2.weight.cols() != self.layers[0].input_width() {
                return Err(GgnnError::MalformedParams(
                    "encoder output width does not match first layer input".into(),
                ));
            }
        }
        let last = self.layers.last().expect("non-empty");
        if self.readout.input_width() != last.features() {
            return Err(GgnnError::MalformedParams(
                "readout input width does not match last layer state width".into(),
            ));
        }
        if self.readout_bias.rows() != 1 || self.readout_bias.cols() != self.readout.output_width() {
            return Err(GgnnError::MalformedParams("readout bias shape".into()));
        }
        if let Some(head) = &self.head {
            if head.l1.weight.rows() != self.readout.output_width() {
                return Err(GgnnError::MalformedParams(
                    "head input width does not match readout output".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn zero_states(&self, n_agents: usize) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|l| LayerState::zeros(n_agents, l.features()))
            .collect()
    }
}

/// Squashes the raw features (or checks them when there is no encoder) and
/// runs the stack, feeding each fresh state to the next layer.
/// Returns the control signal and the updated hidden states.
pub fn deep_forward(
    net: &NetworkParams,
    support: &SupportMatrix,
    states: &[LayerState],
    raw_input: &Mat,
) -> Result<(Mat, Vec<LayerState>), GgnnError> {
    if states.len() != net.layers.len() {
        return Err(GgnnError::StateCountMismatch {
            expected: net.layers.len(),
            got: states.len(),
        });
    }
    let mut input = match &net.encoder {
        Some(enc) => enc.forward(raw_input),
        None => {
            let norm = raw_input.sup_norm();
            if norm > 1.0 {
                return Err(GgnnError::InputOutOfUnitBall(norm));
            }
            raw_input.clone()
        }
    };
    let mut new_states = Vec::with_capacity(states.len());
    for (layer, state) in net.layers.iter().zip(states) {
        let (next, _gates) = layer_forward(layer, support, state, &input)?;
        input = next.mat().clone();
        new_states.push(next);
    }
    let mid = filter_apply(&net.readout, support, &input)?.broadcast_row_add(&net.readout_bias);
    let output = match &net.head {
        Some(head) => head.forward(&mid),
        None => mid,
    };
    Ok((output, new_states))
}

/// Closed-loop state of a network whose communication takes one sampling
/// step per hop: per-layer state and input histories plus the readout
/// history, each K+1 deep.
#[derive(Debug, Clone)]
pub struct DelayedNet {
    state_hists: Vec<SignalHistory>,
    input_hists: Vec<SignalHistory>,
    readout_hist: SignalHistory,
    states: Vec<LayerState>,
}

impl DelayedNet {
    pub fn new(net: &NetworkParams, n_agents: usize) -> Self {
        let k = net.k_order();
        Self {
            state_hists: net.layers.iter().map(|l| SignalHistory::new(l.k_order())).collect(),
            input_hists: net.layers.iter().map(|l| SignalHistory::new(l.k_order())).collect(),
            readout_hist: SignalHistory::new(k),
            states: net.zero_states(n_agents),
        }
    }

    /// Advances one communication step and returns the control. The first
    /// call warm-starts every history with the current observation, as if
    /// the scene had been static long enough for all hops to propagate.
    pub fn step(
        &mut self,
        net: &NetworkParams,
        timestamp: i64,
        support: &SupportMatrix,
        raw_input: &Mat,
    ) -> Result<Mat, GgnnError> {
        let mut input = match &net.encoder {
            Some(enc) => enc.forward(raw_input),
            None => {
                let norm = raw_input.sup_norm();
                if norm > 1.0 {
                    return Err(GgnnError::InputOutOfUnitBall(norm));
                }
                raw_input.clone()
            }
        };
        for (i, layer) in net.layers.iter().enumerate() {
            if self.state_hists[i].is_empty() {
                self.state_hists[i].warm_start(timestamp, self.states[i].mat(), support);
                self.input_hists[i].warm_start(timestamp, &input, support);
            } else {
                self.state_hists[i].push(timestamp, self.states[i].mat().clone(), support.clone())?;
                self.input_hists[i].push(timestamp, input.clone(), support.clone())?;
            }
            let next = delayed_forward(layer, &self.state_hists[i], &self.input_hists[i])?;
            input = next.mat().clone();
            self.states[i] = next;
        }
        if self.readout_hist.is_empty() {
            self.readout_hist.warm_start(timestamp, &input, support);
        } else {
            self.readout_hist.push(timestamp, input, support.clone())?;
        }
        let mid = delayed_filter_apply(&net.readout, &self.readout_hist)?
            .broadcast_row_add(&net.readout_bias);
        Ok(match &net.head {
            Some(head) => head.forward(&mid),
            None => mid,
        })
    }
}

fn uniform_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn random_bank<R: Rng>(rng: &mut R, input: usize, output: usize, k_order: usize) -> FilterBank {
    FilterBank::new((0..=k_order).map(|_| uniform_mat(rng, input, output, input)).collect())
}

impl LayerParams {
    /// Uniform fan-in initialization with zero biases.
    pub fn random<R: Rng>(rng: &mut R, features: usize, input_width: usize, k_order: usize) -> Self {
        Self {
            state_x: random_bank(rng, features, features, k_order),
            state_u: random_bank(rng, input_width, features, k_order),
            forget_x: random_bank(rng, features, features, k_order),
            forget_u: random_bank(rng, input_width, features, k_order),
            input_x: random_bank(rng, features, features, k_order),
            input_u: random_bank(rng, input_width, features, k_order),
            state_bias: Mat::zeros(1, features),
            forget_bias: Mat::zeros(1, features),
            input_bias: Mat::zeros(1, features),
        }
    }
}

impl Affine {
    pub fn random<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: uniform_mat(rng, input, output, input),
            bias: Mat::zeros(1, output),
        }
    }
}

/// Architecture description for a freshly initialized network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Architecture {
    pub raw_input_width: usize,
    pub hidden_width: usize,
    pub features: usize,
    pub k_order: usize,
    pub n_layers: usize,
    pub control_width: usize,
    pub saturation: f64,
    pub support_kind: SupportKind,
}

impl NetworkParams {
    /// Fresh network per the architecture, uniform fan-in weights.
    pub fn random<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let h = arch.hidden_width;
        let mut layers = Vec::with_capacity(arch.n_layers);
        let mut width = h;
        for _ in 0..arch.n_layers {
            layers.push(LayerParams::random(rng, arch.features, width, arch.k_order));
            width = arch.features;
        }
        Self {
            encoder: Some(Encoder {
                l1: Affine::random(rng, arch.raw_input_width, h),
                l2: Affine::random(rng, h, h),
            }),
            layers,
            readout: random_bank(rng, arch.features, h, arch.k_order),
            readout_bias: Mat::zeros(1, h),
            head: Some(ReadoutHead {
                l1: Affine::random(rng, h, h),
                l2: Affine::random(rng, h, arch.control_width),
                saturation: arch.saturation,
            }),
            support_kind: arch.support_kind,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_proximity_graph, support_matrix, SupportKind};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_support(rng: &mut StdRng, n: usize) -> SupportMatrix {
        loop {
            let pos = Mat::from_fn(n, 2, |_, _| rng.gen_range(0.0..2.5));
            if let Ok(g) = build_proximity_graph(&pos, 1.5) {
                return support_matrix(&g, SupportKind::NormalizedLaplacian);
            }
        }
    }

    fn unit_mat(rng: &mut StdRng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let mut rng = StdRng::seed_from_u64(1);
        let p = LayerParams::zeros(2, 3, 1);
        let s = random_support(&mut rng, 4);
        let x = LayerState::zeros(4, 2);
        let u = unit_mat(&mut rng, 4, 3);
        let (next, gates) = layer_forward(&p, &s, &x, &u).unwrap();
        assert!(gates.forget.data().iter().all(|&g| g == 0.5));
        assert!(gates.input.data().iter().all(|&g| g == 0.5));
        assert_eq!(next.mat(), &Mat::zeros(4, 2));
    }

    #[test]
    fn large_state_bias_saturates_toward_one() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut p = LayerParams::zeros(2, 3, 1);
        p.state_bias = Mat::from_fn(1, 2, |_, _| 10.0);
        let s = random_support(&mut rng, 4);
        let (next, _) = layer_forward(&p, &s, &LayerState::zeros(4, 2), &unit_mat(&mut rng, 4, 3)).unwrap();
        for &v in next.mat().data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_input_out_of_unit_ball() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = LayerParams::zeros(2, 3, 1);
        let s = random_support(&mut rng, 4);
        let mut u = Mat::zeros(4, 3);
        u.set(0, 0, 1.5);
        assert!(matches!(
            layer_forward(&p, &s, &LayerState::zeros(4, 2), &u),
            Err(GgnnError::InputOutOfUnitBall(_))
        ));
    }

    /// Straight-line transcription of the update equations with explicit
    /// matrix powers, kept independent of the production path.
    fn transcription_oracle(p: &LayerParams, s: &Mat, x: &Mat, u: &Mat) -> Mat {
        let filt = |bank: &FilterBank, sig: &Mat| -> Mat {
            let n = sig.rows();
            let mut acc = Mat::zeros(n, bank.output_width());
            let mut power = Mat::identity(n);
            for tap in bank.taps() {
                acc.add_assign(&power.matmul(sig).matmul(tap));
                power = s.matmul(&power);
            }
            acc
        };
        let n = x.rows();
        let f = p.features();
        let q_in = Mat::from_fn(n, f, |i, j| {
            logistic(
                filt(&p.input_x, x).get(i, j) + filt(&p.input_u, u).get(i, j) + p.input_bias.get(0, j),
            )
        });
        let q_f = Mat::from_fn(n, f, |i, j| {
            logistic(
                filt(&p.forget_x, x).get(i, j) + filt(&p.forget_u, u).get(i, j)
                    + p.forget_bias.get(0, j),
            )
        });
        Mat::from_fn(n, f, |i, j| {
            (q_f.get(i, j) * filt(&p.state_x, x).get(i, j)
                + q_in.get(i, j) * filt(&p.state_u, u).get(i, j)
                + p.state_bias.get(0, j))
            .tanh()
        })
    }

    #[test]
    fn layer_matches_transcription_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let mut p = LayerParams::random(&mut rng, 2, 2, 1);
            p.state_bias = unit_mat(&mut rng, 1, 2).scale(0.3);
            p.forget_bias = unit_mat(&mut rng, 1, 2).scale(0.3);
            p.input_bias = unit_mat(&mut rng, 1, 2).scale(0.3);
            let s = random_support(&mut rng, 3);
            let x = LayerState::new(unit_mat(&mut rng, 3, 2)).unwrap();
            let u = unit_mat(&mut rng, 3, 2);
            let (next, _) = layer_forward(&p, &s, &x, &u).unwrap();
            let expect = transcription_oracle(&p, s.entries(), x.mat(), &u);
            for (a, b) in next.mat().data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn state_stays_strictly_inside_unit_box() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let p = LayerParams::random(&mut rng, 3, 2, 2);
            let s = random_support(&mut rng, 4);
            let x = LayerState::new(unit_mat(&mut rng, 4, 3)).unwrap();
            let u = unit_mat(&mut rng, 4, 2);
            let (next, gates) = layer_forward(&p, &s, &x, &u).unwrap();
            assert!(next.mat().data().iter().all(|v| v.abs() < 1.0));
            assert!(gates.forget.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
            assert!(gates.input.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
        }
    }

    #[test]
    fn gate_bounds_examples() {
        let p = LayerParams::zeros(2, 2, 1);
        let (f, i) = gate_bounds(&p, 1.0);
        assert_eq!(f, 0.5);
        assert_eq!(i, 0.5);

        // forget_x and forget_u each with stacked norm 1, zero bias.
        let mut p = LayerParams::zeros(1, 1, 0);
        p.forget_x = FilterBank::new(vec![Mat::from_rows(&[vec![1.0]])]);
        p.forget_u = FilterBank::new(vec![Mat::from_rows(&[vec![-1.0]])]);
        let (f, _) = gate_bounds(&p, 1.0);
        assert!((f - 0.8807970779778823).abs() < 1e-12);
    }

    #[test]
    fn gate_bounds_dominate_sampled_activations() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..20 {
            let p = LayerParams::random(&mut rng, 2, 3, 2);
            let s = random_support(&mut rng, 4);
            let s_k = crate::graph::stacked_shift_norm(&s, p.k_order());
            let (bf, bi) = gate_bounds(&p, s_k);
            for _ in 0..50 {
                let x = LayerState::new(unit_mat(&mut rng, 4, 2)).unwrap();
                let u = unit_mat(&mut rng, 4, 3);
                let (_, gates) = layer_forward(&p, &s, &x, &u).unwrap();
                assert!(gates.forget.sup_norm() <= bf + 1e-12);
                assert!(gates.input.sup_norm() <= bi + 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = StdRng::seed_from_u64(7);
        let p = LayerParams::random(&mut rng, 3, 2, 2);
        let s = random_support(&mut rng, 5);
        let x = LayerState::new(unit_mat(&mut rng, 5, 3)).unwrap();
        let u = unit_mat(&mut rng, 5, 2);
        let (next, _) = layer_forward(&p, &s, &x, &u).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let pm = Mat::from_fn(5, 5, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let s_p = SupportMatrix::from_mat(s.kind(), pm.matmul(s.entries()).matmul_nt(&pm));
        let x_p = LayerState::new(pm.matmul(x.mat())).unwrap();
        let u_p = pm.matmul(&u);
        let (next_p, _) = layer_forward(&p, &s_p, &x_p, &u_p).unwrap();
        let expect = pm.matmul(next.mat());
        for (a, b) in next_p.mat().data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn delayed_equals_instantaneous_on_static_history() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..20 {
            let p = LayerParams::random(&mut rng, 2, 2, 2);
            let s = random_support(&mut rng, 3);
            let x = LayerState::new(unit_mat(&mut rng, 3, 2)).unwrap();
            let u = unit_mat(&mut rng, 3, 2);
            let mut xh = SignalHistory::new(2);
            let mut uh = SignalHistory::new(2);
            xh.warm_start(0, x.mat(), &s);
            uh.warm_start(0, &u, &s);
            let delayed = delayed_forward(&p, &xh, &uh).unwrap();
            let (instant, _) = layer_forward(&p, &s, &x, &u).unwrap();
            assert_eq!(delayed.mat(), instant.mat(), "must collapse bitwise");
        }
    }

    #[test]
    fn delayed_matches_transcription_on_time_varying_supports() {
        let mut rng = StdRng::seed_from_u64(9);
        let k = 1;
        let p = LayerParams::random(&mut rng, 2, 2, k);
        let signals_x: Vec<Mat> = (0..=k).map(|_| unit_mat(&mut rng, 3, 2)).collect();
        let signals_u: Vec<Mat> = (0..=k).map(|_| unit_mat(&mut rng, 3, 2)).collect();
        let supports: Vec<SupportMatrix> = (0..=k).map(|_| random_support(&mut rng, 3)).collect();
        let mut xh = SignalHistory::new(k);
        let mut uh = SignalHistory::new(k);
        for t in 0..=k {
            xh.push(t as i64, signals_x[t].clone(), supports[t].clone()).unwrap();
            uh.push(t as i64, signals_u[t].clone(), supports[t].clone()).unwrap();
        }
        let got = delayed_forward(&p, &xh, &uh).unwrap();

        // Transcription with K=1: tap 0 on the newest signal, tap 1 on the
        // older signal through the newest support.
        let filt = |bank: &FilterBank, newest: &Mat, older: &Mat| -> Mat {
            let mut acc = newest.matmul(&bank.taps()[0]);
            acc.add_assign(&supports[1].entries().matmul(older).matmul(&bank.taps()[1]));
            acc
        };
        let f = p.features();
        let q_in = filt(&p.input_x, &signals_x[1], &signals_x[0])
            .add(&filt(&p.input_u, &signals_u[1], &signals_u[0]))
            .broadcast_row_add(&p.input_bias)
            .map(logistic);
        let q_f = filt(&p.forget_x, &signals_x[1], &signals_x[0])
            .add(&filt(&p.forget_u, &signals_u[1], &signals_u[0]))
            .broadcast_row_add(&p.forget_bias)
            .map(logistic);
        let expect = Mat::from_fn(3, f, |i, j| {
            (q_f.get(i, j) * filt(&p.state_x, &signals_x[1], &signals_x[0]).get(i, j)
                + q_in.get(i, j) * filt(&p.state_u, &signals_u[1], &signals_u[0]).get(i, j)
                + p.state_bias.get(0, j))
            .tanh()
        });
        for (a, b) in got.mat().data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn deep_forward_pass_through_readout() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut layer = LayerParams::random(&mut rng, 3, 2, 1);
        layer.state_bias = unit_mat(&mut rng, 1, 3).scale(0.5);
        // Readout: K=0 filter picking the first two state features, no head.
        let pick = Mat::from_fn(3, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let net = NetworkParams {
            encoder: None,
            layers: vec![layer],
            readout: FilterBank::new(vec![pick]),
            readout_bias: Mat::zeros(1, 2),
            head: None,
            support_kind: SupportKind::NormalizedLaplacian,
        };
        net.validate().unwrap();
        let s = random_support(&mut rng, 4);
        let states = net.zero_states(4);
        let u = unit_mat(&mut rng, 4, 2);
        let (y, new_states) = deep_forward(&net, &s, &states, &u).unwrap();
        for i in 0..4 {
            assert_eq!(y.get(i, 0), new_states[0].mat().get(i, 0));
            assert_eq!(y.get(i, 1), new_states[0].mat().get(i, 1));
        }
    }

    #[test]
    fn deep_forward_constant_bias_readout() {
        let mut rng = StdRng::seed_from_u64(11);
        let layer = LayerParams::random(&mut rng, 3, 2, 1);
        let net = NetworkParams {
            encoder: None,
            layers: vec![layer],
            readout: FilterBank::zeros(3, 2, 1),
            readout_bias: Mat::from_rows(&[vec![0.7, -0.2]]),
            head: None,
            support_kind: SupportKind::NormalizedLaplacian,
        };
        let s = random_support(&mut rng, 4);
        let (y, _) = deep_forward(&net, &s, &net.zero_states(4), &unit_mat(&mut rng, 4, 2)).unwrap();
        for i in 0..4 {
            assert_eq!(y.get(i, 0), 0.7);
            assert_eq!(y.get(i, 1), -0.2);
        }
    }

    #[test]
    fn deep_forward_matches_layerwise_composition() {
        let mut rng = StdRng::seed_from_u64(12);
        let arch = Architecture {
            raw_input_width: 4,
            hidden_width: 6,
            features: 3,
            k_order: 1,
            n_layers: 2,
            control_width: 2,
            saturation: 5.0,
            support_kind: SupportKind::NormalizedLaplacian,
        };
        let net = NetworkParams::random(&arch, &mut rng);
        net.validate().unwrap();
        let s = random_support(&mut rng, 4);
        let states = net.zero_states(4);
        let raw = Mat::from_fn(4, 4, |_, _| rng.gen_range(-3.0..3.0));
        let (y, new_states) = deep_forward(&net, &s, &states, &raw).unwrap();

        // Composition oracle: encoder, two explicit layer updates, readout.
        let u1 = net.encoder.as_ref().unwrap().forward(&raw);
        let (x1, _) = layer_forward(&net.layers[0], &s, &states[0], &u1).unwrap();
        let (x2, _) = layer_forward(&net.layers[1], &s, &states[1], x1.mat()).unwrap();
        let mid = filter_apply(&net.readout, &s, x2.mat())
            .unwrap()
            .broadcast_row_add(&net.readout_bias);
        let expect = net.head.as_ref().unwrap().forward(&mid);
        assert_eq!(new_states[0].mat(), x1.mat());
        assert_eq!(new_states[1].mat(), x2.mat());
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert_eq!(a, b);
        }
        assert!(y.sup_norm() <= 5.0);
    }

    #[test]
    fn deep_forward_state_count_mismatch() {
        let mut rng = StdRng::seed_from_u64(13);
        let layer = LayerParams::random(&mut rng, 3, 2, 1);
        let net = NetworkParams {
            encoder: None,
            layers: vec![layer],
            readout: FilterBank::zeros(3, 2, 1),
            readout_bias: Mat::zeros(1, 2),
            head: None,
            support_kind: SupportKind::NormalizedLaplacian,
        };
        let s = random_support(&mut rng, 4);
        let err = deep_forward(&net, &s, &[], &Mat::zeros(4, 2)).unwrap_err();
        assert!(matches!(err, GgnnError::StateCountMismatch { .. }));
    }

    #[test]
    fn weights_json_roundtrip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(14);
        let arch = Architecture {
            raw_input_width: 10,
            hidden_width: 8,
            features: 4,
            k_order: 2,
            n_layers: 2,
            control_width: 2,
            saturation: 5.0,
            support_kind: SupportKind::NormalizedLaplacian,
        };
        let net = NetworkParams::random(&arch, &mut rng);
        let json = serde_json::to_string(&net).unwrap();
        let back: NetworkParams = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
    }

    use rand::Rng;
}
