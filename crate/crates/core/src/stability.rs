//! Closed-form stability certificates on gated layer weights.
//!
//! Signals carry the sup norm (largest entry), filter banks the operator
//! norm `FilterBank::stacked_norm`, and shift operators the induced
//! row-sum norm. With unit-bounded inputs, one layer update contracts as
//!
//! ```text
//!   |x+|      <= A  |x|  + B  |u|  + |b|
//!   |x1+-x2+| <= Ad |dx| + Bd |du| + W |dS_K|
//! ```
//!
//! where the coefficients below are explicit in the weights and an assumed
//! uniform bound on the stacked shift norm. `A <= 1` certifies
//! input-to-state stability; `Ad <= 1` certifies the incremental version
//! (trajectories forget their initial conditions). Both extend to deep
//! stacks layer by layer because a cascade inherits the property from its
//! stages; the cascade gain matrix is lower triangular with the per-layer
//! contraction factors on its diagonal.
//!
//! The margins double as a training-time regularizer: a two-slope hinge on
//! `Ad - 1 - eps` pushes layers into (or keeps them inside) the certified
//! region.

use crate::ggnn::{gate_bounds, LayerParams, NetworkParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("no contraction certificate: margin {0} is not below 1")]
    NoContraction(f64),
    #[error("invalid regularizer config: {0}")]
    InvalidConfig(String),
}

/// Two-slope hinge around the certified region, `0 < rho_minus << rho_plus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub rho_minus: f64,
    pub rho_plus: f64,
    pub epsilon: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            rho_minus: 0.01,
            rho_plus: 1.0,
            epsilon: 0.05,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<(), StabilityError> {
        if !(self.rho_minus > 0.0) || !(self.rho_plus > self.rho_minus) {
            return Err(StabilityError::InvalidConfig(format!(
                "need 0 < rho_minus < rho_plus, got {} and {}",
                self.rho_minus, self.rho_plus
            )));
        }
        Ok(())
    }
}

/// Margins and gains of one layer under the assumed support bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Contraction factor of the state map; <= 1 certifies ISS.
    pub iss_margin: f64,
    /// Incremental contraction factor; <= 1 certifies delta-ISS.
    pub diss_margin: f64,
    /// Gain from the input sup norm in the ISS bound.
    pub input_gain: f64,
    /// Gain from the input difference in the incremental bound.
    pub diss_input_gain: f64,
    /// Gain from the stacked-support difference in the incremental bound.
    pub support_gain: f64,
    /// Worst-case forget gate activation.
    pub forget_gate_bound: f64,
    /// Worst-case input gate activation.
    pub input_gate_bound: f64,
}

/// Certificate over a whole network: per-layer reports, the bounds they
/// assume, verdicts, and the cascade gain matrix (lower triangular, so its
/// eigenvalues are the per-layer incremental margins on the diagonal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub layers: Vec<LayerReport>,
    /// Assumed bound on the support norm itself.
    pub s_bar: f64,
    /// Assumed bound on the stacked `[I, S, ..., S^K]` norm.
    pub s_k_bar: f64,
    pub verdict_iss: bool,
    pub verdict_diss: bool,
    /// Row-major M x M cascade matrix assembled from (diss_margin, diss_input_gain).
    pub cascade: Vec<Vec<f64>>,
}

impl StabilityCertificate {
    /// Layers whose incremental margin exceeds 1, if any.
    pub fn offending_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.diss_margin > 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// ISS contraction factor: forget-gate bound times stacked-shift bound
/// times the state bank norm.
pub fn iss_margin(params: &LayerParams, s_k_bar: f64) -> f64 {
    let (forget_bound, _) = gate_bounds(params, s_k_bar);
    forget_bound * s_k_bar * params.state_x.stacked_norm()
}

/// Incremental contraction factor. The quarter terms come from the 1/4
/// Lipschitz constant of the logistic gates; every support slot is
/// instantiated with the stacked bound because the derivation applies the
/// bound to `[I, S, ..., S^K]`, not to S alone.
pub fn diss_margin(params: &LayerParams, _s_bar: f64, s_k_bar: f64) -> f64 {
    let (forget_bound, _) = gate_bounds(params, s_k_bar);
    let a = params.state_x.stacked_norm();
    let b = params.state_u.stacked_norm();
    let fx = params.forget_x.stacked_norm();
    let ix = params.input_x.stacked_norm();
    forget_bound * s_k_bar * a + 0.25 * s_k_bar * s_k_bar * (fx * a + ix * b)
}

/// Input and support gains `(B, Bd, W)` of the ISS and incremental bounds.
pub fn input_gains(params: &LayerParams, _s_bar: f64, s_k_bar: f64) -> (f64, f64, f64) {
    let (forget_bound, input_bound) = gate_bounds(params, s_k_bar);
    let a = params.state_x.stacked_norm();
    let b = params.state_u.stacked_norm();
    let fx = params.forget_x.stacked_norm();
    let fu = params.forget_u.stacked_norm();
    let ix = params.input_x.stacked_norm();
    let iu = params.input_u.stacked_norm();
    let input_gain = input_bound * s_k_bar * b;
    let diss_input_gain =
        input_bound * s_k_bar * b + 0.25 * s_k_bar * s_k_bar * (fu * a + iu * b);
    let support_gain =
        forget_bound * a + input_bound * b + 0.25 * s_k_bar * (a * (fx + fu) + b * (ix + iu));
    (input_gain, diss_input_gain, support_gain)
}

/// Evaluates every layer of the network under the assumed bounds and
/// assembles the verdicts and the cascade gain matrix.
pub fn certify(net: &NetworkParams, s_bar: f64, s_k_bar: f64) -> StabilityCertificate {
    let layers: Vec<LayerReport> = net
        .layers
        .iter()
        .map(|p| {
            let (forget_gate_bound, input_gate_bound) = gate_bounds(p, s_k_bar);
            let (input_gain, diss_input_gain, support_gain) = input_gains(p, s_bar, s_k_bar);
            LayerReport {
                iss_margin: iss_margin(p, s_k_bar),
                diss_margin: diss_margin(p, s_bar, s_k_bar),
                input_gain,
                diss_input_gain,
                support_gain,
                forget_gate_bound,
                input_gate_bound,
            }
        })
        .collect();
    let verdict_iss = layers.iter().all(|l| l.iss_margin <= 1.0);
    let verdict_diss = layers.iter().all(|l| l.diss_margin <= 1.0);
    let cascade = cascade_matrix(&layers);
    StabilityCertificate {
        layers,
        s_bar,
        s_k_bar,
        verdict_iss,
        verdict_diss,
        cascade,
    }
}

/// Lower-triangular cascade matrix: diagonal entries are the per-layer
/// incremental margins; below the diagonal, entry (i, j) is layer j's
/// margin carried upward through the input gains of layers j+1..=i.
pub fn cascade_matrix(layers: &[LayerReport]) -> Vec<Vec<f64>> {
    let m = layers.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        out[i][i] = layers[i].diss_margin;
        for j in 0..i {
            let mut gain = layers[j].diss_margin;
            for layer in &layers[j + 1..=i] {
                gain *= layer.diss_input_gain;
            }
            out[i][j] = gain;
        }
    }
    out
}

/// Two-slope hinge penalty over the per-layer incremental margins.
/// Negative below the threshold (a mild reward for slack), positive and
/// steep above it. The subgradient at the kink is zero.
pub fn stability_penalty(diss_margins: &[f64], cfg: &RegularizerConfig) -> f64 {
    diss_margins
        .iter()
        .map(|&m| {
            let z = m - 1.0 - cfg.epsilon;
            cfg.rho_minus * z.min(0.0) + cfg.rho_plus * z.max(0.0)
        })
        .sum()
}

/// Outcome of auditing a trajectory against a geometric bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundAudit {
    pub holds: bool,
    /// First step index where the bound failed, if any.
    pub first_violation: Option<usize>,
}

const AUDIT_SLACK: f64 = 1e-9;

/// Checks the iterated ISS bound
/// `|x(t)| <= A^t |x(0)| + (1-A)^{-1} (B |u| + |b|)` at every step.
/// `state_norms[t]` is the sup norm of the state after t updates.
pub fn check_iss_bound(
    state_norms: &[f64],
    iss_margin: f64,
    input_gain: f64,
    input_norm: f64,
    bias_norm: f64,
) -> Result<BoundAudit, StabilityError> {
    if !(iss_margin < 1.0) {
        return Err(StabilityError::NoContraction(iss_margin));
    }
    let steady = (input_gain * input_norm + bias_norm) / (1.0 - iss_margin);
    audit(state_norms, iss_margin, steady)
}

/// Checks the incremental bound
/// `|x1(t)-x2(t)| <= Ad^t |dx(0)| + (1-Ad)^{-1} (Bd |du| + W |dS_K|)`.
/// `diff_norms[t]` is the sup norm of the state difference after t updates;
/// the input and support difference norms are taken over the whole run.
pub fn check_diss_bound(
    diff_norms: &[f64],
    diss_margin: f64,
    diss_input_gain: f64,
    support_gain: f64,
    input_diff_norm: f64,
    support_diff_norm: f64,
) -> Result<BoundAudit, StabilityError> {
    if !(diss_margin < 1.0) {
        return Err(StabilityError::NoContraction(diss_margin));
    }
    let steady =
        (diss_input_gain * input_diff_norm + support_gain * support_diff_norm) / (1.0 - diss_margin);
    audit(diff_norms, diss_margin, steady)
}

fn audit(norms: &[f64], factor: f64, steady: f64) -> Result<BoundAudit, StabilityError> {
    let initial = norms.first().copied().unwrap_or(0.0);
    let mut decay = 1.0;
    for (t, &norm) in norms.iter().enumerate() {
        if norm > decay * initial + steady + AUDIT_SLACK {
            return Ok(BoundAudit {
                holds: false,
                first_violation: Some(t),
            });
        }
        decay *= factor;
    }
    Ok(BoundAudit {
        holds: true,
        first_violation: None,
    })
}
