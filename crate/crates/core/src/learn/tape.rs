//! Matrix-level reverse-mode differentiation.
//!
//! A `Tape` records the forward pass as a flat list of primitive matrix
//! operations (affine maps, graph shifts, elementwise nonlinearities,
//! Hadamard products, and the norm reductions the stability margins are
//! built from) and replays it backward to accumulate gradients for every
//! leaf it touched. Scalars ride along as 1x1 matrices.
//!
//! Norm reductions backpropagate through the attaining entry with
//! first-index tie-breaking, and the two hinge halves have zero gradient
//! exactly at their kink.

use crate::mat::Mat;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("non-finite intermediate at operation {op_index}")]
    NonFinite { op_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    /// `S * x` with a constant support.
    Shift { support: Rc<Mat>, x: usize },
    /// Signal plus a 1 x F bias row broadcast to every agent row.
    BroadcastAdd { x: usize, bias: usize },
    Tanh(usize),
    /// `scale * tanh(x)`, the saturated output stage.
    ScaledTanh(usize, f64),
    Logistic(usize),
    /// `max(0, x)` elementwise; gradient zero at the kink.
    PosPart(usize),
    /// `min(0, x)` elementwise; gradient zero at the kink.
    NegPart(usize),
    SumAll(usize),
    /// Mean squared deviation from a constant target.
    MeanSquaredError { pred: usize, target: Rc<Mat> },
    /// Filter-bank operator norm: max over taps and output columns of the
    /// absolute input-weight column sum.
    BankNorm { taps: Vec<usize> },
    /// Smooth upper bound of `BankNorm`: log-sum-exp over the column sums
    /// at the given temperature. Always at least the hard norm, within
    /// `tau * ln(#columns)` of it, and its gradient reaches every column.
    SoftBankNorm { taps: Vec<usize>, tau: f64 },
    /// Largest absolute entry.
    MaxAbs(usize),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Mat::from_vec(1, 1, vec![value]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value);
        self.push(value, Op::Hadamard(a.0, b.0))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(value, Op::AddConst(a.0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn shift(&mut self, support: &Rc<Mat>, x: NodeId) -> NodeId {
        let value = support.matmul(&self.nodes[x.0].value);
        self.push(
            value,
            Op::Shift {
                support: Rc::clone(support),
                x: x.0,
            },
        )
    }

    pub fn broadcast_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.broadcast_row_add(&self.nodes[bias.0].value);
        self.push(value, Op::BroadcastAdd { x: x.0, bias: bias.0 })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(x.0))
    }

    pub fn scaled_tanh(&mut self, x: NodeId, scale: f64) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| scale * v.tanh());
        self.push(value, Op::ScaledTanh(x.0, scale))
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(crate::ggnn::logistic);
        self.push(value, Op::Logistic(x.0))
    }

    pub fn pos_part(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(value, Op::PosPart(x.0))
    }

    pub fn neg_part(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.min(0.0));
        self.push(value, Op::NegPart(x.0))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(x.0))
    }

    pub fn mean_squared_error(&mut self, pred: NodeId, target: &Rc<Mat>) -> NodeId {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.shape(), target.shape(), "mse target shape mismatch");
        let count = (p.rows() * p.cols()) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Mat::from_vec(1, 1, vec![s / count]),
            Op::MeanSquaredError {
                pred: pred.0,
                target: Rc::clone(target),
            },
        )
    }

    fn bank_norm_value(taps: &[&Mat]) -> (f64, usize, usize) {
        let mut best = 0.0_f64;
        let (mut best_tap, mut best_col) = (0usize, 0usize);
        for (k, tap) in taps.iter().enumerate() {
            for f in 0..tap.cols() {
                let col_sum: f64 = (0..tap.rows()).map(|g| tap.get(g, f).abs()).sum();
                if col_sum > best {
                    best = col_sum;
                    best_tap = k;
                    best_col = f;
                }
            }
        }
        (best, best_tap, best_col)
    }

    pub fn bank_norm(&mut self, taps: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = taps.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, _, _) = Self::bank_norm_value(&mats);
        self.push(
            Mat::from_vec(1, 1, vec![value]),
            Op::BankNorm {
                taps: taps.iter().map(|id| id.0).collect(),
            },
        )
    }

    fn column_sums(taps: &[&Mat]) -> Vec<f64> {
        let mut sums = Vec::new();
        for tap in taps {
            for f in 0..tap.cols() {
                sums.push((0..tap.rows()).map(|g| tap.get(g, f).abs()).sum());
            }
        }
        sums
    }

    fn soft_max_value(sums: &[f64], tau: f64) -> f64 {
        let m = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + tau * sums.iter().map(|&c| ((c - m) / tau).exp()).sum::<f64>().ln()
    }

    pub fn soft_bank_norm(&mut self, taps: &[NodeId], tau: f64) -> NodeId {
        assert!(tau > 0.0, "temperature must be positive");
        let mats: Vec<&Mat> = taps.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = Self::soft_max_value(&Self::column_sums(&mats), tau);
        self.push(
            Mat::from_vec(1, 1, vec![value]),
            Op::SoftBankNorm {
                taps: taps.iter().map(|id| id.0).collect(),
                tau,
            },
        )
    }

    pub fn max_abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.sup_norm();
        self.push(Mat::from_vec(1, 1, vec![value]), Op::MaxAbs(x.0))
    }

    /// Backpropagates a unit gradient from `root` (a 1x1 node) and returns
    /// per-node gradients. Fails on the first non-finite intermediate.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(TapeError::NonFinite { op_index: i });
            }
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    accumulate(&mut grads, *a, grad.hadamard(&self.nodes[*b].value));
                    accumulate(&mut grads, *b, grad.hadamard(&self.nodes[*a].value));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, grad.scale(*s)),
                Op::AddConst(a) => accumulate(&mut grads, *a, grad),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, grad.matmul_nt(&self.nodes[*b].value));
                    accumulate(&mut grads, *b, self.nodes[*a].value.matmul_tn(&grad));
                }
                Op::Shift { support, x } => {
                    accumulate(&mut grads, *x, support.matmul_tn(&grad));
                }
                Op::BroadcastAdd { x, bias } => {
                    let col_sums = Mat::from_fn(1, grad.cols(), |_, j| {
                        (0..grad.rows()).map(|i| grad.get(i, j)).sum()
                    });
                    accumulate(&mut grads, *x, grad);
                    accumulate(&mut grads, *bias, col_sums);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, grad.hadamard(&y.map(|v| 1.0 - v * v)));
                }
                Op::ScaledTanh(a, s) => {
                    let y = &self.nodes[idx].value;
                    let deriv = y.map(|v| s - v * v / s);
                    accumulate(&mut grads, *a, grad.hadamard(&deriv));
                }
                Op::Logistic(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, grad.hadamard(&y.map(|v| v * (1.0 - v))));
                }
                Op::PosPart(a) => {
                    let x = &self.nodes[*a].value;
                    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, grad.hadamard(&mask));
                }
                Op::NegPart(a) => {
                    let x = &self.nodes[*a].value;
                    let mask = x.map(|v| if v < 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, grad.hadamard(&mask));
                }
                Op::SumAll(a) => {
                    let g = grad.get(0, 0);
                    let shape = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Mat::from_fn(shape.0, shape.1, |_, _| g));
                }
                Op::MeanSquaredError { pred, target } => {
                    let g = grad.get(0, 0);
                    let p = &self.nodes[*pred].value;
                    let count = (p.rows() * p.cols()) as f64;
                    let gp = Mat::from_fn(p.rows(), p.cols(), |i, j| {
                        g * 2.0 * (p.get(i, j) - target.get(i, j)) / count
                    });
                    accumulate(&mut grads, *pred, gp);
                }
                Op::BankNorm { taps } => {
                    let g = grad.get(0, 0);
                    let mats: Vec<&Mat> = taps.iter().map(|&t| &self.nodes[t].value).collect();
                    let (_, tap_idx, col) = Self::bank_norm_value(&mats);
                    let tap = mats[tap_idx];
                    let mut gt = Mat::zeros(tap.rows(), tap.cols());
                    for gidx in 0..tap.rows() {
                        gt.set(gidx, col, g * tap.get(gidx, col).signum_or_zero());
                    }
                    accumulate(&mut grads, taps[tap_idx], gt);
                }
                Op::SoftBankNorm { taps, tau } => {
                    let g = grad.get(0, 0);
                    let mats: Vec<&Mat> = taps.iter().map(|&t| &self.nodes[t].value).collect();
                    let sums = Self::column_sums(&mats);
                    let m = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = sums.iter().map(|&c| ((c - m) / tau).exp()).sum();
                    let mut cursor = 0;
                    for (t, tap) in mats.iter().enumerate() {
                        let mut gt = Mat::zeros(tap.rows(), tap.cols());
                        for f in 0..tap.cols() {
                            let weight = ((sums[cursor] - m) / tau).exp() / total;
                            cursor += 1;
                            for gidx in 0..tap.rows() {
                                gt.set(gidx, f, g * weight * tap.get(gidx, f).signum_or_zero());
                            }
                        }
                        accumulate(&mut grads, taps[t], gt);
                    }
                }
                Op::MaxAbs(a) => {
                    let g = grad.get(0, 0);
                    let x = &self.nodes[*a].value;
                    let mut gx = Mat::zeros(x.rows(), x.cols());
                    let mut best = 0.0_f64;
                    let mut best_pos = None;
                    for i in 0..x.rows() {
                        for j in 0..x.cols() {
                            if x.get(i, j).abs() > best {
                                best = x.get(i, j).abs();
                                best_pos = Some((i, j));
                            }
                        }
                    }
                    if let Some((i, j)) = best_pos {
                        gx.set(i, j, g * x.get(i, j).signum_or_zero());
                    }
                    accumulate(&mut grads, *a, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}
