//! Polynomial graph filters and their unit-delayed variant.
//!
//! A filter bank holds K+1 tap blocks H_0..H_K and realizes
//! sum_k S^k x H_k. The production path never forms matrix powers: each
//! tap reuses the previous one-hop shift, mirroring how the computation
//! distributes over the team. When communication takes one sampling step
//! per hop, tap k instead sees the signal from k steps ago shifted by the
//! product of the k most recent supports (newest support leftmost); the
//! `SignalHistory` ring buffer carries exactly that window.

use crate::graph::{apply_shift, SupportMatrix};
use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("dimension mismatch: filter expects {expected} input features, signal has {got}")]
    InputWidthMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: support is {support}x{support}, signal has {signal} rows")]
    AgentCountMismatch { support: usize, signal: usize },
    #[error("insufficient history: need {needed} entries, have {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("history timestamps must be strictly increasing ({last} then {pushed})")]
    NonIncreasingTimestamp { last: i64, pushed: i64 },
}

/// K+1 weight blocks, each `input_width x output_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    taps: Vec<Mat>,
}

impl FilterBank {
    pub fn new(taps: Vec<Mat>) -> Self {
        assert!(!taps.is_empty(), "a filter bank needs at least tap H_0");
        let shape = taps[0].shape();
        for t in &taps {
            assert_eq!(t.shape(), shape, "all taps share one shape");
        }
        Self { taps }
    }

    pub fn zeros(input_width: usize, output_width: usize, k_order: usize) -> Self {
        Self::new(vec![Mat::zeros(input_width, output_width); k_order + 1])
    }

    pub fn k_order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.taps[0].rows()
    }

    pub fn output_width(&self) -> usize {
        self.taps[0].cols()
    }

    pub fn taps(&self) -> &[Mat] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [Mat] {
        &mut self.taps
    }

    pub fn scale_taps(&mut self, factor: f64) {
        for t in &mut self.taps {
            *t = t.scale(factor);
        }
    }

    /// Operator norm of the bank acting on sup-norm signals: the max over
    /// taps and output features of the absolute input-weight column sum.
    /// Equivalently the induced infinity norm of the transposed tap stack
    /// `[H_0, ..., H_K]ᵀ`.
    pub fn stacked_norm(&self) -> f64 {
        let mut best = 0.0_f64;
        for tap in &self.taps {
            for f in 0..tap.cols() {
                let col_sum: f64 = (0..tap.rows()).map(|g| tap.get(g, f).abs()).sum();
                best = best.max(col_sum);
            }
        }
        best
    }
}

/// `sum_k S^k x H_k`, computed by iterated one-hop shifts.
pub fn filter_apply(bank: &FilterBank, support: &SupportMatrix, x: &Mat) -> Result<Mat, FilterError> {
    if x.cols() != bank.input_width() {
        return Err(FilterError::InputWidthMismatch {
            expected: bank.input_width(),
            got: x.cols(),
        });
    }
    if support.n() != x.rows() {
        return Err(FilterError::AgentCountMismatch {
            support: support.n(),
            signal: x.rows(),
        });
    }
    let mut shifted = x.clone();
    let mut acc = shifted.matmul(&bank.taps[0]);
    for tap in &bank.taps[1..] {
        shifted = apply_shift(support, &shifted).expect("dimensions already checked");
        acc.add_assign(&shifted.matmul(tap));
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
struct HistoryEntry {
    timestamp: i64,
    signal: Mat,
    support: SupportMatrix,
}

/// Ring buffer of the last K+1 signals and the supports active when each
/// arrived. Single-writer: the simulation loop pushes, filters read.
#[derive(Debug, Clone)]
pub struct SignalHistory {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl SignalHistory {
    pub fn new(k_order: usize) -> Self {
        Self {
            capacity: k_order + 1,
            entries: VecDeque::with_capacity(k_order + 2),
        }
    }

    pub fn push(&mut self, timestamp: i64, signal: Mat, support: SupportMatrix) -> Result<(), FilterError> {
        if let Some(last) = self.entries.back() {
            if timestamp <= last.timestamp {
                return Err(FilterError::NonIncreasingTimestamp {
                    last: last.timestamp,
                    pushed: timestamp,
                });
            }
        }
        self.entries.push_back(HistoryEntry {
            timestamp,
            signal,
            support,
        });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Fills the buffer with K+1 copies of one observation, stamped so the
    /// newest sits at `timestamp`. Models a loop that has been watching a
    /// frozen scene long enough for every hop to have propagated.
    pub fn warm_start(&mut self, timestamp: i64, signal: &Mat, support: &SupportMatrix) {
        self.entries.clear();
        for back in (0..self.capacity).rev() {
            self.entries.push_back(HistoryEntry {
                timestamp: timestamp - back as i64,
                signal: signal.clone(),
                support: support.clone(),
            });
        }
    }

    pub fn is_warm(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Signal from `age` steps before the newest entry.
    fn signal_back(&self, age: usize) -> &Mat {
        &self.entries[self.entries.len() - 1 - age].signal
    }

    /// Support attached to the entry `age` steps before the newest.
    fn support_back(&self, age: usize) -> &SupportMatrix {
        &self.entries[self.entries.len() - 1 - age].support
    }

    pub fn latest_signal(&self) -> Option<&Mat> {
        self.entries.back().map(|e| &e.signal)
    }
}

/// Unit-delayed filter: tap k applies the product of the k most recent
/// supports (newest first) to the signal from k steps ago.
///
/// With a static support and a constant buffered signal this reduces to
/// `filter_apply`, bit for bit: both paths issue the same shift and tap
/// multiplications in the same order.
pub fn delayed_filter_apply(bank: &FilterBank, history: &SignalHistory) -> Result<Mat, FilterError> {
    let needed = bank.k_order() + 1;
    if history.len() < needed {
        return Err(FilterError::InsufficientHistory {
            needed,
            got: history.len(),
        });
    }
    let newest = history.signal_back(0);
    if newest.cols() != bank.input_width() {
        return Err(FilterError::InputWidthMismatch {
            expected: bank.input_width(),
            got: newest.cols(),
        });
    }
    let mut acc = newest.matmul(&bank.taps[0]);
    for (k, tap) in bank.taps.iter().enumerate().skip(1) {
        // Oldest-to-newest application leaves the newest support leftmost
        // in the accumulated product.
        let mut shifted = history.signal_back(k).clone();
        for age in (0..k).rev() {
            shifted = apply_shift(history.support_back(age), &shifted).map_err(|_| {
                FilterError::AgentCountMismatch {
                    support: history.support_back(age).n(),
                    signal: shifted.rows(),
                }
            })?;
        }
        acc.add_assign(&shifted.matmul(tap));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_proximity_graph, support_matrix, SupportKind};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_support(rng: &mut StdRng, n: usize) -> SupportMatrix {
        loop {
            let pos = Mat::from_fn(n, 2, |_, _| rng.gen_range(0.0..2.5));
            if let Ok(g) = build_proximity_graph(&pos, 1.5) {
                return support_matrix(&g, SupportKind::NormalizedLaplacian);
            }
        }
    }

    fn random_bank(rng: &mut StdRng, g_in: usize, f_out: usize, k: usize) -> FilterBank {
        FilterBank::new(
            (0..=k)
                .map(|_| Mat::from_fn(g_in, f_out, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn identity_tap_is_identity_filter() {
        let mut rng = StdRng::seed_from_u64(1);
        let s = random_support(&mut rng, 4);
        let bank = FilterBank::new(vec![Mat::identity(3)]);
        let x = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(filter_apply(&bank, &s, &x).unwrap(), x);
    }

    #[test]
    fn zero_support_kills_higher_taps() {
        let mut rng = StdRng::seed_from_u64(2);
        let s = SupportMatrix::from_mat(SupportKind::Adjacency, Mat::zeros(4, 4));
        let bank = random_bank(&mut rng, 3, 2, 3);
        let x = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let out = filter_apply(&bank, &s, &x).unwrap();
        assert_eq!(out, x.matmul(&bank.taps()[0]));
    }

    #[test]
    fn matches_explicit_power_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..30 {
            let s = random_support(&mut rng, 4);
            let bank = random_bank(&mut rng, 3, 2, 2);
            let x = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let got = filter_apply(&bank, &s, &x).unwrap();
            // Oracle with matrix powers formed directly.
            let mut expect = Mat::zeros(4, 2);
            let mut power = Mat::identity(4);
            for tap in bank.taps() {
                expect.add_assign(&power.matmul(&x).matmul(tap));
                power = power.matmul(s.entries());
            }
            for (a, b) in got.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn linearity() {
        let mut rng = StdRng::seed_from_u64(4);
        let s = random_support(&mut rng, 5);
        let bank = random_bank(&mut rng, 2, 3, 2);
        let x = Mat::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = Mat::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let (a, b) = (0.37, -1.91);
        let lhs = filter_apply(&bank, &s, &x.scale(a).add(&y.scale(b))).unwrap();
        let rhs = filter_apply(&bank, &s, &x)
            .unwrap()
            .scale(a)
            .add(&filter_apply(&bank, &s, &y).unwrap().scale(b));
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn sup_norm_bound_holds() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let s = random_support(&mut rng, 4);
            let bank = random_bank(&mut rng, 3, 2, 2);
            let x = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let out = filter_apply(&bank, &s, &x).unwrap();
            let bound = crate::graph::stacked_shift_norm(&s, bank.k_order())
                * bank.stacked_norm()
                * x.sup_norm();
            assert!(out.sup_norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn stacked_norm_is_max_tap_column_sum() {
        // One tap with a heavy column: the operator norm must see the column
        // sum (3.0), not the largest row sum (2.0).
        let tap0 = Mat::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]);
        let tap1 = Mat::zeros(2, 2);
        let bank = FilterBank::new(vec![tap0, tap1]);
        assert_eq!(bank.stacked_norm(), 3.0);
    }

    #[test]
    fn delayed_matches_static_filter() {
        let mut rng = StdRng::seed_from_u64(6);
        let s = random_support(&mut rng, 3);
        let bank = random_bank(&mut rng, 2, 2, 2);
        let x = Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let mut hist = SignalHistory::new(2);
        hist.warm_start(0, &x, &s);
        let delayed = delayed_filter_apply(&bank, &hist).unwrap();
        let instant = filter_apply(&bank, &s, &x).unwrap();
        assert_eq!(delayed, instant, "static history must collapse bitwise");
    }

    #[test]
    fn delayed_k0_ignores_supports() {
        let mut rng = StdRng::seed_from_u64(7);
        let bank = random_bank(&mut rng, 2, 2, 0);
        let mut hist = SignalHistory::new(0);
        let x = Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        hist.push(0, x.clone(), random_support(&mut rng, 3)).unwrap();
        let out = delayed_filter_apply(&bank, &hist).unwrap();
        assert_eq!(out, x.matmul(&bank.taps()[0]));
    }

    #[test]
    fn delayed_matches_direct_product_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..20 {
            let k = 2;
            let bank = random_bank(&mut rng, 2, 2, k);
            let mut hist = SignalHistory::new(k);
            let signals: Vec<Mat> = (0..=k)
                .map(|_| Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let supports: Vec<SupportMatrix> =
                (0..=k).map(|_| random_support(&mut rng, 3)).collect();
            for t in 0..=k {
                hist.push(t as i64, signals[t].clone(), supports[t].clone()).unwrap();
            }
            let got = delayed_filter_apply(&bank, &hist).unwrap();
            // Direct evaluation with explicit support products, newest first.
            let mut expect = signals[k].matmul(&bank.taps()[0]);
            for tap_k in 1..=k {
                let mut product = Mat::identity(3);
                for age in 0..tap_k {
                    product = product.matmul(supports[k - age].entries());
                }
                expect.add_assign(&product.matmul(&signals[k - tap_k]).matmul(&bank.taps()[tap_k]));
            }
            for (a, b) in got.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cold_history_is_an_error() {
        let bank = FilterBank::zeros(2, 2, 2);
        let hist = SignalHistory::new(2);
        assert!(matches!(
            delayed_filter_apply(&bank, &hist),
            Err(FilterError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn timestamps_must_increase() {
        let mut rng = StdRng::seed_from_u64(9);
        let s = random_support(&mut rng, 3);
        let mut hist = SignalHistory::new(1);
        hist.push(4, Mat::zeros(3, 2), s.clone()).unwrap();
        assert!(matches!(
            hist.push(4, Mat::zeros(3, 2), s),
            Err(FilterError::NonIncreasingTimestamp { .. })
        ));
    }
}
