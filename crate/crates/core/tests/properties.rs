//! Property tests over the numeric invariants that hold for arbitrary
//! inputs, not just the seeded samples the unit tests use.

use proptest::prelude::*;
use sggnn::filters::{filter_apply, FilterBank};
use sggnn::flocking::flocking_cost;
use sggnn::graph::{
    build_proximity_graph, inf_norm, stacked_shift_norm, stacked_shift_norm_bound, support_matrix,
    SupportKind,
};
use sggnn::mat::Mat;
use sggnn::stability::{stability_penalty, RegularizerConfig};

fn mat_strategy(rows: usize, cols: usize, bound: f64) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-bound..bound, rows * cols)
        .prop_map(move |data| Mat::from_vec(rows, cols, data))
}

fn positions_strategy(n: usize) -> impl Strategy<Value = Mat> {
    // Grid-snapped coordinates cannot coincide across agents.
    proptest::collection::vec(0..60i32, n * 2).prop_filter_map("distinct positions", move |grid| {
        let m = Mat::from_vec(n, 2, grid.iter().map(|&g| g as f64 * 0.1).collect());
        for i in 0..n {
            for j in (i + 1)..n {
                if m.row(i) == m.row(j) {
                    return None;
                }
            }
        }
        Some(m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_linear(
        x in mat_strategy(4, 2, 1.0),
        y in mat_strategy(4, 2, 1.0),
        taps in proptest::collection::vec(mat_strategy(2, 3, 1.0), 3),
        positions in positions_strategy(4),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let graph = build_proximity_graph(&positions, 2.0).unwrap();
        let support = support_matrix(&graph, SupportKind::NormalizedLaplacian);
        let bank = FilterBank::new(taps);
        let combined = filter_apply(&bank, &support, &x.scale(a).add(&y.scale(b))).unwrap();
        let separate = filter_apply(&bank, &support, &x)
            .unwrap()
            .scale(a)
            .add(&filter_apply(&bank, &support, &y).unwrap().scale(b));
        for (p, q) in combined.data().iter().zip(separate.data()) {
            prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }

    #[test]
    fn filter_norm_bound_holds(
        x in mat_strategy(4, 2, 1.0),
        taps in proptest::collection::vec(mat_strategy(2, 3, 1.0), 3),
        positions in positions_strategy(4),
    ) {
        let graph = build_proximity_graph(&positions, 2.0).unwrap();
        let support = support_matrix(&graph, SupportKind::NormalizedLaplacian);
        let bank = FilterBank::new(taps);
        let out = filter_apply(&bank, &support, &x).unwrap();
        let bound = stacked_shift_norm(&support, bank.k_order()) * bank.stacked_norm() * x.sup_norm();
        prop_assert!(out.sup_norm() <= bound + 1e-12);
    }

    #[test]
    fn stacked_bound_dominates_every_support_kind(
        positions in positions_strategy(5),
        k in 0usize..4,
    ) {
        let graph = build_proximity_graph(&positions, 2.0).unwrap();
        for kind in [SupportKind::Adjacency, SupportKind::Laplacian, SupportKind::NormalizedLaplacian] {
            let s = support_matrix(&graph, kind);
            let exact = stacked_shift_norm(&s, k);
            let bound = stacked_shift_norm_bound(inf_norm(s.entries()), k);
            prop_assert!(exact <= bound + 1e-9 * bound.max(1.0));
        }
    }

    #[test]
    fn flocking_cost_is_translation_invariant(
        v in mat_strategy(5, 2, 3.0),
        shift_x in -10.0..10.0f64,
        shift_y in -10.0..10.0f64,
    ) {
        let shifted = Mat::from_fn(5, 2, |i, j| v.get(i, j) + if j == 0 { shift_x } else { shift_y });
        prop_assert!((flocking_cost(&shifted) - flocking_cost(&v)).abs() <= 1e-12);
    }

    #[test]
    fn penalty_is_monotone_in_each_margin(
        m in 0.0..3.0f64,
        delta in 0.0..1.0f64,
        others in proptest::collection::vec(0.0..3.0f64, 0..3),
    ) {
        let cfg = RegularizerConfig::default();
        let mut low = others.clone();
        low.push(m);
        let mut high = others;
        high.push(m + delta);
        prop_assert!(stability_penalty(&low, &cfg) <= stability_penalty(&high, &cfg) + 1e-15);
    }
}
