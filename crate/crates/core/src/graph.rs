//! Communication graphs and graph shift operators.
//!
//! Agents within a given radius of each other share an undirected edge.
//! Any shift operator that respects the sparsity pattern of that graph
//! (adjacency, Laplacian, normalized Laplacian) can carry one hop of
//! neighbor-to-neighbor signal exchange; repeated application aggregates
//! k-hop neighborhoods.

use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("agent overlap: agents {0} and {1} share a position")]
    AgentOverlap(usize, usize),
    #[error("positions must be finite")]
    NonFinitePositions,
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("dimension mismatch: support is {support}x{support}, signal has {signal} rows")]
    DimensionMismatch { support: usize, signal: usize },
}

/// Undirected weighted graph over `n_agents` nodes, no self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    n_agents: usize,
    /// Edges stored once with i < j; weight > 0 means the edge exists.
    edges: Vec<(usize, usize, f64)>,
}

impl Graph {
    pub fn new(n_agents: usize, edges: Vec<(usize, usize, f64)>) -> Self {
        for &(i, j, w) in &edges {
            assert!(i < j && j < n_agents, "edge endpoints out of order or range");
            assert!(w > 0.0, "edge weights must be positive");
        }
        Self { n_agents, edges }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        self.edges.iter().any(|&(x, y, _)| x == i && y == j)
    }

    pub fn degree(&self, node: usize) -> f64 {
        self.edges
            .iter()
            .filter(|&&(i, j, _)| i == node || j == node)
            .map(|&(_, _, w)| w)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Adjacency,
    Laplacian,
    NormalizedLaplacian,
}

/// Dense N x N shift operator together with the convention it was built by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportMatrix {
    kind: SupportKind,
    entries: Mat,
}

impl SupportMatrix {
    /// Wraps an arbitrary square matrix; used by tests and synthetic setups.
    pub fn from_mat(kind: SupportKind, entries: Mat) -> Self {
        assert_eq!(entries.rows(), entries.cols(), "support must be square");
        Self { kind, entries }
    }

    pub fn kind(&self) -> SupportKind {
        self.kind
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }
}

/// Connects every pair of agents within `radius` (closed ball) with a unit edge.
///
/// Two agents at the exact same position cannot exchange a meaningful
/// relative measurement, so that case is an error rather than an edge.
pub fn build_proximity_graph(positions: &Mat, radius: f64) -> Result<Graph, GraphError> {
    if !(radius > 0.0) {
        return Err(GraphError::InvalidRadius(radius));
    }
    if !positions.all_finite() {
        return Err(GraphError::NonFinitePositions);
    }
    assert_eq!(positions.cols(), 2, "positions are N x 2");
    let n = positions.rows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions.get(i, 0) - positions.get(j, 0);
            let dy = positions.get(i, 1) - positions.get(j, 1);
            let d = (dx * dx + dy * dy).sqrt();
            if d == 0.0 {
                return Err(GraphError::AgentOverlap(i, j));
            }
            if d <= radius {
                edges.push((i, j, 1.0));
            }
        }
    }
    Ok(Graph::new(n, edges))
}

/// Builds the requested shift operator for the graph.
///
/// Isolated nodes contribute zero rows and columns to the normalized
/// Laplacian (the D^{1/2} pseudo-inverse convention), which keeps its
/// row-sum norm at most 2 on any graph.
pub fn support_matrix(graph: &Graph, kind: SupportKind) -> SupportMatrix {
    let n = graph.n_agents();
    let mut adj = Mat::zeros(n, n);
    for &(i, j, w) in graph.edges() {
        adj.set(i, j, w);
        adj.set(j, i, w);
    }
    let entries = match kind {
        SupportKind::Adjacency => adj,
        SupportKind::Laplacian => {
            let mut m = adj.scale(-1.0);
            for i in 0..n {
                m.set(i, i, graph.degree(i));
            }
            m
        }
        SupportKind::NormalizedLaplacian => {
            let inv_sqrt: Vec<f64> = (0..n)
                .map(|i| {
                    let d = graph.degree(i);
                    if d > 0.0 {
                        1.0 / d.sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            Mat::from_fn(n, n, |i, j| {
                let lap = if i == j {
                    graph.degree(i)
                } else {
                    -adj.get(i, j)
                };
                // Scale factor first so the result is symmetric bit for bit.
                (inv_sqrt[i] * inv_sqrt[j]) * lap
            })
        }
    };
    SupportMatrix { kind, entries }
}

/// One hop of the shift operator: `S * x`.
pub fn apply_shift(support: &SupportMatrix, signal: &Mat) -> Result<Mat, GraphError> {
    if support.n() != signal.rows() {
        return Err(GraphError::DimensionMismatch {
            support: support.n(),
            signal: signal.rows(),
        });
    }
    Ok(support.entries.matmul(signal))
}

/// Induced infinity norm: max over rows of the absolute entry sum.
pub fn inf_norm(m: &Mat) -> f64 {
    m.row_sum_norm()
}

/// Upper bound on the norm of the horizontally stacked `[I, S, ..., S^K]`
/// given a bound `s_max >= ||S||_inf`: the geometric sum over hop powers.
pub fn stacked_shift_norm_bound(s_max: f64, k_order: usize) -> f64 {
    assert!(s_max >= 0.0, "support bound must be nonnegative");
    let mut term = 1.0;
    let mut sum = 1.0;
    for _ in 0..k_order {
        term *= s_max;
        sum += term;
    }
    sum
}

/// Exact row-sum norm of the horizontally stacked `[I, S, ..., S^K]`
/// for a concrete support. Used to audit the closed-form bound.
pub fn stacked_shift_norm(support: &SupportMatrix, k_order: usize) -> f64 {
    let n = support.n();
    let mut power = Mat::identity(n);
    let mut row_sums = vec![0.0; n];
    for k in 0..=k_order {
        if k > 0 {
            power = support.entries.matmul(&power);
        }
        for i in 0..n {
            row_sums[i] += power.row(i).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    row_sums.into_iter().fold(0.0, f64::max)
}

/// Row-sum norm of `[0, S1 - S2, S1^2 - S2^2, ..., S1^K - S2^K]`, the
/// stacked-operator difference that enters the incremental bound when two
/// trajectories see different graphs.
pub fn stacked_shift_diff_norm(s1: &SupportMatrix, s2: &SupportMatrix, k_order: usize) -> f64 {
    assert_eq!(s1.n(), s2.n(), "supports must share the agent count");
    let n = s1.n();
    let mut p1 = Mat::identity(n);
    let mut p2 = Mat::identity(n);
    let mut row_sums = vec![0.0; n];
    for _ in 1..=k_order {
        p1 = s1.entries.matmul(&p1);
        p2 = s2.entries.matmul(&p2);
        let diff = p1.sub(&p2);
        for (i, sum) in row_sums.iter_mut().enumerate() {
            *sum += diff.row(i).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    row_sums.into_iter().fold(0.0, f64::max)
}

/// Default uniform norm bound assumed for a support kind, per team size `n`.
///
/// Certificates are conditional on the graphs honoring this bound at
/// runtime. The normalized-Laplacian convention of 2 is exact on
/// degree-regular neighborhoods (and is the spectral bound in general);
/// strongly irregular graphs can exceed it in the row-sum norm, in which
/// case the caller should pass an explicit bound instead.
pub fn default_support_bound(kind: SupportKind, n: usize) -> f64 {
    match kind {
        SupportKind::NormalizedLaplacian => 2.0,
        SupportKind::Adjacency => n as f64,
        SupportKind::Laplacian => 2.0 * (n.saturating_sub(1)) as f64,
    }
}
