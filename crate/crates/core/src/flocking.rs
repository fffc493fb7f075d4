//! Leader-follower flocking benchmark: double-integrator swarm, expert
//! controller, feature extraction, metrics, and closed-loop rollouts.
//!
//! Followers accelerate toward velocity consensus (`-L v`) while a
//! pairwise repulsive potential keeps agents apart; the leader instead
//! steers toward a target only it knows. The flocking cost is the mean
//! squared deviation of agent velocities from the team average. Policies
//! (expert, learned network, or zero) are evaluated in closed loop with
//! the communication graph rebuilt from positions at every step.

use crate::ggnn::{deep_forward, DelayedNet, GgnnError, NetworkParams};
use crate::graph::{build_proximity_graph, support_matrix, Graph, GraphError};
use crate::mat::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlockingError {
    #[error("coincident agents at distance zero")]
    CoincidentAgents,
    #[error("degenerate scenario: leader starts at its target")]
    DegenerateScenario,
    #[error("scenario sampling exhausted its rejection budget")]
    SamplingBudgetExhausted,
    #[error("horizon {horizon} s is not an integer multiple of dt {dt} s")]
    NonIntegralHorizon { horizon: f64, dt: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] GgnnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Positions and velocities of the team plus the leader's task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    /// N x 2 positions in meters.
    pub positions: Mat,
    /// N x 2 velocities in m/s.
    pub velocities: Mat,
    pub leader: usize,
    /// Target position in meters, known only to the leader.
    pub target: [f64; 2],
}

impl SwarmState {
    pub fn n_agents(&self) -> usize {
        self.positions.rows()
    }

    pub fn leader_target_distance(&self) -> f64 {
        let dx = self.positions.get(self.leader, 0) - self.target[0];
        let dy = self.positions.get(self.leader, 1) - self.target[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// How the collision-avoidance cutoff compares against the sensing range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaThreshold {
    /// Active while the squared distance is at most the sensing range.
    SquaredVsRadius,
    /// Active while the squared distance is at most the squared range.
    SquaredVsRadiusSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureThresholds {
    /// Any inter-agent distance below this is a collision (m).
    pub collision_distance: f64,
    /// Leader divergence: leader-target distance exceeds this multiple of
    /// its initial value and the absolute floor below.
    pub leader_divergence_factor: f64,
    /// Absolute floor (m) on the divergence test; keeps near-target
    /// oscillation of the undamped leader pursuit from counting as failure.
    pub leader_divergence_floor: f64,
    /// Team split: any inter-agent distance exceeds this multiple of the
    /// initial swarm diameter.
    pub team_split_factor: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        Self {
            collision_distance: 0.1,
            leader_divergence_factor: 3.0,
            leader_divergence_floor: 10.0,
            team_split_factor: 10.0,
        }
    }
}

/// Everything needed to reproduce one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub initial: SwarmState,
    /// Communication radius R (m); agents within it share an edge.
    pub comm_radius: f64,
    /// Sensing range R_CA (m) for collision avoidance and features.
    pub sensing_radius: f64,
    pub horizon_steps: usize,
    pub dt: f64,
    /// Componentwise control saturation (m/s^2).
    pub saturation: f64,
    /// Leader pursuit gain W_p.
    pub leader_gain: f64,
    pub ca_threshold: CaThreshold,
    pub thresholds: FailureThresholds,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.initial.n_agents()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    AgentCollision,
    LeaderDivergence,
    TeamSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub kind: FailureKind,
    pub step: usize,
}

/// Full record of one rollout. States run one longer than controls; the
/// cost series covers every recorded state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<SwarmState>,
    pub controls: Vec<Mat>,
    pub graphs: Vec<Graph>,
    pub features: Vec<Mat>,
    pub cost_series: Vec<f64>,
    pub avg_cost: f64,
    pub failure: Option<FailureRecord>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub n_agents: usize,
    pub steps: usize,
    pub avg_cost: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub leader_error: Option<f64>,
    pub failure: Option<FailureRecord>,
}

/// Exact discrete double-integrator update; positions advance on the old
/// velocities.
pub fn step_dynamics(state: &SwarmState, controls: &Mat, dt: f64) -> SwarmState {
    let positions = state.positions.add(&state.velocities.scale(dt));
    let velocities = state.velocities.add(&controls.scale(dt));
    SwarmState {
        positions,
        velocities,
        leader: state.leader,
        target: state.target,
    }
}

fn ca_active(dist_sq: f64, sensing_radius: f64, threshold: CaThreshold) -> bool {
    match threshold {
        CaThreshold::SquaredVsRadius => dist_sq <= sensing_radius,
        CaThreshold::SquaredVsRadiusSquared => dist_sq <= sensing_radius * sensing_radius,
    }
}

/// Gradient of the pairwise collision-avoidance potential with respect to
/// the first agent's position, zero outside the active range.
pub fn ca_gradient(
    r_ij: [f64; 2],
    sensing_radius: f64,
    threshold: CaThreshold,
) -> Result<[f64; 2], FlockingError> {
    let dist_sq = r_ij[0] * r_ij[0] + r_ij[1] * r_ij[1];
    if dist_sq == 0.0 {
        return Err(FlockingError::CoincidentAgents);
    }
    if !ca_active(dist_sq, sensing_radius, threshold) {
        return Ok([0.0, 0.0]);
    }
    let quart = dist_sq * dist_sq;
    Ok([
        -r_ij[0] / quart - r_ij[0] / dist_sq,
        -r_ij[1] / quart - r_ij[1] / dist_sq,
    ])
}

fn clamp_mat(m: &Mat, limit: f64) -> Mat {
    m.map(|v| v.clamp(-limit, limit))
}

/// Centralized expert: velocity consensus plus collision avoidance for
/// followers, target pursuit plus collision avoidance for the leader,
/// saturated componentwise.
pub fn expert_control(
    state: &SwarmState,
    graph: &Graph,
    leader_gain: f64,
    sensing_radius: f64,
    ca_threshold: CaThreshold,
    saturation: f64,
) -> Result<Mat, FlockingError> {
    let n = state.n_agents();
    let lap = support_matrix(graph, crate::graph::SupportKind::Laplacian);
    let mut u = lap.entries().matmul(&state.velocities).scale(-1.0);
    for i in 0..n {
        let mut ca = [0.0, 0.0];
        for j in 0..n {
            if j == i {
                continue;
            }
            let r_ij = [
                state.positions.get(i, 0) - state.positions.get(j, 0),
                state.positions.get(i, 1) - state.positions.get(j, 1),
            ];
            let g = ca_gradient(r_ij, sensing_radius, ca_threshold)?;
            ca[0] += g[0];
            ca[1] += g[1];
        }
        if i == state.leader {
            u.set(i, 0, -leader_gain * (state.positions.get(i, 0) - state.target[0]) - ca[0]);
            u.set(i, 1, -leader_gain * (state.positions.get(i, 1) - state.target[1]) - ca[1]);
        } else {
            u.add_at(i, 0, -ca[0]);
            u.add_at(i, 1, -ca[1]);
        }
    }
    Ok(clamp_mat(&u, saturation))
}

/// Per-agent 10-feature observation: velocity, the two repulsion sums over
/// the sensing ball, the target offset (leader) or zeros (followers), and
/// a leader/follower one-hot tail ([1,0] leader, [0,1] follower).
pub fn input_features(state: &SwarmState, sensing_radius: f64) -> Mat {
    let n = state.n_agents();
    Mat::from_fn(n, 10, |i, f| {
        match f {
            0 | 1 => state.velocities.get(i, f),
            2..=5 => {
                let mut quart_sum = [0.0, 0.0];
                let mut sq_sum = [0.0, 0.0];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let rx = state.positions.get(i, 0) - state.positions.get(j, 0);
                    let ry = state.positions.get(i, 1) - state.positions.get(j, 1);
                    let d_sq = rx * rx + ry * ry;
                    if d_sq > 0.0 && d_sq.sqrt() <= sensing_radius {
                        quart_sum[0] += rx / (d_sq * d_sq);
                        quart_sum[1] += ry / (d_sq * d_sq);
                        sq_sum[0] += rx / d_sq;
                        sq_sum[1] += ry / d_sq;
                    }
                }
                match f {
                    2 => quart_sum[0],
                    3 => quart_sum[1],
                    4 => sq_sum[0],
                    _ => sq_sum[1],
                }
            }
            6 | 7 => {
                if i == state.leader {
                    state.positions.get(i, f - 6) - state.target[f - 6]
                } else {
                    0.0
                }
            }
            8 => {
                if i == state.leader {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                if i == state.leader {
                    0.0
                } else {
                    1.0
                }
            }
        }
    })
}

/// Mean squared deviation of agent velocities from the team average.
pub fn flocking_cost(velocities: &Mat) -> f64 {
    let n = velocities.rows();
    assert!(n >= 1);
    let mut mean = [0.0, 0.0];
    for i in 0..n {
        mean[0] += velocities.get(i, 0);
        mean[1] += velocities.get(i, 1);
    }
    mean[0] /= n as f64;
    mean[1] /= n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let dx = velocities.get(i, 0) - mean[0];
        let dy = velocities.get(i, 1) - mean[1];
        acc += dx * dx + dy * dy;
    }
    acc / n as f64
}

/// Final over initial squared leader-target distance.
pub fn leader_error(trajectory: &Trajectory) -> Result<f64, FlockingError> {
    let first = trajectory.states.first().expect("trajectory has states");
    let last = trajectory.states.last().expect("trajectory has states");
    let initial = first.leader_target_distance();
    if initial == 0.0 {
        return Err(FlockingError::DegenerateScenario);
    }
    let final_d = last.leader_target_distance();
    Ok((final_d * final_d) / (initial * initial))
}

/// Controller under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Zero,
    Expert,
    Network(&'a NetworkParams),
}

fn min_pairwise_distance(positions: &Mat) -> f64 {
    let n = positions.rows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions.get(i, 0) - positions.get(j, 0);
            let dy = positions.get(i, 1) - positions.get(j, 1);
            best = best.min((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

fn max_pairwise_distance(positions: &Mat) -> f64 {
    let n = positions.rows();
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions.get(i, 0) - positions.get(j, 0);
            let dy = positions.get(i, 1) - positions.get(j, 1);
            best = best.max((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

/// Runs the closed loop for the scenario horizon.
///
/// `comm_delay` is the number of simulation steps one communication hop
/// takes: 0 means instantaneous exchange, 1 matches the unit-delayed
/// filter model, and larger values update the network every `comm_delay`
/// steps with the control held in between. Failures are recorded, not
/// thrown; only exact agent coincidence truncates the run early.
pub fn rollout(
    policy: Policy<'_>,
    scenario: &Scenario,
    comm_delay: usize,
) -> Result<Trajectory, FlockingError> {
    let n = scenario.n_agents();
    let initial_leader_distance = scenario.initial.leader_target_distance();
    let initial_diameter = max_pairwise_distance(&scenario.initial.positions);

    let mut net_states = match policy {
        Policy::Network(net) => net.zero_states(n),
        _ => Vec::new(),
    };
    let mut delayed_net = match policy {
        Policy::Network(net) if comm_delay > 0 => Some(DelayedNet::new(net, n)),
        _ => None,
    };
    let mut held_control = Mat::zeros(n, 2);

    let mut states = Vec::with_capacity(scenario.horizon_steps + 1);
    let mut controls = Vec::with_capacity(scenario.horizon_steps);
    let mut graphs = Vec::with_capacity(scenario.horizon_steps);
    let mut features_log = Vec::with_capacity(scenario.horizon_steps);
    let mut cost_series = Vec::with_capacity(scenario.horizon_steps + 1);
    let mut failure: Option<FailureRecord> = None;

    let mut state = scenario.initial.clone();
    let mut truncated = false;
    for t in 0..scenario.horizon_steps {
        cost_series.push(flocking_cost(&state.velocities));
        states.push(state.clone());

        if failure.is_none() {
            let min_d = min_pairwise_distance(&state.positions);
            let leader_d = state.leader_target_distance();
            let max_d = max_pairwise_distance(&state.positions);
            if n >= 2 && min_d < scenario.thresholds.collision_distance {
                failure = Some(FailureRecord {
                    kind: FailureKind::AgentCollision,
                    step: t,
                });
            } else if initial_leader_distance > 0.0
                && leader_d > scenario.thresholds.leader_divergence_factor * initial_leader_distance
                && leader_d > scenario.thresholds.leader_divergence_floor
            {
                failure = Some(FailureRecord {
                    kind: FailureKind::LeaderDivergence,
                    step: t,
                });
            } else if n >= 2
                && initial_diameter > 0.0
                && max_d > scenario.thresholds.team_split_factor * initial_diameter
            {
                failure = Some(FailureRecord {
                    kind: FailureKind::TeamSplit,
                    step: t,
                });
            }
        }

        let graph = match build_proximity_graph(&state.positions, scenario.comm_radius) {
            Ok(g) => g,
            Err(GraphError::AgentOverlap(_, _)) => {
                // Cannot sense or communicate through an exact overlap;
                // record the collision and stop here.
                if failure.is_none() {
                    failure = Some(FailureRecord {
                        kind: FailureKind::AgentCollision,
                        step: t,
                    });
                }
                truncated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let features = input_features(&state, scenario.sensing_radius);

        let control = match policy {
            Policy::Zero => Mat::zeros(n, 2),
            Policy::Expert => expert_control(
                &state,
                &graph,
                scenario.leader_gain,
                scenario.sensing_radius,
                scenario.ca_threshold,
                scenario.saturation,
            )?,
            Policy::Network(net) => {
                let support = support_matrix(&graph, net.support_kind);
                if let Some(delayed) = delayed_net.as_mut() {
                    if t % comm_delay == 0 {
                        let tick = (t / comm_delay) as i64;
                        held_control = delayed.step(net, tick, &support, &features)?;
                    }
                    held_control.clone()
                } else {
                    let (y, next) = deep_forward(net, &support, &net_states, &features)?;
                    net_states = next;
                    y
                }
            }
        };
        let control = clamp_mat(&control, scenario.saturation);

        graphs.push(graph);
        features_log.push(features);
        controls.push(control.clone());
        state = step_dynamics(&state, &control, scenario.dt);
    }
    if !truncated {
        cost_series.push(flocking_cost(&state.velocities));
        states.push(state);
    }

    let avg_cost = cost_series.iter().sum::<f64>() / cost_series.len() as f64;
    Ok(Trajectory {
        states,
        controls,
        graphs,
        features: features_log,
        cost_series,
        avg_cost,
        failure,
    })
}

pub fn summarize(trajectory: &Trajectory) -> TrajectorySummary {
    TrajectorySummary {
        n_agents: trajectory.states[0].n_agents(),
        steps: trajectory.steps(),
        avg_cost: trajectory.avg_cost,
        initial_cost: *trajectory.cost_series.first().expect("non-empty"),
        final_cost: *trajectory.cost_series.last().expect("non-empty"),
        leader_error: leader_error(trajectory).ok(),
        failure: trajectory.failure,
    }
}

/// Per-step CSV: one row per (control step, agent).
pub fn write_trajectory_csv<W: Write>(trajectory: &Trajectory, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "t,agent,rx,ry,vx,vy,ux,uy,cost")?;
    for (t, control) in trajectory.controls.iter().enumerate() {
        let state = &trajectory.states[t];
        for i in 0..state.n_agents() {
            writeln!(
                out,
                "{t},{i},{},{},{},{},{},{},{}",
                state.positions.get(i, 0),
                state.positions.get(i, 1),
                state.velocities.get(i, 0),
                state.velocities.get(i, 1),
                control.get(i, 0),
                control.get(i, 1),
                trajectory.cost_series[t],
            )?;
        }
    }
    Ok(())
}

/// Geometry and physics defaults for scenario sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Nearest-neighbor spacing band (m) for initial positions.
    pub min_spacing: f64,
    pub max_spacing: f64,
    /// Initial velocity components are uniform in +-this bound (m/s).
    pub velocity_bound: f64,
    /// Target lands uniformly in a square of this side length centered on
    /// the leader (m).
    pub target_box: f64,
    pub horizon: f64,
    pub dt: f64,
    pub comm_radius: f64,
    pub sensing_radius: f64,
    pub saturation: f64,
    pub leader_gain: f64,
    pub ca_threshold: CaThreshold,
    pub thresholds: FailureThresholds,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            min_spacing: 0.6,
            max_spacing: 1.0,
            velocity_bound: 2.0,
            target_box: 20.0,
            horizon: 2.5,
            dt: 0.01,
            comm_radius: 4.0,
            sensing_radius: 1.0,
            saturation: 5.0,
            // Gentle pursuit: the undamped leader must stay trackable by
            // velocity consensus or it drags the team apart within the
            // horizon.
            leader_gain: 0.25,
            ca_threshold: CaThreshold::SquaredVsRadius,
            thresholds: FailureThresholds::default(),
        }
    }
}

/// Draws a scenario: agents grow outward from the origin so every agent's
/// nearest neighbor lands inside the spacing band, velocities are uniform,
/// and the target is placed relative to a randomly chosen leader.
pub fn sample_scenario<R: Rng>(
    rng: &mut R,
    n_agents: usize,
    cfg: &ScenarioConfig,
) -> Result<Scenario, FlockingError> {
    assert!(n_agents >= 1);
    let steps_f = cfg.horizon / cfg.dt;
    if (steps_f - steps_f.round()).abs() > 1e-9 {
        return Err(FlockingError::NonIntegralHorizon {
            horizon: cfg.horizon,
            dt: cfg.dt,
        });
    }
    let mut placed: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let budget = 10_000;
    while placed.len() < n_agents {
        let mut accepted = false;
        for _ in 0..budget {
            let anchor = placed[rng.gen_range(0..placed.len())];
            let dist = rng.gen_range(cfg.min_spacing..=cfg.max_spacing);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let cand = [anchor[0] + dist * angle.cos(), anchor[1] + dist * angle.sin()];
            let ok = placed.iter().all(|p| {
                let dx = cand[0] - p[0];
                let dy = cand[1] - p[1];
                (dx * dx + dy * dy).sqrt() >= cfg.min_spacing
            });
            if ok {
                placed.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(FlockingError::SamplingBudgetExhausted);
        }
    }
    let positions = Mat::from_fn(n_agents, 2, |i, j| placed[i][j]);
    let velocities = Mat::from_fn(n_agents, 2, |_, _| {
        rng.gen_range(-cfg.velocity_bound..=cfg.velocity_bound)
    });
    let leader = rng.gen_range(0..n_agents);
    let half = cfg.target_box / 2.0;
    let target = loop {
        let t = [
            positions.get(leader, 0) + rng.gen_range(-half..=half),
            positions.get(leader, 1) + rng.gen_range(-half..=half),
        ];
        let dx = t[0] - positions.get(leader, 0);
        let dy = t[1] - positions.get(leader, 1);
        if (dx * dx + dy * dy).sqrt() > 1e-6 {
            break t;
        }
    };
    Ok(Scenario {
        initial: SwarmState {
            positions,
            velocities,
            leader,
            target,
        },
        comm_radius: cfg.comm_radius,
        sensing_radius: cfg.sensing_radius,
        horizon_steps: steps_f.round() as usize,
        dt: cfg.dt,
        saturation: cfg.saturation,
        leader_gain: cfg.leader_gain,
        ca_threshold: cfg.ca_threshold,
        thresholds: cfg.thresholds,
    })
}
