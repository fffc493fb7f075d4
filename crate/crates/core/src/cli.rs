//! Command-line entry points: dataset generation, training, certification,
//! evaluation sweeps, and single rollouts.
//!
//! Every subcommand is deterministic under a fixed `--seed` and writes its
//! resolved configuration next to its outputs. All artifacts are plain
//! JSON or CSV so certificates and metrics stay auditable.

use crate::flocking::{
    rollout, sample_scenario, summarize, write_trajectory_csv, FailureRecord, Policy, Scenario,
    ScenarioConfig, SwarmState, Trajectory,
};
use crate::ggnn::{GgnnError, NetworkParams};
use crate::graph::{build_proximity_graph, default_support_bound, stacked_shift_norm_bound};
use crate::learn::{
    generate_expert_dataset, train, Dataset, Sample, Split, TrainConfig,
};
use crate::mat::Mat;
use crate::stability::{certify, StabilityCertificate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sggnn", about = "Stability-certified gated graph networks for flocking control")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert trajectories and split them into train/validation/test.
    GenData(GenDataArgs),
    /// Train a network on a recorded dataset.
    Train(TrainArgs),
    /// Compute the stability certificate of a weights file.
    Certify(CertifyArgs),
    /// Sweep team size, communication range, and delay; write metrics CSV.
    Eval(EvalArgs),
    /// Run a single rollout and export it as CSV plus a JSON summary.
    Simulate(SimulateArgs),
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Certify(args) => return cmd_certify(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Flocking(#[from] crate::flocking::FlockingError),
    #[error(transparent)]
    Learn(#[from] crate::learn::LearnError),
    #[error(transparent)]
    Network(#[from] GgnnError),
    #[error("{0}")]
    Invalid(String),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Splitmix-style seed derivation so parallel cells get disjoint streams.
fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

// ---------------------------------------------------------------------------
// Weights files

/// Weight file wrapper: shapes plus the metadata needed to rebuild the
/// closed loop without guessing.
#[derive(Debug, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format: String,
    pub features: usize,
    pub k_order: usize,
    pub n_layers: usize,
    pub support_kind: crate::graph::SupportKind,
    pub saturation: Option<f64>,
    pub params: NetworkParams,
}

pub const WEIGHTS_FORMAT: &str = "sggnn-weights-v1";

impl WeightsFile {
    pub fn new(params: NetworkParams) -> Self {
        Self {
            format: WEIGHTS_FORMAT.to_string(),
            features: params.features(),
            k_order: params.k_order(),
            n_layers: params.n_layers(),
            support_kind: params.support_kind,
            saturation: params.saturation(),
            params,
        }
    }

    pub fn into_validated(self) -> Result<NetworkParams, CliError> {
        if self.format != WEIGHTS_FORMAT {
            return Err(CliError::Invalid(format!(
                "unknown weights format {:?}",
                self.format
            )));
        }
        if self.features != self.params.features()
            || self.k_order != self.params.k_order()
            || self.n_layers != self.params.n_layers()
        {
            return Err(CliError::Invalid(
                "weights metadata disagrees with parameter shapes".into(),
            ));
        }
        self.params.validate()?;
        Ok(self.params)
    }
}

pub fn save_weights(path: &Path, params: &NetworkParams) -> Result<(), CliError> {
    write_json(path, &WeightsFile::new(params.clone()))
}

pub fn load_weights(path: &Path) -> Result<NetworkParams, CliError> {
    let file: WeightsFile = read_json(path)?;
    file.into_validated()
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryFile {
    scenario: Scenario,
    states: Vec<SwarmState>,
    controls: Vec<Mat>,
    failure: Option<FailureRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: Split,
    n_agents: usize,
    steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    entries: Vec<ManifestEntry>,
}

const DATASET_FORMAT: &str = "sggnn-dataset-v1";

fn rebuild_trajectory(file: TrajectoryFile) -> Result<(Scenario, Trajectory), CliError> {
    let steps = file.controls.len();
    let mut graphs = Vec::with_capacity(steps);
    let mut features = Vec::with_capacity(steps);
    for state in &file.states[..steps] {
        graphs.push(build_proximity_graph(&state.positions, file.scenario.comm_radius).map_err(
            |e| CliError::Invalid(format!("stored trajectory has an invalid state: {e}")),
        )?);
        features.push(crate::flocking::input_features(state, file.scenario.sensing_radius));
    }
    let cost_series: Vec<f64> = file
        .states
        .iter()
        .map(|s| crate::flocking::flocking_cost(&s.velocities))
        .collect();
    let avg_cost = cost_series.iter().sum::<f64>() / cost_series.len() as f64;
    Ok((
        file.scenario,
        Trajectory {
            states: file.states,
            controls: file.controls,
            graphs,
            features,
            cost_series,
            avg_cost,
            failure: file.failure,
        },
    ))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let file = format!("traj_{i:04}.json");
        write_json(
            &dir.join(&file),
            &TrajectoryFile {
                scenario: sample.scenario.clone(),
                states: sample.trajectory.states.clone(),
                controls: sample.trajectory.controls.clone(),
                failure: sample.trajectory.failure,
            },
        )?;
        entries.push(ManifestEntry {
            file,
            split: sample.split,
            n_agents: sample.scenario.n_agents(),
            steps: sample.trajectory.steps(),
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format: DATASET_FORMAT.to_string(),
            seed,
            entries,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT {
        return Err(CliError::Invalid(format!(
            "unknown dataset format {:?}",
            manifest.format
        )));
    }
    let mut dataset = Dataset::default();
    for entry in manifest.entries {
        let file: TrajectoryFile = read_json(&dir.join(&entry.file))?;
        let (scenario, trajectory) = rebuild_trajectory(file)?;
        dataset.samples.push(Sample {
            scenario,
            trajectory,
            split: entry.split,
        });
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of expert trajectories to record.
    #[arg(long, default_value_t = 120)]
    pub count: usize,
    /// Team sizes drawn at random per trajectory.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 6, 10, 12, 15])]
    pub team_sizes: Vec<usize>,
    #[command(flatten)]
    #[serde(default)]
    pub scenario: ScenarioOverrides,
}

/// Scenario knobs exposed on the command line; unset values fall back to
/// the benchmark defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioOverrides {
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub comm_radius: Option<f64>,
    #[arg(long)]
    pub sensing_radius: Option<f64>,
    #[arg(long)]
    pub saturation: Option<f64>,
    #[arg(long)]
    pub leader_gain: Option<f64>,
}

impl ScenarioOverrides {
    pub fn apply(&self, base: &ScenarioConfig) -> ScenarioConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.dt {
            cfg.dt = v;
        }
        if let Some(v) = self.comm_radius {
            cfg.comm_radius = v;
        }
        if let Some(v) = self.sensing_radius {
            cfg.sensing_radius = v;
        }
        if let Some(v) = self.saturation {
            cfg.saturation = v;
        }
        if let Some(v) = self.leader_gain {
            cfg.leader_gain = v;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a full GenDataConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: GenDataConfig,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => read_json::<GenDataConfig>(path)?,
        None => args.overrides,
    };
    let scenario_cfg = cfg.scenario.apply(&ScenarioConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dataset = generate_expert_dataset(cfg.count, &cfg.team_sizes, &scenario_cfg, &mut rng)?;
    fs::create_dir_all(&args.out)?;
    write_dataset(&args.out, &dataset, cfg.seed)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    println!(
        "recorded {} trajectories ({} train / {} validation / {} test) in {}",
        dataset.len(),
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Validation).len(),
        dataset.indices(Split::Test).len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Stability penalty on.
    Stable,
    /// Stability penalty off (baseline).
    Unstable,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a full TrainConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub k_order: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(mode) = args.mode {
        cfg.penalty_enabled = mode == TrainMode::Stable;
    }
    if let Some(v) = args.features {
        cfg.features = v;
    }
    if let Some(v) = args.k_order {
        cfg.k_order = v;
    }
    if let Some(v) = args.layers {
        cfg.n_layers = v;
    }

    let mut dataset = load_dataset(&args.dataset)?;
    if dataset.indices(Split::Train).is_empty() {
        return Err(CliError::Invalid("dataset has no training split".into()));
    }
    let outcome = train(&cfg, &mut dataset)?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    save_weights(&args.out.join("weights.json"), &outcome.params)?;
    write_json(&args.out.join("certificate.json"), &outcome.report.final_certificate)?;
    let mut lines = String::new();
    for record in &outcome.report.epochs {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    fs::write(args.out.join("report.jsonl"), lines)?;
    write_json(
        &args.out.join("report_meta.json"),
        &serde_json::json!({
            "best_epoch": outcome.report.best_epoch,
            "aborted": outcome.report.aborted,
        }),
    )?;
    println!(
        "trained {} epochs; delta-ISS verdict: {}",
        outcome.report.epochs.len(),
        outcome.report.final_certificate.verdict_diss
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// certify

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Weights file to certify.
    #[arg(long)]
    pub weights: PathBuf,
    /// Certificate JSON destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Assumed support norm bound; defaults from the support kind.
    #[arg(long)]
    pub s_bar: Option<f64>,
    /// Assumed stacked-shift norm bound; defaults to the geometric sum.
    #[arg(long)]
    pub s_k_bar: Option<f64>,
    /// Team size used to derive the adjacency/Laplacian default bound.
    #[arg(long, default_value_t = 15)]
    pub team_size: usize,
}

pub fn certificate_table(cert: &StabilityCertificate) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "assumed bounds: |S| <= {}, |S_K| <= {}\n",
        cert.s_bar, cert.s_k_bar
    ));
    out.push_str("layer  iss_margin  diss_margin  input_gain  diss_input_gain  support_gain\n");
    for (i, l) in cert.layers.iter().enumerate() {
        out.push_str(&format!(
            "{i:>5}  {:>10.6}  {:>11.6}  {:>10.6}  {:>15.6}  {:>12.6}\n",
            l.iss_margin, l.diss_margin, l.input_gain, l.diss_input_gain, l.support_gain
        ));
    }
    out.push_str(&format!(
        "verdict: ISS {}  delta-ISS {}\n",
        if cert.verdict_iss { "PASS" } else { "FAIL" },
        if cert.verdict_diss { "PASS" } else { "FAIL" }
    ));
    if !cert.verdict_diss {
        out.push_str(&format!("offending layers: {:?}\n", cert.offending_layers()));
    }
    out
}

pub fn certify_weights_file(args: &CertifyArgs) -> Result<StabilityCertificate, CliError> {
    let params = load_weights(&args.weights)?;
    let s_bar = args
        .s_bar
        .unwrap_or_else(|| default_support_bound(params.support_kind, args.team_size));
    let s_k_bar = args
        .s_k_bar
        .unwrap_or_else(|| stacked_shift_norm_bound(s_bar, params.k_order()));
    let cert = certify(&params, s_bar, s_k_bar);
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        write_json(out, &cert)?;
    }
    Ok(cert)
}

fn cmd_certify(args: CertifyArgs) -> ExitCode {
    match certify_weights_file(&args) {
        Ok(cert) => {
            print!("{}", certificate_table(&cert));
            if cert.verdict_diss {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Network,
    Expert,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Network)]
    pub policy: PolicyKind,
    /// Team sizes of the sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 10, 25])]
    pub team_sizes: Vec<usize>,
    /// Communication ranges of the sweep (m).
    #[arg(long, value_delimiter = ',', default_values_t = vec![4.0])]
    pub ranges: Vec<f64>,
    /// Communication delays in steps (0 = instantaneous).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
    pub delays: Vec<usize>,
    /// Rollouts per grid cell.
    #[arg(long, default_value_t = 40)]
    pub scenarios: usize,
    #[command(flatten)]
    #[serde(default)]
    pub scenario: ScenarioOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Weights file (required for the network policy).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// JSON file with a full EvalConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: EvalConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalCell {
    pub n_agents: usize,
    pub comm_radius: f64,
    pub delay: usize,
    pub scenarios: usize,
    pub mean_cost: f64,
    pub median_cost: f64,
    pub p90_cost: f64,
    pub mean_leader_error: f64,
    pub median_leader_error: f64,
    pub failure_rate: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

/// Evaluates one grid cell: fixed team size, range, and delay.
pub fn eval_cell(
    policy: PolicyKind,
    params: Option<&NetworkParams>,
    n_agents: usize,
    comm_radius: f64,
    delay: usize,
    scenarios: usize,
    base_cfg: &ScenarioConfig,
    seed: u64,
) -> Result<EvalCell, CliError> {
    let mut cfg = base_cfg.clone();
    cfg.comm_radius = comm_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut costs = Vec::with_capacity(scenarios);
    let mut leader_errors = Vec::new();
    let mut failures = 0usize;
    for _ in 0..scenarios {
        let scenario = sample_scenario(&mut rng, n_agents, &cfg)?;
        let traj = match (policy, params) {
            (PolicyKind::Network, Some(p)) => rollout(Policy::Network(p), &scenario, delay)?,
            (PolicyKind::Network, None) => {
                return Err(CliError::Invalid("network policy needs --weights".into()))
            }
            (PolicyKind::Expert, _) => rollout(Policy::Expert, &scenario, 0)?,
            (PolicyKind::Zero, _) => rollout(Policy::Zero, &scenario, 0)?,
        };
        let summary = summarize(&traj);
        costs.push(summary.avg_cost);
        if let Some(le) = summary.leader_error {
            leader_errors.push(le);
        }
        if summary.failure.is_some() {
            failures += 1;
        }
    }
    costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    leader_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalCell {
        n_agents,
        comm_radius,
        delay,
        scenarios,
        mean_cost: mean(&costs),
        median_cost: percentile(&costs, 0.5),
        p90_cost: percentile(&costs, 0.9),
        mean_leader_error: mean(&leader_errors),
        median_leader_error: percentile(&leader_errors, 0.5),
        failure_rate: failures as f64 / scenarios.max(1) as f64,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => read_json::<EvalConfig>(path)?,
        None => args.overrides,
    };
    let params = match (cfg.policy, &args.weights) {
        (PolicyKind::Network, Some(path)) => Some(load_weights(path)?),
        (PolicyKind::Network, None) => {
            return Err(CliError::Invalid("network policy needs --weights".into()))
        }
        _ => None,
    };
    let scenario_cfg = cfg.scenario.apply(&ScenarioConfig::default());

    let mut cells = Vec::new();
    for &n in &cfg.team_sizes {
        for &r in &cfg.ranges {
            for &d in &cfg.delays {
                cells.push((n, r, d));
            }
        }
    }
    let results: Result<Vec<EvalCell>, CliError> = cells
        .par_iter()
        .map(|&(n, r, d)| {
            let cell_seed = derive_seed(cfg.seed, &[n as u64, r.to_bits(), d as u64]);
            eval_cell(
                cfg.policy,
                params.as_ref(),
                n,
                r,
                d,
                cfg.scenarios,
                &scenario_cfg,
                cell_seed,
            )
        })
        .collect();
    let results = results?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let mut csv = String::from(
        "n_agents,comm_radius,delay,scenarios,mean_cost,median_cost,p90_cost,mean_leader_error,median_leader_error,failure_rate\n",
    );
    for c in &results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.n_agents,
            c.comm_radius,
            c.delay,
            c.scenarios,
            c.mean_cost,
            c.median_cost,
            c.p90_cost,
            c.mean_leader_error,
            c.median_leader_error,
            c.failure_rate
        ));
    }
    fs::write(args.out.join("metrics.csv"), csv)?;
    println!("evaluated {} cells into {}", results.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Expert)]
    pub policy: PolicyKind,
    #[arg(long, default_value_t = 4)]
    pub n_agents: usize,
    /// Communication delay in steps.
    #[arg(long, default_value_t = 0)]
    pub delay: usize,
    #[command(flatten)]
    #[serde(default)]
    pub scenario: ScenarioOverrides,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SimulateConfig,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => read_json::<SimulateConfig>(path)?,
        None => args.overrides,
    };
    let params = match (cfg.policy, &args.weights) {
        (PolicyKind::Network, Some(path)) => Some(load_weights(path)?),
        (PolicyKind::Network, None) => {
            return Err(CliError::Invalid("network policy needs --weights".into()))
        }
        _ => None,
    };
    let scenario_cfg = cfg.scenario.apply(&ScenarioConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scenario = sample_scenario(&mut rng, cfg.n_agents, &scenario_cfg)?;
    let traj = match (cfg.policy, &params) {
        (PolicyKind::Network, Some(p)) => rollout(Policy::Network(p), &scenario, cfg.delay)?,
        (PolicyKind::Expert, _) => rollout(Policy::Expert, &scenario, 0)?,
        (PolicyKind::Zero, _) => rollout(Policy::Zero, &scenario, 0)?,
        _ => unreachable!(),
    };

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    write_json(&args.out.join("scenario.json"), &scenario)?;
    let mut csv = Vec::new();
    write_trajectory_csv(&traj, &mut csv)?;
    fs::write(args.out.join("rollout.csv"), csv)?;
    write_json(&args.out.join("summary.json"), &summarize(&traj))?;
    println!("rollout written to {}", args.out.display());
    Ok(())
}
