//! Imitation training: minibatch backpropagation through time with the
//! stability penalty, expert relabeling rounds, and per-epoch certificates.

use crate::flocking::{rollout, sample_scenario, Policy, Scenario, ScenarioConfig, Trajectory};
use crate::ggnn::{deep_forward, Architecture, LayerParams, NetworkParams};
use crate::graph::{default_support_bound, stacked_shift_norm_bound, SupportKind};
use crate::mat::Mat;
use crate::stability::{certify, diss_margin, RegularizerConfig, StabilityCertificate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::dataset::{Dataset, Split};
use super::model::{
    flatten_grads, flatten_params, load_params, n_parameters, penalty_gradient, prepare_sample,
    window_gradient, PreparedSample,
};
use super::LearnError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub regularizer: RegularizerConfig,
    /// Disable to train the unconstrained baseline.
    pub penalty_enabled: bool,
    /// Hidden state width F.
    pub features: usize,
    /// Filter length K.
    pub k_order: usize,
    /// Stack depth M.
    pub n_layers: usize,
    /// Encoder/head width.
    pub hidden_width: usize,
    pub batch_size: usize,
    /// Backpropagation-through-time window; None means the full horizon.
    pub bptt_window: Option<usize>,
    /// Run an expert-relabeling round every this many epochs (0 = never).
    pub dagger_every: usize,
    pub dagger_rollouts: usize,
    /// Team sizes sampled for relabeling rollouts.
    pub team_sizes: Vec<usize>,
    pub scenario: ScenarioConfig,
    pub support_kind: SupportKind,
    /// Rescale fresh layer banks so the initial incremental margin does not
    /// exceed this value; None keeps the raw fan-in initialization.
    pub init_margin_target: Option<f64>,
    /// Temperature of the log-sum-exp norm surrogate the penalty descends.
    /// Zero differentiates the exact max norms, whose one-column
    /// subgradient is too narrow to counter broad imitation pressure.
    pub margin_softness: f64,
    /// Assumed support norm bound; None derives it from the support kind.
    pub s_bar: Option<f64>,
    /// Assumed stacked-shift norm bound; None derives the geometric sum.
    pub s_k_bar: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 120,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            regularizer: RegularizerConfig::default(),
            penalty_enabled: true,
            features: 50,
            k_order: 2,
            n_layers: 1,
            hidden_width: 128,
            batch_size: 8,
            bptt_window: None,
            dagger_every: 20,
            dagger_rollouts: 4,
            team_sizes: vec![4, 6, 10, 12, 15],
            scenario: ScenarioConfig::default(),
            support_kind: SupportKind::NormalizedLaplacian,
            init_margin_target: Some(0.9),
            margin_softness: 0.05,
            s_bar: None,
            s_k_bar: None,
        }
    }
}

impl TrainConfig {
    pub fn resolved_s_bar(&self) -> f64 {
        self.s_bar.unwrap_or_else(|| {
            let max_team = self.team_sizes.iter().copied().max().unwrap_or(4);
            default_support_bound(self.support_kind, max_team)
        })
    }

    pub fn resolved_s_k_bar(&self) -> f64 {
        self.s_k_bar
            .unwrap_or_else(|| stacked_shift_norm_bound(self.resolved_s_bar(), self.k_order))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_mse: f64,
    pub penalty: f64,
    pub diss_margins: Vec<f64>,
    pub dataset_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub aborted: Option<String>,
    pub final_certificate: StabilityCertificate,
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub report: TrainReport,
}

/// Scales a fresh layer's banks down until its incremental margin is at
/// most `target`. Raw fan-in initialization puts margins in the hundreds
/// (the norms multiply), far beyond what the hinge can walk back within a
/// training budget, so certified training starts inside the region it is
/// meant to keep.
fn rescale_layer_to_margin(layer: &mut LayerParams, target: f64, s_k_bar: f64) {
    if diss_margin(layer, s_k_bar, s_k_bar) <= target {
        return;
    }
    let a = layer.state_x.stacked_norm();
    let b = layer.state_u.stacked_norm();
    let fx = layer.forget_x.stacked_norm();
    let fu = layer.forget_u.stacked_norm();
    let ix = layer.input_x.stacked_norm();
    let bias = layer.forget_bias.sup_norm();
    let margin_at = |alpha: f64| -> f64 {
        let gate = crate::ggnn::logistic(s_k_bar * alpha * (fx + fu) + bias);
        gate * s_k_bar * alpha * a + 0.25 * s_k_bar * s_k_bar * alpha * alpha * (fx * a + ix * b)
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if margin_at(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    for bank in [
        &mut layer.state_x,
        &mut layer.state_u,
        &mut layer.forget_x,
        &mut layer.forget_u,
        &mut layer.input_x,
        &mut layer.input_u,
    ] {
        bank.scale_taps(lo);
    }
}

/// Fresh network for the flocking task per the training configuration.
pub fn init_network<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> NetworkParams {
    let arch = Architecture {
        raw_input_width: 10,
        hidden_width: cfg.hidden_width,
        features: cfg.features,
        k_order: cfg.k_order,
        n_layers: cfg.n_layers,
        control_width: 2,
        saturation: cfg.scenario.saturation,
        support_kind: cfg.support_kind,
    };
    let mut net = NetworkParams::random(&arch, rng);
    if let Some(target) = cfg.init_margin_target {
        let s_k_bar = cfg.resolved_s_k_bar();
        for layer in &mut net.layers {
            rescale_layer_to_margin(layer, target, s_k_bar);
        }
    }
    net
}

fn validation_mse(net: &NetworkParams, samples: &[&PreparedSample]) -> Result<f64, LearnError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for sample in samples {
        let mut states = net.zero_states(sample.n_agents);
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in 0..sample.steps() {
            let support = crate::graph::SupportMatrix::from_mat(
                net.support_kind,
                sample.supports[t].as_ref().clone(),
            );
            let (pred, next) = deep_forward(net, &support, &states, &sample.features[t])?;
            states = next;
            for (p, e) in pred.data().iter().zip(sample.targets[t].data()) {
                acc += (p - e) * (p - e);
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Gradient of the window-mean imitation loss over one trajectory, with
/// windows chained through detached hidden states.
fn trajectory_gradient(
    net: &NetworkParams,
    sample: &PreparedSample,
    window: usize,
) -> Result<(f64, Vec<Mat>), LearnError> {
    let steps = sample.steps();
    let mut states: Vec<Mat> = net
        .zero_states(sample.n_agents)
        .into_iter()
        .map(|s| s.into_mat())
        .collect();
    let mut grads: Option<Vec<Mat>> = None;
    let mut mse_weighted = 0.0;
    let mut start = 0;
    while start < steps {
        let end = (start + window).min(steps);
        let wg = window_gradient(net, sample, start, end, &states)?;
        let weight = (end - start) as f64 / steps as f64;
        mse_weighted += wg.mse * weight;
        match &mut grads {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&wg.grads) {
                    a.add_assign(&g.scale(weight));
                }
            }
            None => grads = Some(wg.grads.iter().map(|g| g.scale(weight)).collect()),
        }
        states = wg.final_states;
        start = end;
    }
    Ok((mse_weighted, grads.expect("non-empty trajectory")))
}

/// Relabels a policy rollout with the expert's action at every visited
/// state; the returned trajectory carries the expert labels as controls.
pub fn relabeled_rollout(
    policy: Policy<'_>,
    scenario: &Scenario,
) -> Result<Trajectory, LearnError> {
    let mut traj = rollout(policy, scenario, 0)?;
    for t in 0..traj.steps() {
        let label = crate::flocking::expert_control(
            &traj.states[t],
            &traj.graphs[t],
            scenario.leader_gain,
            scenario.sensing_radius,
            scenario.ca_threshold,
            scenario.saturation,
        )?;
        traj.controls[t] = label;
    }
    Ok(traj)
}

/// One expert-relabeling round: rolls the learned policy on fresh
/// scenarios, labels every visited state with the expert control, and
/// appends the results to the training split. Returns how many labeled
/// states were added. Rollouts that end in failure are kept; those are the
/// informative ones.
pub fn dagger_round<R: Rng>(
    net: &NetworkParams,
    dataset: &mut Dataset,
    rollouts: usize,
    team_sizes: &[usize],
    scenario_cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<usize, LearnError> {
    let mut added = 0;
    for _ in 0..rollouts {
        let n = team_sizes[rng.gen_range(0..team_sizes.len())];
        let scenario = sample_scenario(rng, n, scenario_cfg)?;
        let traj = relabeled_rollout(Policy::Network(net), &scenario)?;
        added += traj.steps();
        dataset.push_train(scenario, traj);
    }
    Ok(added)
}

/// Full training run. Returns the best-validation parameters and the
/// per-epoch report; a non-finite loss aborts with the last finished
/// epoch's parameters.
pub fn train(cfg: &TrainConfig, dataset: &mut Dataset) -> Result<TrainOutcome, LearnError> {
    cfg.regularizer.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init_network(cfg, &mut rng);
    let s_bar = cfg.resolved_s_bar();
    let s_k_bar = cfg.resolved_s_k_bar();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        aborted: None,
        final_certificate: certify(&net, s_bar, s_k_bar),
    };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params: net, report });
    }

    let mut prepared: Vec<PreparedSample> = dataset
        .samples
        .iter()
        .map(|s| prepare_sample(&s.trajectory, cfg.support_kind))
        .collect();

    let mut adam = Adam::new(n_parameters(&net), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut last_good = net.clone();

    'epochs: for epoch in 1..=cfg.epochs {
        let mut train_indices = dataset.indices(Split::Train);
        train_indices.shuffle(&mut rng);
        let window = cfg.bptt_window.unwrap_or(usize::MAX).max(1);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in train_indices.chunks(cfg.batch_size.max(1)) {
            let mut batch_grads: Option<Vec<f64>> = None;
            let mut batch_mse = 0.0;
            for &idx in batch {
                let sample = &prepared[idx];
                let (mse, grads) = trajectory_gradient(&net, sample, window)?;
                batch_mse += mse;
                let flat = flatten_grads(&grads);
                match &mut batch_grads {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&flat) {
                            *a += g;
                        }
                    }
                    None => batch_grads = Some(flat),
                }
            }
            let mut flat_grads = batch_grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut flat_grads {
                *g *= scale;
            }
            batch_mse *= scale;

            let mut penalty_value = 0.0;
            if cfg.penalty_enabled {
                let (pen, pen_grads) =
                    penalty_gradient(&net, &cfg.regularizer, s_k_bar, cfg.margin_softness)?;
                penalty_value = pen;
                for (a, g) in flat_grads.iter_mut().zip(flatten_grads(&pen_grads)) {
                    *a += g;
                }
            }

            let batch_loss = batch_mse + penalty_value;
            if !batch_loss.is_finite() {
                report.aborted = Some(format!("non-finite loss in epoch {epoch}"));
                net = last_good;
                break 'epochs;
            }

            let mut flat_params = flatten_params(&net);
            adam.step(&mut flat_params, &flat_grads)?;
            load_params(&mut net, &flat_params);

            epoch_loss += batch_loss;
            n_batches += 1;
        }

        let margins: Vec<f64> = net
            .layers
            .iter()
            .map(|l| diss_margin(l, s_bar, s_k_bar))
            .collect();
        let penalty = crate::stability::stability_penalty(&margins, &cfg.regularizer);
        let val_refs: Vec<&PreparedSample> = dataset
            .indices(Split::Validation)
            .into_iter()
            .map(|i| &prepared[i])
            .collect();
        let val_mse = validation_mse(&net, &val_refs)?;
        let train_loss = if n_batches > 0 { epoch_loss / n_batches as f64 } else { 0.0 };

        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_mse: val_mse,
            penalty,
            diss_margins: margins,
            dataset_size: dataset.len(),
        });

        let selection_metric = if val_mse.is_nan() { train_loss } else { val_mse };
        if best.as_ref().map_or(true, |(m, _, _)| selection_metric < *m) {
            best = Some((selection_metric, epoch, net.clone()));
        }
        last_good = net.clone();

        if cfg.dagger_every > 0 && epoch % cfg.dagger_every == 0 && epoch < cfg.epochs {
            let before = dataset.len();
            dagger_round(
                &net,
                dataset,
                cfg.dagger_rollouts,
                &cfg.team_sizes,
                &cfg.scenario,
                &mut rng,
            )?;
            for sample in &dataset.samples[before..] {
                prepared.push(prepare_sample(&sample.trajectory, cfg.support_kind));
            }
        }
    }

    if report.aborted.is_none() {
        if let Some((_, epoch, params)) = best {
            report.best_epoch = Some(epoch);
            net = params;
        }
    }
    report.final_certificate = certify(&net, s_bar, s_k_bar);
    Ok(TrainOutcome { params: net, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::dataset::generate_expert_dataset;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 3;
        cfg.features = 4;
        cfg.k_order = 1;
        cfg.hidden_width = 6;
        cfg.batch_size = 4;
        cfg.dagger_every = 2;
        cfg.dagger_rollouts = 1;
        cfg.team_sizes = vec![3];
        cfg.scenario.horizon = 0.3;
        cfg
    }

    fn tiny_dataset(cfg: &TrainConfig, seed: u64, count: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_expert_dataset(count, &cfg.team_sizes, &cfg.scenario, &mut rng).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let mut dataset = tiny_dataset(&cfg, 1, 4);
        let out = train(&cfg, &mut dataset).unwrap();
        assert!(out.report.epochs.is_empty());
        assert!(out.report.best_epoch.is_none());
        // Margin-targeted initialization starts inside the certified region.
        assert!(out.report.final_certificate.verdict_diss);
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let cfg = tiny_config();
        let mut d1 = tiny_dataset(&cfg, 2, 5);
        let mut d2 = tiny_dataset(&cfg, 2, 5);
        let out1 = train(&cfg, &mut d1).unwrap();
        let out2 = train(&cfg, &mut d2).unwrap();
        assert_eq!(out1.params, out2.params);
        for (a, b) in out1.report.epochs.iter().zip(&out2.report.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.validation_mse.to_bits(), b.validation_mse.to_bits());
        }
    }

    #[test]
    fn dagger_bookkeeping_adds_exactly_the_rollout_horizons() {
        let cfg = tiny_config();
        let mut dataset = tiny_dataset(&cfg, 3, 4);
        let before_samples = dataset.len();
        let before_states = dataset.labeled_states();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = init_network(&cfg, &mut rng);
        let added =
            dagger_round(&net, &mut dataset, 2, &cfg.team_sizes, &cfg.scenario, &mut rng).unwrap();
        assert_eq!(dataset.len(), before_samples + 2);
        assert_eq!(dataset.labeled_states(), before_states + added);
        assert!(dataset.samples[before_samples..].iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn dagger_round_of_zero_rollouts_is_a_no_op() {
        let cfg = tiny_config();
        let mut dataset = tiny_dataset(&cfg, 4, 3);
        let before = dataset.labeled_states();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = init_network(&cfg, &mut rng);
        let added =
            dagger_round(&net, &mut dataset, 0, &cfg.team_sizes, &cfg.scenario, &mut rng).unwrap();
        assert_eq!(added, 0);
        assert_eq!(dataset.labeled_states(), before);
    }

    #[test]
    fn expert_relabeling_expert_rollout_is_self_consistent() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scenario = sample_scenario(&mut rng, 3, &cfg.scenario).unwrap();
        let plain = rollout(Policy::Expert, &scenario, 0).unwrap();
        let relabeled = relabeled_rollout(Policy::Expert, &scenario).unwrap();
        for (a, b) in plain.controls.iter().zip(&relabeled.controls) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn initial_margins_respect_the_target() {
        let mut cfg = tiny_config();
        cfg.features = 16;
        cfg.k_order = 2;
        cfg.hidden_width = 32;
        cfg.init_margin_target = Some(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = init_network(&cfg, &mut rng);
        let s_k_bar = cfg.resolved_s_k_bar();
        for layer in &net.layers {
            let m = diss_margin(layer, cfg.resolved_s_bar(), s_k_bar);
            assert!(m <= 0.9 + 1e-9, "initial margin {m}");
            assert!(m > 0.5, "rescale should stop near the target, got {m}");
        }
    }

    #[test]
    fn raising_the_upper_slope_never_raises_final_margins() {
        for seed in [21u64, 22, 23] {
            let mut cfg = tiny_config();
            cfg.seed = seed;
            cfg.epochs = 4;
            cfg.dagger_every = 0;
            let mut strong = cfg.clone();
            strong.regularizer.rho_plus = 10.0;

            let mut d1 = tiny_dataset(&cfg, seed, 4);
            let mut d2 = tiny_dataset(&cfg, seed, 4);
            let weak_out = train(&cfg, &mut d1).unwrap();
            let strong_out = train(&strong, &mut d2).unwrap();
            let weak_margin = weak_out
                .report
                .final_certificate
                .layers
                .iter()
                .map(|l| l.diss_margin)
                .fold(0.0, f64::max);
            let strong_margin = strong_out
                .report
                .final_certificate
                .layers
                .iter()
                .map(|l| l.diss_margin)
                .fold(0.0, f64::max);
            assert!(
                strong_margin <= weak_margin + 1e-9,
                "seed {seed}: {strong_margin} > {weak_margin}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_one_composed_step() {
        // Single layer update + readout + penalty, desk instance, seed 7.
        let mut cfg = tiny_config();
        cfg.features = 2;
        cfg.hidden_width = 3;
        cfg.team_sizes = vec![3];
        cfg.scenario.horizon = 0.01; // a single labeled step
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dataset = {
            let mut d = generate_expert_dataset(1, &[3], &cfg.scenario, &mut rng).unwrap();
            d.samples[0].split = Split::Train;
            d
        };
        let net = init_network(&cfg, &mut rng);
        let sample = prepare_sample(&dataset.samples[0].trajectory, cfg.support_kind);
        let s_k_bar = cfg.resolved_s_k_bar();

        let loss_of = |flat: &[f64]| -> f64 {
            let mut candidate = net.clone();
            load_params(&mut candidate, flat);
            let states: Vec<Mat> = candidate
                .zero_states(3)
                .into_iter()
                .map(|s| s.into_mat())
                .collect();
            let wg = window_gradient(&candidate, &sample, 0, 1, &states).unwrap();
            let (pen, _) = penalty_gradient(&candidate, &cfg.regularizer, s_k_bar, cfg.margin_softness).unwrap();
            wg.mse + pen
        };

        let states: Vec<Mat> = net.zero_states(3).into_iter().map(|s| s.into_mat()).collect();
        let wg = window_gradient(&net, &sample, 0, 1, &states).unwrap();
        let (_, pen_grads) = penalty_gradient(&net, &cfg.regularizer, s_k_bar, cfg.margin_softness).unwrap();
        let mut analytic = flatten_grads(&wg.grads);
        for (a, g) in analytic.iter_mut().zip(flatten_grads(&pen_grads)) {
            *a += g;
        }

        let flat = flatten_params(&net);
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let ad = analytic[i];
            let denom = fd.abs().max(ad.abs()).max(1e-4);
            assert!(
                (fd - ad).abs() / denom <= 1e-4,
                "coordinate {i}: fd {fd} vs ad {ad}"
            );
        }
    }
}
