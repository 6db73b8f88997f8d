//! Training loops for the two policies.
//!
//! The agile policy is trained under full domain randomization with the
//! estimator learning *concurrently*: every search iteration scores a
//! population of policies, then fits the estimator on windows collected from
//! that iteration's elite rollouts, so the estimator always trains on data
//! from (approximately) the current policy. The conditioning vector the
//! policy sees is the truth/estimate fusion with the annealing schedule from
//! the estimator module — ground truth while the estimator is still poor,
//! the raw estimate by the end.
//!
//! The recovery policy is trained on a pure twist-tracking objective under
//! the same randomization, with no goal, no value function, and no
//! parameter conditioning.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{observe, step, Action, DynamicsConfig, EnvParams, ParamRanges};
use crate::error::{Error, Result};
use crate::estimator::{
    Estimator, EstimatorConfig, EstimatorSample, EstimateVector, SampleBuffer,
};
use crate::policies::cem::{self, Candidate, CemConfig, CemIterStats};
use crate::policies::{agile_act, recovery_act, PolicyConfig, PolicyParams, PolicyRole};
use crate::rng::{derive_rng, stream};
use crate::world::{StartRegion, WorldSpec};

/// Reward shaping for agile training. The chase is progress toward the goal;
/// safety enters only through the terminal collision penalty, so the agile
/// policy stays deliberately aggressive — tempering it is the safeguard's
/// job, not the reward's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Reward per meter of goal-distance reduction.
    pub progress_gain: f64,
    /// Terminal bonus for entering the goal disc.
    pub reach_bonus: f64,
    /// Terminal penalty for entering the failure set.
    pub collision_penalty: f64,
    /// Per-step cost on the squared twist command.
    pub action_cost: f64,
    /// Terminal penalty for running out the clock.
    pub timeout_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> RewardConfig {
        RewardConfig {
            progress_gain: 1.0,
            reach_bonus: 3.0,
            collision_penalty: 6.0,
            action_cost: 0.002,
            timeout_penalty: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("progress_gain", self.progress_gain),
            ("reach_bonus", self.reach_bonus),
            ("collision_penalty", self.collision_penalty),
            ("action_cost", self.action_cost),
            ("timeout_penalty", self.timeout_penalty),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("reward {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the agile policy's conditioning vector is formed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Truth/estimate fusion with the configured annealing schedule.
    Fused,
    /// Ground truth throughout (upper-bound ablation).
    TruthOnly,
    /// Raw estimate from step one (the "alpha = 0" ablation).
    EstimateOnly,
}

impl ConditioningMode {
    fn alpha(&self, schedule: crate::estimator::FusionSchedule, progress: f64) -> f64 {
        match self {
            ConditioningMode::Fused => schedule.alpha(progress),
            ConditioningMode::TruthOnly => 1.0,
            ConditioningMode::EstimateOnly => 0.0,
        }
    }
}

/// Everything agile training needs, borrowed from the experiment config.
#[derive(Debug, Clone, Copy)]
pub struct AgileSetup<'a> {
    pub world: &'a WorldSpec,
    pub start: &'a StartRegion,
    pub dyn_cfg: &'a DynamicsConfig,
    pub ranges: &'a ParamRanges,
    pub reward: &'a RewardConfig,
    pub policy_cfg: &'a PolicyConfig,
    pub cem: &'a CemConfig,
    pub est_cfg: &'a EstimatorConfig,
    pub conditioning: ConditioningMode,
}

/// Per-iteration trace of agile training, written to the phase artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgileIterTrace {
    pub iteration: usize,
    /// Truth weight used for conditioning this iteration.
    pub alpha: f64,
    /// Mean raw return over the whole population.
    pub mean_return: f64,
    /// Collision fraction over all rollouts of the iteration.
    pub collision_rate: f64,
    /// Reach fraction over all rollouts of the iteration.
    pub reach_rate: f64,
    /// Estimator loss on this iteration's fresh elite windows, measured
    /// *before* fitting on them (out-of-sample for the current net).
    pub estimator_loss: f64,
    /// Replay-buffer fill after the fit.
    pub buffer_len: usize,
}

/// Result bundle of phase-1 agile training.
#[derive(Debug, Clone)]
pub struct AgileTrainResult {
    pub policy: PolicyParams,
    pub estimator: Estimator,
    pub cem_stats: Vec<CemIterStats>,
    pub trace: Vec<AgileIterTrace>,
}

/// Outcome of a single training rollout.
#[derive(Debug, Clone)]
pub struct RolloutSummary {
    pub episode_return: f64,
    pub reached: bool,
    pub collided: bool,
    pub steps: usize,
    pub windows: Vec<EstimatorSample>,
}

/// Rolls out the agile policy once for training: fused conditioning, reward
/// accumulation, and window collection for the estimator.
#[allow(clippy::too_many_arguments)]
pub fn agile_training_rollout(
    setup: &AgileSetup,
    policy: &PolicyParams,
    estimator: &Estimator,
    alpha: f64,
    e: &EnvParams,
    start: crate::dynamics::State,
    noise_rng: &mut ChaCha8Rng,
    collect_windows: bool,
) -> Result<RolloutSummary> {
    let scaler = estimator.scaler();
    let truth = EstimateVector::from_env(e);
    let mut window = crate::estimator::HistoryWindow::new(estimator.history_len());
    let mut s = start;
    let mut a_prev = Action::ZERO;
    let mut ret = 0.0;
    let mut reached = false;
    let mut collided = false;
    let mut steps = 0;
    let mut windows = Vec::new();
    // Evenly spread sample slots across the horizon, skipping the first few
    // all-zero windows.
    let stride = (setup.dyn_cfg.horizon / setup.est_cfg.samples_per_episode.max(1)).max(1);
    let mut prev_l = setup.world.target_margin(s.position())?;

    for t in 0..setup.dyn_cfg.horizon {
        let m = setup.world.margins(s.position())?;
        if m.zeta > 0.0 {
            collided = true;
            ret -= setup.reward.collision_penalty;
            break;
        }
        if m.l <= 0.0 {
            reached = true;
            ret += setup.reward.reach_bonus;
            break;
        }
        let obs = observe(setup.dyn_cfg, setup.world, &s, a_prev, Some(noise_rng))?;
        let e_hat = estimator.estimate(&window)?;
        let cond = scaler.normalize(&truth.lerp(&e_hat, alpha));
        let a = agile_act(policy, setup.dyn_cfg, &obs, &cond)?;
        window.push(&obs, a);
        if collect_windows && t >= 4 && t % stride == 0 {
            windows.push(EstimatorSample { features: window.features(), target: scaler.normalize(&truth) });
        }
        ret += setup.reward.progress_gain * (prev_l - m.l) - setup.reward.action_cost * a.norm() * a.norm();
        prev_l = m.l;
        s = step(setup.dyn_cfg, &s, a, e)?;
        a_prev = a;
        steps = t + 1;
    }
    if !reached && !collided {
        let m = setup.world.margins(s.position())?;
        if m.zeta > 0.0 {
            collided = true;
            ret -= setup.reward.collision_penalty;
        } else if m.l <= 0.0 {
            reached = true;
            ret += setup.reward.reach_bonus;
        } else {
            ret -= setup.reward.timeout_penalty;
        }
    }
    Ok(RolloutSummary { episode_return: ret, reached, collided, steps, windows })
}

/// Shared state threaded through the agile search.
struct AgileShared {
    estimator: Estimator,
    buffer: SampleBuffer,
    trace: Vec<AgileIterTrace>,
}

/// Per-candidate auxiliary data.
struct AgileAux {
    windows: Vec<EstimatorSample>,
    collisions: usize,
    reaches: usize,
    episodes: usize,
}

/// Phase-1 training: cross-entropy search over agile weights with the
/// estimator fitted each iteration on elite rollout windows.
pub fn train_agile(setup: &AgileSetup, seed: u64) -> Result<AgileTrainResult> {
    setup.reward.validate()?;
    setup.est_cfg.validate()?;
    setup.ranges.validate(setup.dyn_cfg.base_mass)?;
    setup.start.validate(setup.world)?;
    let template = PolicyParams::zeros(PolicyRole::Agile, setup.policy_cfg, setup.dyn_cfg.n_rays)?;
    let estimator = Estimator::new(setup.est_cfg, setup.ranges, seed, &[stream::AGILE, 0])?;
    let mut shared = AgileShared {
        estimator,
        buffer: SampleBuffer::new(setup.est_cfg.buffer_capacity),
        trace: Vec::new(),
    };
    let iters = setup.cem.iterations;
    let schedule = setup.est_cfg.fusion;
    let progress_of = move |iter: usize| -> f64 {
        if iters <= 1 {
            1.0
        } else {
            iter as f64 / (iters - 1) as f64
        }
    };

    let (mean, cem_stats) = cem::optimize(
        setup.cem,
        template.num_weights(),
        seed,
        &[stream::AGILE, 1],
        &mut shared,
        |sh: &AgileShared, iter, cand, w| {
            let alpha = setup.conditioning.alpha(schedule, progress_of(iter));
            let mut policy = template.clone();
            policy.set_weights(w)?;
            let mut total = 0.0;
            let mut aux = AgileAux { windows: Vec::new(), collisions: 0, reaches: 0, episodes: 0 };
            for ep in 0..setup.cem.episodes_per_candidate {
                // Environments and starts are shared across the population
                // (common random numbers); sensor noise is too.
                let mut env_rng = derive_rng(seed, &[stream::AGILE, 2, iter as u64, ep as u64]);
                let e = setup.ranges.sample(&mut env_rng);
                let start = setup.start.sample(&mut env_rng);
                let mut noise_rng = derive_rng(seed, &[stream::AGILE, 3, iter as u64, ep as u64, cand as u64]);
                let summary = agile_training_rollout(
                    setup,
                    &policy,
                    &sh.estimator,
                    alpha,
                    &e,
                    start,
                    &mut noise_rng,
                    true,
                )?;
                total += summary.episode_return;
                aux.collisions += summary.collided as usize;
                aux.reaches += summary.reached as usize;
                aux.episodes += 1;
                aux.windows.extend(summary.windows);
            }
            Ok((total / setup.cem.episodes_per_candidate as f64, aux))
        },
        |sh: &mut AgileShared, iter, ranked: &[Candidate<AgileAux>]| {
            let alpha = setup.conditioning.alpha(schedule, progress_of(iter));
            let fresh: Vec<EstimatorSample> = ranked[..setup.cem.elites]
                .iter()
                .flat_map(|c| c.aux.windows.iter().cloned())
                .collect();
            // Measure on the fresh windows before training touches them.
            let loss_fresh = if fresh.is_empty() { f64::NAN } else { sh.estimator.loss(&fresh)? };
            for s in fresh {
                sh.buffer.push(s);
            }
            if !sh.buffer.is_empty() {
                sh.estimator.fit(
                    &sh.buffer.as_vec(),
                    setup.est_cfg,
                    seed,
                    &[stream::AGILE, 4, iter as u64],
                )?;
            }
            let episodes: usize = ranked.iter().map(|c| c.aux.episodes).sum();
            let collisions: usize = ranked.iter().map(|c| c.aux.collisions).sum();
            let reaches: usize = ranked.iter().map(|c| c.aux.reaches).sum();
            sh.trace.push(AgileIterTrace {
                iteration: iter,
                alpha,
                mean_return: ranked.iter().map(|c| c.mean_return).sum::<f64>() / ranked.len() as f64,
                collision_rate: collisions as f64 / episodes.max(1) as f64,
                reach_rate: reaches as f64 / episodes.max(1) as f64,
                estimator_loss: loss_fresh,
                buffer_len: sh.buffer.len(),
            });
            Ok(())
        },
        |mean: &mut [f64]| {
            let shrink = 1.0 - setup.policy_cfg.l2_coeff;
            for w in mean.iter_mut() {
                *w = (*w * shrink).clamp(-setup.policy_cfg.weight_clip, setup.policy_cfg.weight_clip);
            }
        },
    )?;

    let mut policy = template;
    policy.set_weights(&mean)?;
    Ok(AgileTrainResult { policy, estimator: shared.estimator, cem_stats, trace: shared.trace })
}

/// Everything recovery training needs.
#[derive(Debug, Clone, Copy)]
pub struct RecoverySetup<'a> {
    pub world: &'a WorldSpec,
    pub dyn_cfg: &'a DynamicsConfig,
    pub ranges: &'a ParamRanges,
    pub policy_cfg: &'a PolicyConfig,
    pub cem: &'a CemConfig,
    /// Steps per tracking episode.
    pub episode_len: usize,
}

/// Mean squared twist-tracking cost of an arbitrary controller over
/// randomized parameters, starting twists, and target twists. Lower is
/// better; used both as the recovery training objective and to compare the
/// trained policy against the feed-through baseline.
pub fn twist_tracking_cost(
    setup: &RecoverySetup,
    controller: impl Fn(&crate::dynamics::Observation, Action) -> Result<Action>,
    episodes: usize,
    seed: u64,
    path: &[u64],
) -> Result<f64> {
    use rand::Rng;
    if episodes == 0 {
        return Err(Error::Contract("tracking cost needs at least one episode".into()));
    }
    let cfg = setup.dyn_cfg;
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut rng = derive_rng(seed, &[path, &[ep as u64]].concat());
        let e = setup.ranges.sample(&mut rng);
        // Start mid-arena with a random twist; walls are irrelevant to the
        // tracking objective.
        let cx = 0.5 * (setup.world.arena.x_min + setup.world.arena.x_max);
        let cy = 0.5 * (setup.world.arena.y_min + setup.world.arena.y_max);
        let mut s = crate::dynamics::State::new(
            cx,
            cy,
            rng.random_range(-3.0..3.0),
            rng.random_range(-0.5..3.0),
            rng.random_range(-2.0..2.0),
        );
        let target = Action::new(
            rng.random_range(cfg.v_cmd_min..cfg.v_cmd_max),
            rng.random_range(-cfg.omega_cmd_max..cfg.omega_cmd_max),
        );
        let mut a_prev = Action::ZERO;
        let mut cost = 0.0;
        for _ in 0..setup.episode_len {
            let obs = observe(cfg, setup.world, &s, a_prev, Some(&mut rng))?;
            let a = controller(&obs, target)?;
            let dv = s.v - target.v_cmd;
            let dw = s.omega - target.omega_cmd;
            cost += dv * dv + 0.5 * dw * dw;
            s = step(cfg, &s, a, &e)?;
            a_prev = a;
        }
        total += cost / setup.episode_len as f64;
    }
    Ok(total / episodes as f64)
}

/// Phase-1 training of the recovery twist tracker.
pub fn train_recovery(setup: &RecoverySetup, seed: u64) -> Result<(PolicyParams, Vec<CemIterStats>)> {
    setup.ranges.validate(setup.dyn_cfg.base_mass)?;
    if setup.episode_len == 0 {
        return Err(Error::Config("recovery episode length must be positive".into()));
    }
    let template = PolicyParams::zeros(PolicyRole::Recovery, setup.policy_cfg, setup.dyn_cfg.n_rays)?;
    let (mean, stats) = cem::optimize(
        setup.cem,
        template.num_weights(),
        seed,
        &[stream::RECOVERY, 0],
        &mut (),
        |_, iter, _cand, w| {
            let mut policy = template.clone();
            policy.set_weights(w)?;
            let cost = twist_tracking_cost(
                setup,
                |obs, target| recovery_act(&policy, setup.dyn_cfg, obs, target),
                setup.cem.episodes_per_candidate,
                seed,
                // Episodes are shared across candidates within an iteration
                // (common random numbers): the candidate index deliberately
                // stays out of the stream path.
                &[stream::RECOVERY, 1, iter as u64],
            )?;
            Ok((-cost, ()))
        },
        |_, _, _: &[Candidate<()>]| Ok(()),
        |mean: &mut [f64]| {
            let shrink = 1.0 - setup.policy_cfg.l2_coeff;
            for w in mean.iter_mut() {
                *w = (*w * shrink).clamp(-setup.policy_cfg.weight_clip, setup.policy_cfg.weight_clip);
            }
        },
    )?;
    let mut policy = template;
    policy.set_weights(&mean)?;
    Ok((policy, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::TwistFeedthrough;
    use crate::world::Rect;

    pub(crate) fn small_world() -> WorldSpec {
        WorldSpec {
            arena: Rect { x_min: 0.0, x_max: 6.0, y_min: -2.5, y_max: 2.5 },
            goal_center: [5.2, 0.0],
            goal_radius: 0.35,
            obstacles: vec![crate::world::Disc { center: [2.6, 0.1], radius: 0.5 }],
        }
    }

    pub(crate) fn start_region() -> StartRegion {
        StartRegion { x: [0.4, 0.9], y: [-1.5, 1.5], theta: [-0.5, 0.5] }
    }

    fn smoke_cem() -> CemConfig {
        CemConfig {
            population: 8,
            elites: 3,
            iterations: 3,
            init_std: 0.4,
            min_std: 0.02,
            extra_std: 0.2,
            episodes_per_candidate: 1,
            l2_penalty: 1e-4,
            weight_clip: 4.0,
        }
    }

    fn smoke_est() -> EstimatorConfig {
        EstimatorConfig {
            history_len: 10,
            hidden: 16,
            epochs: 2,
            buffer_capacity: 256,
            samples_per_episode: 6,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn agile_training_runs_and_is_deterministic() {
        let world = small_world();
        let start = start_region();
        let dyn_cfg = DynamicsConfig { horizon: 40, ..DynamicsConfig::default() };
        let ranges = ParamRanges::default();
        let reward = RewardConfig::default();
        let policy_cfg = PolicyConfig { hidden: 8, ..PolicyConfig::default() };
        let cem = smoke_cem();
        let est_cfg = smoke_est();
        let setup = AgileSetup {
            world: &world,
            start: &start,
            dyn_cfg: &dyn_cfg,
            ranges: &ranges,
            reward: &reward,
            policy_cfg: &policy_cfg,
            cem: &cem,
            est_cfg: &est_cfg,
            conditioning: ConditioningMode::Fused,
        };
        let a = train_agile(&setup, 1234).unwrap();
        let b = train_agile(&setup, 1234).unwrap();
        assert_eq!(a.policy.weights(), b.policy.weights());
        assert_eq!(a.estimator.net().params(), b.estimator.net().params());
        assert_eq!(a.trace.len(), cem.iterations);
        // Alpha anneals from 1 to 0 across iterations under the default
        // schedule.
        assert_eq!(a.trace[0].alpha, 1.0);
        assert_eq!(a.trace.last().unwrap().alpha, 0.0);
        // The estimator actually trained on something.
        assert!(a.trace.last().unwrap().buffer_len > 0);
    }

    #[test]
    fn training_rollout_terminates_on_reach() {
        let world = small_world();
        let dyn_cfg = DynamicsConfig::default();
        let ranges = ParamRanges::default();
        let reward = RewardConfig::default();
        let policy_cfg = PolicyConfig { hidden: 8, ..PolicyConfig::default() };
        let cem = smoke_cem();
        let est_cfg = smoke_est();
        let start = start_region();
        let setup = AgileSetup {
            world: &world,
            start: &start,
            dyn_cfg: &dyn_cfg,
            ranges: &ranges,
            reward: &reward,
            policy_cfg: &policy_cfg,
            cem: &cem,
            est_cfg: &est_cfg,
            conditioning: ConditioningMode::TruthOnly,
        };
        let estimator = Estimator::new(&est_cfg, &ranges, 7, &[0]).unwrap();
        let policy = PolicyParams::zeros(PolicyRole::Agile, &policy_cfg, dyn_cfg.n_rays).unwrap();
        // Start inside the goal disc: immediate reach classification.
        let start_state = crate::dynamics::State::new(5.2, 0.0, 0.0, 0.0, 0.0);
        let mut rng = derive_rng(7, &[1]);
        let summary = agile_training_rollout(
            &setup,
            &policy,
            &estimator,
            1.0,
            &EnvParams::nominal(),
            start_state,
            &mut rng,
            false,
        )
        .unwrap();
        assert!(summary.reached);
        assert!(!summary.collided);
        assert_eq!(summary.steps, 0);
        assert!(summary.episode_return >= reward.reach_bonus - 1e-9);
    }

    #[test]
    fn recovery_training_beats_zero_policy_and_approaches_feedthrough() {
        let world = small_world();
        let dyn_cfg = DynamicsConfig::default();
        let ranges = ParamRanges::default();
        let policy_cfg = PolicyConfig { hidden: 8, ..PolicyConfig::default() };
        let cem = CemConfig {
            population: 32,
            elites: 8,
            iterations: 40,
            extra_std: 0.15,
            episodes_per_candidate: 3,
            ..smoke_cem()
        };
        let setup = RecoverySetup {
            world: &world,
            dyn_cfg: &dyn_cfg,
            ranges: &ranges,
            policy_cfg: &policy_cfg,
            cem: &cem,
            episode_len: 30,
        };
        let (trained, stats) = train_recovery(&setup, 88).unwrap();
        assert_eq!(stats.len(), cem.iterations);

        // Held-out comparison: trained near feed-through, far below zeros.
        // (Per-iteration fitness values are not compared across iterations —
        // every iteration scores on freshly drawn environments.)
        let eval_eps = 16;
        let trained_cost = twist_tracking_cost(
            &setup,
            |o, t| recovery_act(&trained, &dyn_cfg, o, t),
            eval_eps,
            555,
            &[9],
        )
        .unwrap();
        let zero = PolicyParams::zeros(PolicyRole::Recovery, &policy_cfg, dyn_cfg.n_rays).unwrap();
        let zero_cost = twist_tracking_cost(
            &setup,
            |o, t| recovery_act(&zero, &dyn_cfg, o, t),
            eval_eps,
            555,
            &[9],
        )
        .unwrap();
        let ft_cost = twist_tracking_cost(
            &setup,
            |_o, t| Ok(TwistFeedthrough.act(&dyn_cfg, t)),
            eval_eps,
            555,
            &[9],
        )
        .unwrap();
        assert!(
            trained_cost < zero_cost,
            "training did not improve tracking: {trained_cost} vs zero {zero_cost}"
        );
        assert!(
            trained_cost < 2.0 * ft_cost,
            "trained tracker far from feed-through: {trained_cost} vs {ft_cost}"
        );
    }
}
