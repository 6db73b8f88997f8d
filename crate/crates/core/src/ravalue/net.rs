//! Distilled value network: the deployable realization of the reach-avoid
//! value, conditioned on the physics estimate.
//!
//! Where the table needs a fixed benchmark world and enumerable physics bins,
//! the network reads a compact geometric feature vector (goal and nearest
//! obstacles in the body frame) plus the full normalized estimate, so one
//! model covers randomized layouts and all five estimated parameters. It is
//! trained by fitted value iteration over recorded transitions: each target
//! applies the one-step backup to a periodically refreshed frozen copy of the
//! network, which is the stochastic analogue of the table's Jacobi sweep.
//!
//! Because the backup clamps its result between the failure margin and the
//! stationary payoff, every regression target inherits the sign guarantees
//! of the exact operator — in particular a target at a failing state is never
//! below that state's failure margin, however wrong the bootstrap still is.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::drabe_backup;
use crate::dynamics::{observe, step, Action, DynamicsConfig, EnvParams, Observation, State};
use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{EstimateVector, ParamScaler, ESTIMATED_DIM};
use crate::nn::{Activation, Mlp, Sgd};
use crate::rng::derive_rng;
use crate::world::WorldSpec;

/// Obstacle slots in the feature vector; layouts with more obstacles
/// contribute their nearest `K_OBSTACLES`, layouts with fewer pad with a
/// far-away sentinel.
pub const K_OBSTACLES: usize = 3;

/// Geometric state features: goal offset (2), `K_OBSTACLES` obstacle slots
/// of offset plus radius (3 each), speed, and yaw rate.
pub const STATE_FEATURES: usize = 2 + 3 * K_OBSTACLES + 2;

/// Length scale for offsets in the feature vector, and the clamp applied
/// after scaling. A sentinel obstacle is placed at this clamped distance
/// straight ahead so "no obstacle" looks like "obstacle far away".
const OFFSET_SCALE: f64 = 4.0;
const OFFSET_CLAMP: f64 = 2.0;

/// Scaled geometric features of one state in one world.
///
/// Offsets are rotated into the body frame (so the features are invariant to
/// global pose, matching what the range sensor can perceive), divided by
/// [`OFFSET_SCALE`], and clamped to `+-`[`OFFSET_CLAMP`]. Obstacles are
/// ordered by boundary distance (center distance minus radius).
pub fn state_features(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    s: &State,
) -> Result<[f64; STATE_FEATURES]> {
    ensure_finite("state", &s.as_array())?;
    let (sin_t, cos_t) = s.theta.sin_cos();
    let to_body = |target: [f64; 2]| -> [f64; 2] {
        let dx = target[0] - s.x;
        let dy = target[1] - s.y;
        [cos_t * dx + sin_t * dy, -sin_t * dx + cos_t * dy]
    };
    let scale = |v: f64| (v / OFFSET_SCALE).clamp(-OFFSET_CLAMP, OFFSET_CLAMP);

    let mut f = [0.0; STATE_FEATURES];
    let goal = to_body(world.goal_center);
    f[0] = scale(goal[0]);
    f[1] = scale(goal[1]);

    let mut order: Vec<usize> = (0..world.obstacles.len()).collect();
    let boundary_dist = |i: usize| {
        let ob = &world.obstacles[i];
        ((ob.center[0] - s.x).powi(2) + (ob.center[1] - s.y).powi(2)).sqrt() - ob.radius
    };
    order.sort_by(|&a, &b| boundary_dist(a).total_cmp(&boundary_dist(b)));
    for k in 0..K_OBSTACLES {
        let base = 2 + 3 * k;
        match order.get(k) {
            Some(&i) => {
                let rel = to_body(world.obstacles[i].center);
                f[base] = scale(rel[0]);
                f[base + 1] = scale(rel[1]);
                f[base + 2] = world.obstacles[i].radius;
            }
            None => {
                f[base] = OFFSET_CLAMP;
                f[base + 1] = 0.0;
                f[base + 2] = 0.0;
            }
        }
    }
    f[STATE_FEATURES - 2] = s.v / cfg.v_max;
    f[STATE_FEATURES - 1] = s.omega / cfg.omega_cmd_max;
    Ok(f)
}

/// Feature vector of the laterally mirrored scene: every body-frame lateral
/// offset and the yaw rate change sign, forward offsets, radii, and speed do
/// not.
///
/// The planar dynamics are equivariant under this reflection once the lateral
/// center-of-mass shift is negated along with it, so the true value function
/// satisfies `V(f, e) = V(mirror f, mirror e)` exactly. The network bakes the
/// identity in by averaging over the pair (see [`RaNet::value_from_features`]).
pub fn mirror_features(f: &[f64; STATE_FEATURES]) -> [f64; STATE_FEATURES] {
    let mut m = *f;
    m[1] = -m[1];
    for k in 0..K_OBSTACLES {
        m[2 + 3 * k + 1] = -m[2 + 3 * k + 1];
    }
    m[STATE_FEATURES - 1] = -m[STATE_FEATURES - 1];
    m
}

/// One recorded closed-loop transition, ready for fitted value iteration.
///
/// Margins are taken at the *pre*-transition state and normalized; the
/// conditioning vector is whatever the recording loop supplied (truth,
/// estimate, or a fusion of the two), already in normalized space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub features: [f64; STATE_FEATURES],
    pub next_features: [f64; STATE_FEATURES],
    pub e_cond: [f64; ESTIMATED_DIM],
    /// Normalized target margin at the pre-transition state.
    pub l: f64,
    /// Normalized failure margin at the pre-transition state.
    pub zeta: f64,
}

/// Precomputed mirror-orientation view of one [`TransitionRecord`].
struct Mirrored {
    features: [f64; STATE_FEATURES],
    next_features: [f64; STATE_FEATURES],
    e_cond: [f64; ESTIMATED_DIM],
}

/// Training hyperparameters for [`RaNet::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaNetConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub margin_scale: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Minibatches between refreshes of the frozen bootstrap copy.
    pub refresh_every: usize,
}

impl Default for RaNetConfig {
    fn default() -> RaNetConfig {
        RaNetConfig {
            hidden: 64,
            gamma: 0.999,
            margin_scale: 6.0,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 64,
            epochs: 40,
            refresh_every: 200,
        }
    }
}

impl RaNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 || self.refresh_every == 0 {
            return Err(Error::Config("network training sizes must all be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.margin_scale > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("margin scale and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// The distilled value network with its conditioning scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaNet {
    net: Mlp,
    pub gamma: f64,
    pub margin_scale: f64,
    scaler: ParamScaler,
}

impl RaNet {
    /// Fresh randomly initialized network (tanh output keeps values inside
    /// the normalization bound by construction).
    pub fn new(cfg: &RaNetConfig, scaler: ParamScaler, seed: u64, path: &[u64]) -> Result<RaNet> {
        cfg.validate()?;
        let dims = [STATE_FEATURES + ESTIMATED_DIM, cfg.hidden, cfg.hidden, 1];
        let mut net = Mlp::new(&dims, Activation::Tanh, Activation::Tanh)?;
        let mut rng = derive_rng(seed, path);
        net.init_uniform(&mut rng, 1.0);
        Ok(RaNet { net, gamma: cfg.gamma, margin_scale: cfg.margin_scale, scaler })
    }

    pub fn scaler(&self) -> &ParamScaler {
        &self.scaler
    }

    /// Normalized conditioning vector of the mirrored physics: the lateral
    /// center-of-mass shift is negated, everything else passes through.
    fn mirror_cond(&self, e_cond: &[f64; ESTIMATED_DIM]) -> [f64; ESTIMATED_DIM] {
        self.scaler.mirror_lateral(*e_cond)
    }

    /// Raw single-orientation forward pass.
    fn forward_one(
        &self,
        features: &[f64; STATE_FEATURES],
        e_cond: &[f64; ESTIMATED_DIM],
    ) -> Result<f64> {
        let mut input = [0.0; STATE_FEATURES + ESTIMATED_DIM];
        input[..STATE_FEATURES].copy_from_slice(features);
        input[STATE_FEATURES..].copy_from_slice(e_cond);
        Ok(self.net.forward(&input)?[0])
    }

    /// Value from precomputed features and a normalized conditioning vector.
    ///
    /// Reflection-averaged: the reported value is the mean of the forward
    /// pass and the pass over the mirrored scene with mirrored physics, so
    /// the lateral symmetry of the true value function holds by construction
    /// rather than by hoping the data teaches it. Training regresses this
    /// same average ([`fit`](Self::fit) backpropagates through both
    /// orientations), so the deployed function is the trained function.
    pub fn value_from_features(
        &self,
        features: &[f64; STATE_FEATURES],
        e_cond: &[f64; ESTIMATED_DIM],
    ) -> Result<f64> {
        let direct = self.forward_one(features, e_cond)?;
        let mirrored = self.forward_one(&mirror_features(features), &self.mirror_cond(e_cond))?;
        Ok(0.5 * (direct + mirrored))
    }

    /// Value at a state in a world, conditioned on a physical estimate.
    pub fn value(
        &self,
        world: &WorldSpec,
        cfg: &DynamicsConfig,
        s: &State,
        e_hat: &EstimateVector,
    ) -> Result<f64> {
        let features = state_features(world, cfg, s)?;
        self.value_from_features(&features, &self.scaler.normalize(e_hat))
    }

    /// Fitted value iteration over recorded transitions.
    ///
    /// Each minibatch regresses the network onto one-step backup targets
    /// computed from a frozen copy; the copy is refreshed every
    /// `refresh_every` minibatches so targets stay piecewise-constant while
    /// the learner moves — the stability device that makes bootstrap
    /// regression behave like (noisy) value iteration. Returns the mean
    /// squared error per epoch. Fully deterministic for a given seed.
    pub fn fit(
        &mut self,
        cfg: &RaNetConfig,
        records: &[TransitionRecord],
        seed: u64,
        path: &[u64],
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(Error::Contract("cannot fit a value network to zero transitions".into()));
        }
        for (i, r) in records.iter().enumerate() {
            ensure_finite("record features", &r.features)?;
            ensure_finite("record next features", &r.next_features)?;
            ensure_finite("record conditioning", &r.e_cond)?;
            ensure_finite("record margins", &[r.l, r.zeta])?;
            let _ = i;
        }
        let mut rng = derive_rng(seed, path);
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut frozen = self.net.clone();
        let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, self.net.num_params());
        let mut grad = vec![0.0; self.net.num_params()];
        let mut losses = Vec::with_capacity(cfg.epochs);
        let mut batches_since_refresh = 0usize;

        // Every record is used in both orientations (the regressed function
        // is the reflection average), so mirror each one once up front.
        let mirrored: Vec<Mirrored> = records
            .iter()
            .map(|r| Mirrored {
                features: mirror_features(&r.features),
                next_features: mirror_features(&r.next_features),
                e_cond: self.mirror_cond(&r.e_cond),
            })
            .collect();

        let pack = |input: &mut [f64; STATE_FEATURES + ESTIMATED_DIM],
                    f: &[f64; STATE_FEATURES],
                    e: &[f64; ESTIMATED_DIM]| {
            input[..STATE_FEATURES].copy_from_slice(f);
            input[STATE_FEATURES..].copy_from_slice(e);
        };

        let mut input = [0.0; STATE_FEATURES + ESTIMATED_DIM];
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                if batches_since_refresh >= cfg.refresh_every {
                    frozen = self.net.clone();
                    batches_since_refresh = 0;
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                let inv = 1.0 / batch.len() as f64;
                for &ri in batch {
                    let r = &records[ri];
                    let m = &mirrored[ri];
                    pack(&mut input, &r.next_features, &r.e_cond);
                    let v_next_direct = frozen.forward(&input)?[0];
                    pack(&mut input, &m.next_features, &m.e_cond);
                    let v_next = 0.5 * (v_next_direct + frozen.forward(&input)?[0]);
                    let target = drabe_backup(v_next, r.l, r.zeta, self.gamma);

                    pack(&mut input, &r.features, &r.e_cond);
                    let cache_direct = self.net.forward_cached(&input)?;
                    pack(&mut input, &m.features, &m.e_cond);
                    let cache_mirror = self.net.forward_cached(&input)?;
                    let err =
                        0.5 * (cache_direct.output()[0] + cache_mirror.output()[0]) - target;
                    epoch_loss += err * err;
                    // d(err^2) routes half its weight through each
                    // orientation: 2 * err * 1/2 per branch, batch-averaged.
                    self.net.backward(&cache_direct, &[err * inv], &mut grad)?;
                    self.net.backward(&cache_mirror, &[err * inv], &mut grad)?;
                }
                opt.step(self.net.params_mut(), &grad)?;
                batches_since_refresh += 1;
            }
            losses.push(epoch_loss / records.len() as f64);
        }
        ensure_finite("training loss", &losses)?;
        Ok(losses)
    }
}

/// Rolls the closed loop `(policy, e_true)` from `s0` and records every
/// transition, conditioning each record on the supplied normalized vector.
///
/// The rollout observes with a zero previous command (the recording policies
/// are memoryless in the command-history channels), stops as soon as the
/// target absorbs (adding one self-transition so the stationary payoff
/// appears in the data), and stops *after* recording the first failing state
/// — the backup needs that state's outgoing transition to see its margin.
pub fn record_rollout(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: &dyn Fn(&Observation) -> Result<Action>,
    e_true: &EnvParams,
    e_cond: [f64; ESTIMATED_DIM],
    s0: State,
    max_steps: usize,
    margin_scale: f64,
    out: &mut Vec<TransitionRecord>,
) -> Result<()> {
    let mut s = s0;
    for _ in 0..max_steps {
        let m = world.margins(s.position())?;
        let l = super::normalize_margin(m.l, margin_scale);
        let zeta = super::normalize_margin(m.zeta, margin_scale);
        let features = state_features(world, cfg, &s)?;
        if l <= 0.0 {
            out.push(TransitionRecord { features, next_features: features, e_cond, l, zeta });
            break;
        }
        let obs = observe(cfg, world, &s, Action::ZERO, None)?;
        let next = step(cfg, &s, policy(&obs)?, e_true)?;
        let next_features = state_features(world, cfg, &next)?;
        out.push(TransitionRecord { features, next_features, e_cond, l, zeta });
        if zeta > 0.0 {
            break;
        }
        s = next;
    }
    Ok(())
}
