//! The two learned controllers and their training machinery.
//!
//! * The **agile** policy drives toward the goal. It sees the observation
//!   plus a normalized conditioning vector of (estimated or fused) physical
//!   parameters, so one set of weights can adapt its behavior to the payload
//!   it believes it is carrying.
//! * The **recovery** policy tracks a commanded twist as faithfully as the
//!   physics allow. It is deliberately blind to the parameter estimate — the
//!   safeguard chooses *what* twist to execute; recovery's only job is to
//!   execute it from raw proprioception.
//!
//! Both are small tanh networks whose outputs pass through a saturating map
//! into the commanded twist box, and both are trained derivative-free by the
//! cross-entropy search in [`cem`], which needs nothing but episode returns.

pub mod cem;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, DynamicsConfig, Observation, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::estimator::ESTIMATED_DIM;
use crate::nn::{Activation, Mlp};

/// Which controller a parameter vector belongs to; fixes the input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRole {
    Agile,
    Recovery,
}

impl PolicyRole {
    /// Input width given the number of range-sensor rays.
    pub fn input_dim(&self, n_rays: usize) -> usize {
        match self {
            // proprio + goal direction + rays + parameter conditioning.
            PolicyRole::Agile => PROPRIO_DIM + 2 + n_rays + ESTIMATED_DIM,
            // proprio + the twist to track.
            PolicyRole::Recovery => PROPRIO_DIM + 2,
        }
    }
}

/// Structural and regularization settings shared by both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Width of each of the two hidden layers.
    pub hidden: usize,
    /// Hard symmetric bound applied to every weight.
    pub weight_clip: f64,
    /// L2 return penalty and per-iteration weight shrink factor.
    pub l2_coeff: f64,
}

impl Default for PolicyConfig {
    fn default() -> PolicyConfig {
        PolicyConfig { hidden: 64, weight_clip: 4.0, l2_coeff: 1e-4 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("policy hidden width must be positive".into()));
        }
        if !(self.weight_clip > 0.0 && self.weight_clip.is_finite()) {
            return Err(Error::Config(format!("weight clip must be positive, got {}", self.weight_clip)));
        }
        if !(0.0..1.0).contains(&self.l2_coeff) {
            return Err(Error::Config(format!("l2 coefficient must be in [0, 1), got {}", self.l2_coeff)));
        }
        Ok(())
    }
}

/// One policy: role, network, and the regularization constants baked in at
/// training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub role: PolicyRole,
    net: Mlp,
    pub weight_clip: f64,
    pub l2_coeff: f64,
}

impl PolicyParams {
    /// Zero-weight policy (which maps everything to the zero twist).
    pub fn zeros(role: PolicyRole, cfg: &PolicyConfig, n_rays: usize) -> Result<PolicyParams> {
        cfg.validate()?;
        let dims = [role.input_dim(n_rays), cfg.hidden, cfg.hidden, 2];
        let net = Mlp::new(&dims, Activation::Tanh, Activation::Identity)?;
        Ok(PolicyParams { role, net, weight_clip: cfg.weight_clip, l2_coeff: cfg.l2_coeff })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn weights(&self) -> &[f64] {
        self.net.params()
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        self.net.set_params(w)
    }

    pub fn num_weights(&self) -> usize {
        self.net.num_params()
    }

    /// Shrinks every weight by the L2 factor and clips it into the allowed
    /// box; applied to the search mean once per training iteration.
    pub fn regularize_and_clip(&mut self) {
        let shrink = 1.0 - self.l2_coeff;
        let clip = self.weight_clip;
        for w in self.net.params_mut() {
            *w = (*w * shrink).clamp(-clip, clip);
        }
    }
}

/// Squashes an unbounded network output into `[lo, hi]`.
///
/// When the interval contains zero the map is `hi * tanh(raw)` on the
/// positive side and `lo * tanh(-raw)` on the negative side, so zero raw
/// output means zero command exactly — an all-zero policy commands a full
/// stop, not some box midpoint. Degenerate intervals fall back to the
/// midpoint-centered form.
pub fn saturate_into(raw: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if lo <= 0.0 && hi >= 0.0 {
        if raw >= 0.0 {
            hi * raw.tanh()
        } else {
            lo * (-raw).tanh()
        }
    } else {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        mid + half * raw.tanh()
    }
}

/// Input scaling used by both policies: puts every channel at magnitude O(1)
/// using fixed configuration constants (never the hidden parameters).
fn scaled_proprio(cfg: &DynamicsConfig, obs: &Observation, out: &mut Vec<f64>) {
    let p = &obs.proprio;
    out.push(p[0] / cfg.v_max);
    out.push(p[1] / cfg.omega_cmd_max);
    out.push(p[2] / cfg.v_max);
    out.push(p[3] / cfg.omega_cmd_max);
    out.push(p[4] / cfg.accel_brake);
    out.push(p[5] / cfg.yaw_accel_base);
    out.push(p[6]);
}

/// Assembles the agile policy's input vector.
pub fn agile_input(cfg: &DynamicsConfig, obs: &Observation, e_cond: &[f64; ESTIMATED_DIM]) -> Vec<f64> {
    let mut x = Vec::with_capacity(PROPRIO_DIM + 2 + obs.rays.len() + ESTIMATED_DIM);
    scaled_proprio(cfg, obs, &mut x);
    // Goal offset saturates at a few meters so distant goals don't swamp
    // the near-field channels.
    x.push((obs.goal_relative[0] / 4.0).clamp(-2.0, 2.0));
    x.push((obs.goal_relative[1] / 4.0).clamp(-2.0, 2.0));
    for r in &obs.rays {
        x.push(r / cfg.ray_max_range);
    }
    x.extend_from_slice(e_cond);
    x
}

/// Assembles the recovery policy's input vector.
pub fn recovery_input(cfg: &DynamicsConfig, obs: &Observation, twist: Action) -> Vec<f64> {
    let mut x = Vec::with_capacity(PROPRIO_DIM + 2);
    scaled_proprio(cfg, obs, &mut x);
    x.push(twist.v_cmd / cfg.v_max);
    x.push(twist.omega_cmd / cfg.omega_cmd_max);
    x
}

fn act(p: &PolicyParams, cfg: &DynamicsConfig, input: &[f64]) -> Result<Action> {
    let raw = p.net.forward(input)?;
    Ok(Action {
        v_cmd: saturate_into(raw[0], cfg.v_cmd_min, cfg.v_cmd_max),
        omega_cmd: saturate_into(raw[1], -cfg.omega_cmd_max, cfg.omega_cmd_max),
    })
}

/// Agile policy head: observation + normalized parameter conditioning to a
/// twist command inside the configured box.
pub fn agile_act(
    p: &PolicyParams,
    cfg: &DynamicsConfig,
    obs: &Observation,
    e_cond: &[f64; ESTIMATED_DIM],
) -> Result<Action> {
    if p.role != PolicyRole::Agile {
        return Err(Error::Contract("agile_act called with a non-agile parameter set".into()));
    }
    let input = agile_input(cfg, obs, e_cond);
    if input.len() != p.net.input_dim() {
        return Err(Error::Contract(format!(
            "agile input has {} entries (is n_rays consistent?), network expects {}",
            input.len(),
            p.net.input_dim()
        )));
    }
    act(p, cfg, &input)
}

/// Recovery policy head: observation + twist to track.
pub fn recovery_act(p: &PolicyParams, cfg: &DynamicsConfig, obs: &Observation, twist: Action) -> Result<Action> {
    if p.role != PolicyRole::Recovery {
        return Err(Error::Contract("recovery_act called with a non-recovery parameter set".into()));
    }
    let input = recovery_input(cfg, obs, twist);
    if input.len() != p.net.input_dim() {
        return Err(Error::Contract(format!(
            "recovery input has {} entries, network expects {}",
            input.len(),
            p.net.input_dim()
        )));
    }
    act(p, cfg, &input)
}

/// Hand-written proportional go-to-goal controller. Used as the benchmark
/// policy for exact value computations (it needs no training and no
/// conditioning) and as a sanity baseline for the agile policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GotoController {
    /// Forward gain on goal distance.
    pub v_gain: f64,
    /// Yaw gain on heading error.
    pub heading_gain: f64,
}

impl Default for GotoController {
    fn default() -> GotoController {
        GotoController { v_gain: 1.6, heading_gain: 2.5 }
    }
}

impl GotoController {
    /// Twist from the goal offset in the body frame: turn toward the goal,
    /// drive forward when roughly facing it, slow down on approach.
    pub fn act(&self, cfg: &DynamicsConfig, goal_relative: [f64; 2]) -> Action {
        let dist = (goal_relative[0] * goal_relative[0] + goal_relative[1] * goal_relative[1]).sqrt();
        let heading_err = goal_relative[1].atan2(goal_relative[0]);
        let aligned = heading_err.cos().max(0.0);
        Action {
            v_cmd: (self.v_gain * dist * aligned).clamp(cfg.v_cmd_min.max(0.0), cfg.v_cmd_max),
            omega_cmd: (self.heading_gain * heading_err).clamp(-cfg.omega_cmd_max, cfg.omega_cmd_max),
        }
    }
}

/// Hand-written cruise-then-brake controller for the straight-corridor
/// benchmark: drive forward at a fixed speed until the forward ray sees an
/// obstruction closer than the brake distance, then command a full stop.
///
/// Whether braking that late suffices depends entirely on the hidden
/// physics (payload shrinks the brake authority, friction caps the grip),
/// which is exactly what makes this loop a sharp test case: its reach-avoid
/// set has real structure across the physics bins. Like every benchmark
/// controller it is memoryless in the command-history channels, so exact
/// value computations can close the loop with a zero previous command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakeController {
    /// Forward speed commanded while the path ahead looks clear.
    pub cruise: f64,
    /// Forward-ray threshold below which the command drops to a full stop.
    pub brake_distance: f64,
}

impl Default for BrakeController {
    fn default() -> BrakeController {
        BrakeController { cruise: 3.0, brake_distance: 1.0 }
    }
}

impl BrakeController {
    pub fn act(&self, obs: &Observation) -> Result<Action> {
        let forward = *obs
            .rays
            .first()
            .ok_or_else(|| Error::Contract("brake controller needs at least one ray".into()))?;
        if forward < self.brake_distance {
            Ok(Action::ZERO)
        } else {
            Ok(Action::new(self.cruise, 0.0))
        }
    }
}

/// Hand-written goal-seeking controller with a range-triggered rolling
/// dodge: steer for the goal until the forward ray sees an obstruction
/// inside the trigger range, then shed speed and turn hard toward
/// whichever diagonal ray reports more room.
///
/// Unlike the pure braking loop, the dodge keeps the robot moving while it
/// turns, so the arc it actually carves depends on how fast the hidden
/// physics can shed the entry speed: a light robot slows into a tight arc
/// that clears the obstruction, a heavy one carries its momentum through a
/// wide arc that grazes it. That makes the closed loop's worst clearance —
/// not just its stopping depth — a function of payload, which is the
/// property the obstacle-sweep rasters are built to expose. Memoryless in
/// the command-history channels, like every benchmark controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwerveController {
    /// Goal-seeking twist used while the path ahead looks clear.
    pub goto: GotoController,
    /// Forward-ray range below which the dodge engages.
    pub trigger: f64,
    /// Forward speed commanded during the dodge.
    pub dodge_v: f64,
    /// Yaw rate commanded during the dodge, signed toward the freer side.
    pub dodge_rate: f64,
}

impl Default for SwerveController {
    fn default() -> SwerveController {
        SwerveController {
            goto: GotoController::default(),
            trigger: 1.5,
            dodge_v: 0.6,
            dodge_rate: 2.0,
        }
    }
}

impl SwerveController {
    /// Twist from the forward and diagonal rays plus the body-frame goal
    /// offset. Ties between the diagonals break toward the left so the
    /// rule stays deterministic on the symmetry axis.
    pub fn act(&self, cfg: &DynamicsConfig, obs: &Observation) -> Result<Action> {
        if obs.rays.len() < 3 {
            return Err(Error::Contract(
                "swerve controller needs forward and both diagonal rays".into(),
            ));
        }
        let forward = obs.rays[0];
        if forward < self.trigger {
            let left = obs.rays[1];
            let right = obs.rays[obs.rays.len() - 1];
            let turn = if left >= right { self.dodge_rate } else { -self.dodge_rate };
            Ok(Action::new(self.dodge_v, turn))
        } else {
            Ok(self.goto.act(cfg, obs.goal_relative))
        }
    }
}

/// Identity twist tracker: command exactly the requested twist and let the
/// plant's own lag do the work. The baseline the trained recovery policy is
/// measured against.
#[derive(Debug, Clone, Copy, Default)]
pub struct TwistFeedthrough;

impl TwistFeedthrough {
    pub fn act(&self, cfg: &DynamicsConfig, twist: Action) -> Action {
        Action {
            v_cmd: twist.v_cmd.clamp(cfg.v_cmd_min, cfg.v_cmd_max),
            omega_cmd: twist.omega_cmd.clamp(-cfg.omega_cmd_max, cfg.omega_cmd_max),
        }
    }
}
