//! Planar robot dynamics with hidden, per-episode physical parameters.
//!
//! The robot is a differential-drive base commanded by a twist (forward
//! speed, yaw rate). Speed and yaw rate each track their command through a
//! first-order lag with a hard acceleration cap, and the cap is where the
//! hidden parameters bite:
//!
//! * payload mass scales down the motor acceleration (fixed drive force,
//!   larger total mass),
//! * ground friction caps both linear and yaw acceleration (grip limit),
//! * a vertical center-of-mass shift reduces achievable yaw acceleration,
//! * a lateral center-of-mass shift biases the achieved yaw rate,
//! * a longitudinal center-of-mass shift couples drive accelerations into a
//!   yaw pull (asymmetric wheel loading under thrust),
//! * a constant external force drags the position at a quasi-steady drift
//!   velocity.
//!
//! Every parameter therefore has a proprioceptively observable signature,
//! which is what makes online estimation from command/response history
//! possible at all.
//!
//! Within one step the lag ODE is integrated exactly (a saturated
//! constant-acceleration segment followed by an exponential approach), so
//! trajectories are reproducible to the bit and can be checked against the
//! closed-form solution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::world::WorldSpec;

/// Robot state: planar pose plus the current twist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    /// Heading, wrapped to (-pi, pi].
    pub theta: f64,
    /// Forward speed along the heading.
    pub v: f64,
    /// Yaw rate.
    pub omega: f64,
}

impl State {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, omega: f64) -> State {
        State { x, y, theta, v, omega }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.x, self.y, self.theta, self.v, self.omega]
    }
}

/// Twist command: target forward speed and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v_cmd: f64,
    pub omega_cmd: f64,
}

impl Action {
    pub const ZERO: Action = Action { v_cmd: 0.0, omega_cmd: 0.0 };

    pub fn new(v_cmd: f64, omega_cmd: f64) -> Action {
        Action { v_cmd, omega_cmd }
    }

    pub fn norm(&self) -> f64 {
        (self.v_cmd * self.v_cmd + self.omega_cmd * self.omega_cmd).sqrt()
    }
}

/// Hidden physical parameters, fixed for an episode (unless an evaluation
/// scenario deliberately shifts them mid-episode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    /// Extra mass on top of the base mass; may be negative (lightened base).
    pub payload_mass: f64,
    /// Center-of-mass shift (x forward, y left, z up) from the nominal point.
    pub com_shift: [f64; 3],
    /// Ground friction coefficient.
    pub friction: f64,
    /// Constant external force in world frame (a tether or collision push).
    pub ext_force: [f64; 2],
}

impl EnvParams {
    /// The unloaded, unperturbed robot on nominal ground.
    pub fn nominal() -> EnvParams {
        EnvParams { payload_mass: 0.0, com_shift: [0.0; 3], friction: 1.0, ext_force: [0.0; 2] }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.payload_mass,
            self.com_shift[0],
            self.com_shift[1],
            self.com_shift[2],
            self.friction,
            self.ext_force[0],
            self.ext_force[1],
        ]
    }
}

/// Per-component randomization intervals for [`EnvParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub payload_mass: [f64; 2],
    pub com_x: [f64; 2],
    pub com_y: [f64; 2],
    pub com_z: [f64; 2],
    pub friction: [f64; 2],
    pub ext_force_x: [f64; 2],
    pub ext_force_y: [f64; 2],
}

impl Default for ParamRanges {
    fn default() -> ParamRanges {
        ParamRanges {
            payload_mass: [-2.0, 12.0],
            com_x: [-0.05, 0.05],
            com_y: [-0.05, 0.05],
            com_z: [-0.05, 0.15],
            friction: [0.25, 1.5],
            ext_force_x: [-15.0, 15.0],
            ext_force_y: [-15.0, 15.0],
        }
    }
}

impl ParamRanges {
    pub fn validate(&self, base_mass: f64) -> Result<()> {
        for (name, [lo, hi]) in [
            ("payload_mass", self.payload_mass),
            ("com_x", self.com_x),
            ("com_y", self.com_y),
            ("com_z", self.com_z),
            ("friction", self.friction),
            ("ext_force_x", self.ext_force_x),
            ("ext_force_y", self.ext_force_y),
        ] {
            ensure_finite(name, &[lo, hi])?;
            if lo > hi {
                return Err(Error::Config(format!("range {name} is inverted: [{lo}, {hi}]")));
            }
        }
        if self.friction[0] <= 0.0 {
            return Err(Error::Config(format!(
                "friction range must stay positive, got lower bound {}",
                self.friction[0]
            )));
        }
        if base_mass + self.payload_mass[0] <= 0.0 {
            return Err(Error::Config(format!(
                "total mass can reach {} <= 0 (base {base_mass}, payload lower bound {})",
                base_mass + self.payload_mass[0],
                self.payload_mass[0]
            )));
        }
        Ok(())
    }

    /// Draws one parameter vector uniformly from the ranges.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> EnvParams {
        let mut draw = |[lo, hi]: [f64; 2]| -> f64 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        EnvParams {
            payload_mass: draw(self.payload_mass),
            com_shift: [draw(self.com_x), draw(self.com_y), draw(self.com_z)],
            friction: draw(self.friction),
            ext_force: [draw(self.ext_force_x), draw(self.ext_force_y)],
        }
    }
}

/// Gaussian observation noise levels; zero means noiseless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsNoise {
    /// Std-dev added to speed, yaw rate, acceleration, and tilt channels.
    pub proprio_std: f64,
    /// Std-dev added to each range reading.
    pub ray_std: f64,
}

impl Default for ObsNoise {
    fn default() -> ObsNoise {
        ObsNoise { proprio_std: 0.01, ray_std: 0.02 }
    }
}

/// Fixed (non-randomized) dynamics constants and integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Control period in seconds.
    pub dt: f64,
    /// Episode length in control steps.
    pub horizon: usize,
    /// Hard speed limit (both signs).
    pub v_max: f64,
    /// Commanded-speed box.
    pub v_cmd_min: f64,
    pub v_cmd_max: f64,
    /// Commanded yaw-rate limit (symmetric).
    pub omega_cmd_max: f64,
    /// Mass of the bare robot.
    pub base_mass: f64,
    /// Motor acceleration at base mass (drive force / base mass).
    pub accel_motor: f64,
    /// Braking deceleration at base mass.
    pub accel_brake: f64,
    /// Linear grip limit: max accel = friction * g * grip_gain.
    pub grip_gain: f64,
    /// Yaw grip limit: max yaw accel = friction * g * yaw_grip_gain.
    pub yaw_grip_gain: f64,
    /// Speed-tracking time constant.
    pub tau_v: f64,
    /// Yaw-tracking time constant.
    pub tau_omega: f64,
    /// Yaw acceleration at nominal center of mass.
    pub yaw_accel_base: f64,
    /// Raised center of mass divides yaw accel by (1 + gain * com_z).
    pub com_z_yaw_gain: f64,
    /// Lateral center-of-mass shift biases yaw rate by gain * com_y.
    pub com_y_yaw_gain: f64,
    /// Longitudinal shift couples applied drive accel into a yaw pull:
    /// bias += gain * com_x * (applied_accel / g).
    pub com_x_yaw_gain: f64,
    /// External force acts as quasi-steady position drift with this time
    /// constant: drift velocity = (force / total mass) * drift_tau.
    pub drift_tau: f64,
    /// Gravitational acceleration.
    pub gravity: f64,
    /// Number of range-sensor rays.
    pub n_rays: usize,
    /// Range-sensor reach in meters.
    pub ray_max_range: f64,
    /// Observation noise levels.
    pub noise: ObsNoise,
}

impl Default for DynamicsConfig {
    fn default() -> DynamicsConfig {
        DynamicsConfig {
            dt: 0.05,
            horizon: 160,
            v_max: 3.5,
            v_cmd_min: -1.0,
            v_cmd_max: 3.5,
            omega_cmd_max: 3.0,
            base_mass: 12.0,
            accel_motor: 8.0,
            accel_brake: 10.0,
            grip_gain: 0.8,
            yaw_grip_gain: 1.2,
            tau_v: 0.25,
            tau_omega: 0.15,
            yaw_accel_base: 12.0,
            com_z_yaw_gain: 2.0,
            com_y_yaw_gain: 2.0,
            com_x_yaw_gain: 2.0,
            drift_tau: 0.2,
            gravity: 9.81,
            n_rays: 8,
            ray_max_range: 4.0,
            noise: ObsNoise::default(),
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("base_mass", self.base_mass),
            ("accel_motor", self.accel_motor),
            ("accel_brake", self.accel_brake),
            ("grip_gain", self.grip_gain),
            ("yaw_grip_gain", self.yaw_grip_gain),
            ("tau_v", self.tau_v),
            ("tau_omega", self.tau_omega),
            ("yaw_accel_base", self.yaw_accel_base),
            ("gravity", self.gravity),
            ("ray_max_range", self.ray_max_range),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1 step".into()));
        }
        if self.v_cmd_min >= self.v_cmd_max {
            return Err(Error::Config(format!(
                "speed-command box is empty: [{}, {}]",
                self.v_cmd_min, self.v_cmd_max
            )));
        }
        if self.omega_cmd_max <= 0.0 {
            return Err(Error::Config(format!("omega_cmd_max must be positive, got {}", self.omega_cmd_max)));
        }
        if self.n_rays == 0 {
            return Err(Error::Config("n_rays must be at least 1".into()));
        }
        if self.noise.proprio_std < 0.0 || self.noise.ray_std < 0.0 {
            return Err(Error::Config("noise std-devs must be non-negative".into()));
        }
        Ok(())
    }

    fn clamp_action(&self, a: Action) -> Action {
        Action {
            v_cmd: a.v_cmd.clamp(self.v_cmd_min, self.v_cmd_max),
            omega_cmd: a.omega_cmd.clamp(-self.omega_cmd_max, self.omega_cmd_max),
        }
    }
}

/// Exact one-step integration of a rate-limited first-order lag:
/// `dx/dt = clamp((target - x)/tau, -cap, cap)`.
///
/// While the error exceeds `cap * tau` the trajectory is a constant-rate ramp
/// toward the target; once inside that band it is an exponential approach.
/// Both segments are solved in closed form, so the result is exact for the
/// (possibly split) step regardless of `dt`.
fn lag_step(x0: f64, target: f64, tau: f64, cap: f64, dt: f64) -> f64 {
    let err = target - x0;
    if err == 0.0 {
        return x0;
    }
    let sat_band = cap * tau;
    let sign = err.signum();
    if err.abs() <= sat_band {
        return target - err * (-dt / tau).exp();
    }
    // Time spent saturated before entering the exponential band.
    let t_sat = (err.abs() - sat_band) / cap;
    if t_sat >= dt {
        x0 + sign * cap * dt
    } else {
        target - sign * sat_band * (-(dt - t_sat) / tau).exp()
    }
}

/// Outcome of one dynamics step, including the applied (post-cap) linear
/// acceleration — re-used by the yaw coupling and useful for diagnostics.
#[derive(Debug, Clone, Copy)]
struct LinearUpdate {
    v_next: f64,
    applied_accel: f64,
}

fn linear_update(cfg: &DynamicsConfig, e: &EnvParams, v: f64, v_cmd: f64) -> LinearUpdate {
    let total_mass = cfg.base_mass + e.payload_mass;
    let err = v_cmd - v;
    // Braking = driving the speed magnitude down; the brakes are stronger
    // than the motor.
    let braking = v * err < 0.0;
    let motor_cap = if braking { cfg.accel_brake } else { cfg.accel_motor };
    let cap = (motor_cap * cfg.base_mass / total_mass).min(e.friction * cfg.gravity * cfg.grip_gain);
    let v_next = lag_step(v, v_cmd, cfg.tau_v, cap, cfg.dt).clamp(-cfg.v_max, cfg.v_max);
    LinearUpdate { v_next, applied_accel: (v_next - v) / cfg.dt }
}

/// Advances the state by one control period under hidden parameters `e`.
///
/// Commands outside the configured boxes are clamped. Non-finite states or
/// commands are rejected. The step never panics on in-contract input and is
/// bit-deterministic.
pub fn step(cfg: &DynamicsConfig, s: &State, a: Action, e: &EnvParams) -> Result<State> {
    ensure_finite("state", &s.as_array())?;
    ensure_finite("action", &[a.v_cmd, a.omega_cmd])?;
    ensure_finite("params", &e.as_array())?;
    let total_mass = cfg.base_mass + e.payload_mass;
    if total_mass <= 0.0 {
        return Err(Error::Contract(format!(
            "total mass {total_mass} <= 0 (payload {})",
            e.payload_mass
        )));
    }
    let a = cfg.clamp_action(a);

    // Linear speed channel.
    let lin = linear_update(cfg, e, s.v, a.v_cmd);

    // Yaw channel: lateral CoM shift biases the achieved rate, longitudinal
    // shift couples drive accel into a pull, raised CoM and grip both cap the
    // yaw acceleration.
    let omega_target = a.omega_cmd
        + cfg.com_y_yaw_gain * e.com_shift[1]
        + cfg.com_x_yaw_gain * e.com_shift[0] * (lin.applied_accel / cfg.gravity);
    let yaw_cap = (cfg.yaw_accel_base / (1.0 + cfg.com_z_yaw_gain * e.com_shift[2]))
        .min(e.friction * cfg.gravity * cfg.yaw_grip_gain);
    if yaw_cap <= 0.0 || !yaw_cap.is_finite() {
        return Err(Error::Contract(format!(
            "yaw acceleration cap {yaw_cap} is not positive (com_z {})",
            e.com_shift[2]
        )));
    }
    let omega_next = lag_step(s.omega, omega_target, cfg.tau_omega, yaw_cap, cfg.dt);

    // External force: quasi-steady drift velocity added to the position
    // integral (the force is assumed balanced by ground reaction within one
    // drift time constant).
    let drift = [
        e.ext_force[0] / total_mass * cfg.drift_tau,
        e.ext_force[1] / total_mass * cfg.drift_tau,
    ];

    // Semi-implicit position update: new speeds along the old heading.
    let x = s.x + (lin.v_next * s.theta.cos() + drift[0]) * cfg.dt;
    let y = s.y + (lin.v_next * s.theta.sin() + drift[1]) * cfg.dt;
    let theta = wrap_angle(s.theta + omega_next * cfg.dt);

    Ok(State { x, y, theta, v: lin.v_next, omega: omega_next })
}

/// Advances one control period but integrates the dynamics in `n` equal
/// sub-intervals with the action held fixed — a refinement check for the
/// discretization, not a different model.
pub fn step_substeps(cfg: &DynamicsConfig, s: &State, a: Action, e: &EnvParams, n: usize) -> Result<State> {
    if n == 0 {
        return Err(Error::Contract("substep count must be at least 1".into()));
    }
    let mut fine = cfg.clone();
    fine.dt = cfg.dt / n as f64;
    let mut cur = *s;
    for _ in 0..n {
        cur = step(&fine, &cur, a, e)?;
    }
    Ok(cur)
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Number of proprioceptive channels in an observation.
pub const PROPRIO_DIM: usize = 7;

/// One sensor reading: proprioception, goal direction, and ranges.
///
/// Proprio layout: `[v, omega, prev v_cmd, prev omega_cmd, nominal
/// longitudinal accel, nominal yaw accel, tilt proxy]`. The "nominal" accel
/// channels are what the *unloaded* robot would be doing given the previous
/// command — their mismatch with the actual response over time is the signal
/// the parameter estimator learns from. Nothing here reads the hidden
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub proprio: [f64; PROPRIO_DIM],
    /// Goal offset in the body frame.
    pub goal_relative: [f64; 2],
    /// Range readings, ray 0 forward, counter-clockwise.
    pub rays: Vec<f64>,
}

/// Builds the observation of `s` given the previously applied action. Pass an
/// RNG to add the configured Gaussian sensor noise; `None` is noiseless.
pub fn observe(
    cfg: &DynamicsConfig,
    world: &WorldSpec,
    s: &State,
    a_prev: Action,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Observation> {
    ensure_finite("state", &s.as_array())?;
    ensure_finite("action", &[a_prev.v_cmd, a_prev.omega_cmd])?;
    let accel_long = ((a_prev.v_cmd - s.v) / cfg.tau_v).clamp(-cfg.accel_brake, cfg.accel_brake);
    let accel_yaw = ((a_prev.omega_cmd - s.omega) / cfg.tau_omega).clamp(-cfg.yaw_accel_base, cfg.yaw_accel_base);
    let mut proprio = [
        s.v,
        s.omega,
        a_prev.v_cmd,
        a_prev.omega_cmd,
        accel_long,
        accel_yaw,
        accel_long / cfg.gravity,
    ];
    let dx = world.goal_center[0] - s.x;
    let dy = world.goal_center[1] - s.y;
    let (sin, cos) = s.theta.sin_cos();
    let mut goal_relative = [cos * dx + sin * dy, -sin * dx + cos * dy];
    let mut rays = world.ray_distances(s.position(), s.theta, cfg.n_rays, cfg.ray_max_range)?;
    if let Some(rng) = rng {
        if cfg.noise.proprio_std > 0.0 {
            let n = Normal::new(0.0, cfg.noise.proprio_std)
                .map_err(|e| Error::Config(format!("proprio noise: {e}")))?;
            for p in proprio.iter_mut() {
                *p += n.sample(rng);
            }
            for g in goal_relative.iter_mut() {
                *g += n.sample(rng);
            }
        }
        if cfg.noise.ray_std > 0.0 {
            let n = Normal::new(0.0, cfg.noise.ray_std)
                .map_err(|e| Error::Config(format!("ray noise: {e}")))?;
            for r in rays.iter_mut() {
                *r = (*r + n.sample(rng)).clamp(0.0, cfg.ray_max_range);
            }
        }
    }
    Ok(Observation { proprio, goal_relative, rays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg() -> DynamicsConfig {
        DynamicsConfig::default()
    }

    /// Independent closed-form solution for the rate-limited lag over one
    /// step, written out segment by segment.
    fn lag_oracle(x0: f64, target: f64, tau: f64, cap: f64, dt: f64) -> f64 {
        let err = target - x0;
        let band = cap * tau;
        if err.abs() <= band {
            // Pure exponential: x(t) = target - err * e^(-t/tau).
            return target - err * (-dt / tau).exp();
        }
        // Ramp at +-cap until |err| = band, then exponential.
        let ramp_time = (err.abs() - band) / cap;
        if dt <= ramp_time {
            x0 + err.signum() * cap * dt
        } else {
            let x_band = target - err.signum() * band;
            let err_band = target - x_band;
            target - err_band * (-(dt - ramp_time) / tau).exp()
        }
    }

    #[test]
    fn speed_step_matches_closed_form_in_both_regimes() {
        let cfg = cfg();
        let e = EnvParams::nominal();
        // Nominal linear cap: min(8, 1.0 * 9.81 * 0.8) = 7.848 (grip-limited).
        let cap = 7.848;

        // Far from target: saturated ramp regime.
        let s = State::new(0.0, 0.0, 0.0, 0.0, 0.0);
        let next = step(&cfg, &s, Action::new(3.0, 0.0), &e).unwrap();
        assert_abs_diff_eq!(next.v, lag_oracle(0.0, 3.0, cfg.tau_v, cap, cfg.dt), epsilon = 1e-12);
        // Still in the ramp after one step: exactly cap * dt.
        assert_abs_diff_eq!(next.v, cap * cfg.dt, epsilon = 1e-12);

        // Near the target: exponential regime.
        let s = State::new(0.0, 0.0, 0.0, 2.9, 0.0);
        let next = step(&cfg, &s, Action::new(3.0, 0.0), &e).unwrap();
        assert_abs_diff_eq!(next.v, lag_oracle(2.9, 3.0, cfg.tau_v, cap, cfg.dt), epsilon = 1e-12);
        assert_abs_diff_eq!(next.v, 3.0 - 0.1 * (-cfg.dt / cfg.tau_v).exp(), epsilon = 1e-12);

        // Step that crosses from ramp into exponential mid-interval.
        let s = State::new(0.0, 0.0, 0.0, 1.0, 0.0);
        let mut wide = cfg.clone();
        wide.dt = 0.4;
        let next = step(&wide, &s, Action::new(3.5, 0.0), &e).unwrap();
        assert_abs_diff_eq!(next.v, lag_oracle(1.0, 3.5, wide.tau_v, cap, wide.dt), epsilon = 1e-12);
    }

    #[test]
    fn braking_uses_the_stronger_cap() {
        let cfg = cfg();
        let e = EnvParams::nominal();
        let s = State::new(0.0, 0.0, 0.0, 3.0, 0.0);
        let next = step(&cfg, &s, Action::new(-1.0, 0.0), &e).unwrap();
        // Braking cap: min(10, 7.848) = 7.848, grip-limited at mu = 1 and no
        // payload; on extremely grippy ground (mu = 2.5, grip cap 19.62) the
        // brake limit binds instead.
        assert_abs_diff_eq!(next.v, lag_oracle(3.0, -1.0, cfg.tau_v, 7.848, cfg.dt), epsilon = 1e-12);
        let e_grippy = EnvParams { friction: 2.5, ..EnvParams::nominal() };
        let next = step(&cfg, &s, Action::new(-1.0, 0.0), &e_grippy).unwrap();
        assert_abs_diff_eq!(next.v, lag_oracle(3.0, -1.0, cfg.tau_v, 10.0, cfg.dt), epsilon = 1e-12);
    }

    #[test]
    fn payload_degrades_braking_at_nominal_friction() {
        // A loaded robot brakes measurably worse even on nominal ground: at
        // payload 12 the motor-side brake cap is 10 * 12 / 24 = 5 < 7.848.
        // The danger heatmaps lean on exactly this coupling, so pin it here.
        let cfg = cfg();
        let s = State::new(0.0, 0.0, 0.0, 3.0, 0.0);
        let heavy = EnvParams { payload_mass: 12.0, ..EnvParams::nominal() };
        let next = step(&cfg, &s, Action::new(0.0, 0.0), &heavy).unwrap();
        assert_abs_diff_eq!(next.v, lag_oracle(3.0, 0.0, cfg.tau_v, 5.0, cfg.dt), epsilon = 1e-12);
        let light = step(&cfg, &s, Action::new(0.0, 0.0), &EnvParams::nominal()).unwrap();
        assert!(light.v < next.v, "unloaded robot should shed speed faster");
    }

    #[test]
    fn holding_current_twist_advances_along_the_arc() {
        let cfg = cfg();
        let e = EnvParams::nominal();
        let s = State::new(1.0, 2.0, 0.5, 1.5, 0.8);
        let next = step(&cfg, &s, Action::new(1.5, 0.8), &e).unwrap();
        assert_abs_diff_eq!(next.v, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(next.omega, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(next.x, 1.0 + 1.5 * 0.5f64.cos() * cfg.dt, epsilon = 1e-12);
        assert_abs_diff_eq!(next.y, 2.0 + 1.5 * 0.5f64.sin() * cfg.dt, epsilon = 1e-12);
        assert_abs_diff_eq!(next.theta, 0.5 + 0.8 * cfg.dt, epsilon = 1e-12);
    }

    #[test]
    fn speed_integrates_exactly_under_substepping() {
        // The lag solution composes: one 0.05 s step equals five 0.01 s steps
        // whenever the regime classification is stable, which holds on a
        // monotone approach. Position may differ (heading updates mid-step).
        let cfg = cfg();
        let e = EnvParams { payload_mass: 6.0, friction: 0.6, ..EnvParams::nominal() };
        let s = State::new(0.0, 0.0, 0.2, 0.3, -0.4);
        let a = Action::new(3.2, 1.1);
        let coarse = step(&cfg, &s, a, &e).unwrap();
        let fine = step_substeps(&cfg, &s, a, &e, 5).unwrap();
        assert_abs_diff_eq!(coarse.v, fine.v, epsilon = 1e-10);
        assert_abs_diff_eq!(coarse.omega, fine.omega, epsilon = 1e-10);
    }

    #[test]
    fn external_force_drifts_position_not_speed() {
        let cfg = cfg();
        let e = EnvParams { ext_force: [10.0, -5.0], ..EnvParams::nominal() };
        let s = State::new(0.0, 0.0, 0.0, 0.0, 0.0);
        let next = step(&cfg, &s, Action::ZERO, &e).unwrap();
        let drift = cfg.drift_tau / cfg.base_mass;
        assert_abs_diff_eq!(next.x, 10.0 * drift * cfg.dt, epsilon = 1e-12);
        assert_abs_diff_eq!(next.y, -5.0 * drift * cfg.dt, epsilon = 1e-12);
        assert_abs_diff_eq!(next.v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn com_effects_have_the_documented_signatures() {
        let cfg = cfg();
        let s = State::new(0.0, 0.0, 0.0, 0.0, 0.0);

        // Lateral shift: standing still with zero command, yaw rate creeps
        // toward the bias.
        let e = EnvParams { com_shift: [0.0, 0.05, 0.0], ..EnvParams::nominal() };
        let next = step(&cfg, &s, Action::ZERO, &e).unwrap();
        assert!(next.omega > 0.0);

        // Longitudinal shift: yaw pull appears only while accelerating.
        let e = EnvParams { com_shift: [0.05, 0.0, 0.0], ..EnvParams::nominal() };
        let still = step(&cfg, &s, Action::ZERO, &e).unwrap();
        assert_abs_diff_eq!(still.omega, 0.0, epsilon = 1e-12);
        let thrusting = step(&cfg, &s, Action::new(3.0, 0.0), &e).unwrap();
        assert!(thrusting.omega > 0.0);

        // Raised center of mass: slower yaw spin-up.
        let spin = Action::new(0.0, 3.0);
        let low = step(&cfg, &s, spin, &EnvParams::nominal()).unwrap();
        let e = EnvParams { com_shift: [0.0, 0.0, 0.15], ..EnvParams::nominal() };
        let high = step(&cfg, &s, spin, &e).unwrap();
        assert!(high.omega < low.omega);
    }

    #[test]
    fn rejects_non_finite_and_impossible_inputs() {
        let cfg = cfg();
        let e = EnvParams::nominal();
        let s = State::new(f64::NAN, 0.0, 0.0, 0.0, 0.0);
        assert!(step(&cfg, &s, Action::ZERO, &e).is_err());
        let s = State::new(0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(step(&cfg, &s, Action::new(f64::INFINITY, 0.0), &e).is_err());
        let e_bad = EnvParams { payload_mass: -20.0, ..EnvParams::nominal() };
        assert!(step(&cfg, &s, Action::ZERO, &e_bad).is_err());
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        for k in -20..20 {
            let t = wrap_angle(0.7 + k as f64 * 1.9);
            assert!(t > -std::f64::consts::PI - 1e-12 && t <= std::f64::consts::PI + 1e-12);
        }
        assert_abs_diff_eq!(wrap_angle(std::f64::consts::TAU + 0.3), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-std::f64::consts::TAU - 0.3), -0.3, epsilon = 1e-12);
    }

    #[test]
    fn observe_is_noiseless_without_rng_and_noisy_with() {
        let cfg = cfg();
        let w = crate::world::tests::test_world();
        let s = State::new(1.0, 0.0, 0.3, 1.0, 0.0);
        let a = Action::new(2.0, 0.5);
        let o1 = observe(&cfg, &w, &s, a, None).unwrap();
        let o2 = observe(&cfg, &w, &s, a, None).unwrap();
        assert_eq!(o1, o2);
        let mut rng = derive_rng(1, &[9]);
        let o3 = observe(&cfg, &w, &s, a, Some(&mut rng)).unwrap();
        assert_ne!(o1, o3);
        // Same stream, same noise.
        let mut rng = derive_rng(1, &[9]);
        let o4 = observe(&cfg, &w, &s, a, Some(&mut rng)).unwrap();
        assert_eq!(o3, o4);
    }

    #[test]
    fn goal_relative_is_expressed_in_the_body_frame() {
        let cfg = cfg();
        let w = crate::world::tests::test_world();
        // Standing at the goal center looking +x: goal dead ahead at 0.
        let s = State::new(5.2, 0.0, 0.0, 0.0, 0.0);
        let o = observe(&cfg, &w, &s, Action::ZERO, None).unwrap();
        assert_abs_diff_eq!(o.goal_relative[0], 0.0, epsilon = 1e-12);
        // 1 m west of the goal, facing north: goal is to the right.
        let s = State::new(4.2, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let o = observe(&cfg, &w, &s, Action::ZERO, None).unwrap();
        assert_abs_diff_eq!(o.goal_relative[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.goal_relative[1], -1.0, epsilon = 1e-12);
    }

    fn arb_params() -> impl Strategy<Value = EnvParams> {
        let r = ParamRanges::default();
        (
            r.payload_mass[0]..r.payload_mass[1],
            r.com_x[0]..r.com_x[1],
            r.com_y[0]..r.com_y[1],
            r.com_z[0]..r.com_z[1],
            r.friction[0]..r.friction[1],
            r.ext_force_x[0]..r.ext_force_x[1],
            r.ext_force_y[0]..r.ext_force_y[1],
        )
            .prop_map(|(m, cx, cy, cz, mu, fx, fy)| EnvParams {
                payload_mass: m,
                com_shift: [cx, cy, cz],
                friction: mu,
                ext_force: [fx, fy],
            })
    }

    fn arb_state() -> impl Strategy<Value = State> {
        (-2.0f64..2.0, -2.0f64..2.0, -3.0f64..3.0, -1.0f64..3.5, -3.0f64..3.0)
            .prop_map(|(x, y, theta, v, omega)| State::new(x, y, theta, v, omega))
    }

    proptest! {
        /// Heavier payload never speeds up the response; higher friction
        /// never slows it down (all else equal).
        #[test]
        fn accel_monotone_in_payload_and_friction(
            e in arb_params(), s in arb_state(),
            v_cmd in -1.0f64..3.5, extra_mass in 0.0f64..6.0, extra_mu in 0.0f64..0.5,
        ) {
            let cfg = cfg();
            let a = Action::new(v_cmd, 0.0);
            let dv = |e: &EnvParams| (step(&cfg, &s, a, e).unwrap().v - s.v).abs();
            let base = dv(&e);

            let mut heavier = e;
            heavier.payload_mass = (e.payload_mass + extra_mass).min(12.0);
            prop_assert!(dv(&heavier) <= base + 1e-12);

            let mut grippier = e;
            grippier.friction = (e.friction + extra_mu).min(1.5);
            prop_assert!(dv(&grippier) >= base - 1e-12);
        }

        /// With symmetric parameters (no lateral/longitudinal CoM shift, no
        /// lateral force), the dynamics are mirror-symmetric about the x-axis.
        #[test]
        fn mirror_symmetry_without_asymmetric_params(
            s in arb_state(), v_cmd in -1.0f64..3.5, omega_cmd in -3.0f64..3.0,
            m in -2.0f64..12.0, cz in -0.05f64..0.15, mu in 0.25f64..1.5, fx in -15.0f64..15.0,
        ) {
            let cfg = cfg();
            let e = EnvParams { payload_mass: m, com_shift: [0.0, 0.0, cz], friction: mu, ext_force: [fx, 0.0] };
            let next = step(&cfg, &s, Action::new(v_cmd, omega_cmd), &e).unwrap();
            let mirrored_in = State::new(s.x, -s.y, wrap_angle(-s.theta), s.v, -s.omega);
            let next_m = step(&cfg, &mirrored_in, Action::new(v_cmd, -omega_cmd), &e).unwrap();
            prop_assert!((next_m.x - next.x).abs() < 1e-9);
            prop_assert!((next_m.y + next.y).abs() < 1e-9);
            prop_assert!((wrap_angle(next_m.theta + next.theta)).abs() < 1e-9);
            prop_assert!((next_m.v - next.v).abs() < 1e-9);
            prop_assert!((next_m.omega + next.omega).abs() < 1e-9);
        }

        /// Steps are bit-deterministic.
        #[test]
        fn step_is_deterministic(s in arb_state(), e in arb_params(), v in -1.0f64..3.5, w in -3.0f64..3.0) {
            let cfg = cfg();
            let a = Action::new(v, w);
            let s1 = step(&cfg, &s, a, &e).unwrap();
            let s2 = step(&cfg, &s, a, &e).unwrap();
            prop_assert_eq!(s1, s2);
        }

        /// Speed always respects the hard limit and the command box cannot
        /// push it past the commanded target band.
        #[test]
        fn speed_stays_bounded(s in arb_state(), e in arb_params(), v in -4.0f64..6.0, w in -5.0f64..5.0) {
            let cfg = cfg();
            let next = step(&cfg, &s, Action::new(v, w), &e).unwrap();
            prop_assert!(next.v.abs() <= cfg.v_max + 1e-12);
            prop_assert!(next.theta > -std::f64::consts::PI - 1e-12);
            prop_assert!(next.theta <= std::f64::consts::PI + 1e-12);
        }
    }
}
