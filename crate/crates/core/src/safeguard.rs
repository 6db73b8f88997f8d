//! Deployment runtime: the closed loop that estimates the physics, reads the
//! reach-avoid value at the estimate, and hands command to whichever policy
//! the value sign says should be driving.
//!
//! The arbitration rule is deliberately thin. A state whose conditioned value
//! is positive is outside the certified reach-avoid set for the current
//! physics estimate, so the agile policy has no guarantee there and the
//! recovery policy takes over; the moment the value drops back below the
//! threshold, the agile policy resumes. Everything interesting lives in the
//! value function — the switch itself is one comparison per step, which is
//! what makes the runtime auditable.
//!
//! The recovery policy is a twist tracker, so engaging it requires choosing
//! *which* twist to track. That choice is a one-step lookahead: simulate each
//! candidate twist through the nominal dynamics at the estimated parameters
//! and track the candidate whose predicted successor has the lowest value —
//! the steepest available descent back toward certified territory, measured
//! by the same function that triggered the engagement.
//!
//! One estimator history window spans the whole episode regardless of who is
//! driving: both policies excite the same physics, so both contribute
//! evidence, and resetting on a switch would throw away exactly the
//! transient that made the switch necessary.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contract_err;
use crate::dynamics::{observe, step, Action, DynamicsConfig, EnvParams, State};
use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{EstimateVector, Estimator, HistoryWindow};
use crate::policies::{agile_act, recovery_act, PolicyParams, PolicyRole};
use crate::ravalue::RaModel;
use crate::world::{Margins, WorldSpec};

/// Switch rule: recovery engages while the conditioned value exceeds
/// `threshold`.
///
/// `threshold` defaults to 0 — the sign test of the reach-avoid definition.
/// `+inf` never engages (the agile-only ablation); `-inf` always engages.
/// A positive `hysteresis` lowers the release threshold once engaged, so a
/// value rattling around the boundary does not chatter between policies;
/// it defaults to 0 (off).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub threshold: f64,
    pub hysteresis: f64,
}

impl Default for SwitchConfig {
    fn default() -> SwitchConfig {
        SwitchConfig { threshold: 0.0, hysteresis: 0.0 }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() {
            return Err(Error::Config("switch threshold must not be NaN".into()));
        }
        if !(self.hysteresis >= 0.0) {
            return Err(Error::Config(format!(
                "hysteresis must be non-negative, got {}",
                self.hysteresis
            )));
        }
        Ok(())
    }

    /// The threshold test, with the release edge shifted down by the
    /// hysteresis band while already engaged.
    pub fn engage(&self, value: f64, engaged: bool) -> bool {
        let edge = if engaged { self.threshold - self.hysteresis } else { self.threshold };
        value > edge
    }
}

/// Who arbitrates: the full runtime, or one policy pinned on for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Value-gated switching between the two policies.
    Safeguarded,
    /// Agile policy only; equivalent to an infinite switch threshold.
    AgileOnly,
    /// Recovery policy only, tracking the value-minimizing twist every step.
    RecoveryOnly,
}

/// How an episode ended. Exactly one applies: a failing state ends the
/// episode immediately, so reach means the target was hit with no failure
/// before it, and timeout means the horizon ran out with neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Collision,
    Reach,
    Timeout,
}

/// Episode-level summary used by the evaluation tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub classification: Classification,
    /// Acting steps taken (0 if the start state was already terminal).
    pub steps: usize,
    /// Largest speed magnitude over every visited state.
    pub v_peak: f64,
    /// Fraction of acting steps under the recovery policy.
    pub recovery_fraction: f64,
    pub min_ra_value: f64,
    pub max_ra_value: f64,
}

/// A change of command: `engaged` is who holds it from `step` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub step: usize,
    /// True when recovery took over, false when the agile policy resumed.
    pub engaged: bool,
}

/// One acting step of the closed loop, recorded before the state advances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub state: State,
    pub margins: Margins,
    /// Conditioned reach-avoid value at (state, estimate).
    pub value: f64,
    pub estimate: EstimateVector,
    pub action: Action,
    /// True while the recovery policy held command this step.
    pub recovery: bool,
}

/// Full episode record: enough to re-render the trajectory, audit every
/// switch decision, and recompute the outcome from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trace: Vec<StepTrace>,
    /// State the episode stopped in (first terminal state, or the horizon
    /// state).
    pub final_state: State,
    pub final_margins: Margins,
    pub switches: Vec<SwitchEvent>,
    /// Steps at which a scheduled physics change was applied.
    pub shifts_applied: Vec<usize>,
    pub outcome: EpisodeOutcome,
}

/// The trained components the closed loop runs on, plus the switch rule and
/// the recovery candidate set.
pub struct Runtime<'a> {
    pub cfg: &'a DynamicsConfig,
    pub agile: &'a PolicyParams,
    pub recovery: &'a PolicyParams,
    pub estimator: &'a Estimator,
    pub value: &'a RaModel,
    pub switch: SwitchConfig,
    pub candidates: Vec<Action>,
}

impl<'a> Runtime<'a> {
    /// Bundles the components, checking the policy roles up front so a
    /// swapped pair fails here instead of at step 17 of episode 412.
    pub fn new(
        cfg: &'a DynamicsConfig,
        agile: &'a PolicyParams,
        recovery: &'a PolicyParams,
        estimator: &'a Estimator,
        value: &'a RaModel,
        switch: SwitchConfig,
    ) -> Result<Runtime<'a>> {
        if agile.role != PolicyRole::Agile {
            return Err(contract_err!("runtime given a non-agile parameter set for the agile slot"));
        }
        if recovery.role != PolicyRole::Recovery {
            return Err(contract_err!(
                "runtime given a non-recovery parameter set for the recovery slot"
            ));
        }
        switch.validate()?;
        Ok(Runtime {
            cfg,
            agile,
            recovery,
            estimator,
            value,
            switch,
            candidates: default_candidates(cfg),
        })
    }
}

/// Default recovery candidate set: a 9 x 9 grid spanning the command box,
/// plus the full stop. Coarse on purpose — the lookahead pays one dynamics
/// step and one value query per candidate per engaged step.
pub fn default_candidates(cfg: &DynamicsConfig) -> Vec<Action> {
    let mut out = Vec::with_capacity(82);
    for i in 0..9 {
        let v = cfg.v_cmd_min + (cfg.v_cmd_max - cfg.v_cmd_min) * i as f64 / 8.0;
        for j in 0..9 {
            let w = -cfg.omega_cmd_max + 2.0 * cfg.omega_cmd_max * j as f64 / 8.0;
            out.push(Action::new(v, w));
        }
    }
    out.push(Action::ZERO);
    out
}

/// The switch predicate on its own: true when the value at `(s, e_hat)`
/// exceeds the threshold (no hysteresis — that needs the engagement state,
/// which only the episode loop has).
pub fn should_recover(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    s: &State,
    e_hat: &EstimateVector,
    model: &RaModel,
    switch: &SwitchConfig,
) -> Result<bool> {
    let v = model.value(world, cfg, s, e_hat)?.value;
    Ok(switch.engage(v, false))
}

/// Picks the twist for the recovery policy to track: the candidate whose
/// one-step successor under the estimated physics has the lowest value.
///
/// The lookahead runs the nominal dynamics with the estimate substituted for
/// the truth — the runtime has no access to the true parameters, so this is
/// the deployment-faithful model of "what would this twist do". Ties go to
/// the smaller twist norm (prefer the gentler command), then lexicographic
/// order, so the selection is a deterministic function of its inputs.
pub fn select_recovery_twist(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    s: &State,
    e_hat: &EstimateVector,
    model: &RaModel,
    candidates: &[Action],
) -> Result<Action> {
    if candidates.is_empty() {
        return Err(contract_err!("recovery twist selection needs at least one candidate"));
    }
    let e_nom = e_hat.to_env_nominal();
    let mut best: Option<(f64, Action)> = None;
    for &c in candidates {
        let next = step(cfg, s, c, &e_nom)?;
        let v = model.value(world, cfg, &next, e_hat)?.value;
        ensure_finite("predicted recovery value", &[v])?;
        let better = match best {
            None => true,
            Some((bv, ba)) => {
                v < bv
                    || (v == bv
                        && (c.norm() < ba.norm()
                            || (c.norm() == ba.norm()
                                && (c.v_cmd, c.omega_cmd) < (ba.v_cmd, ba.omega_cmd))))
            }
        };
        if better {
            best = Some((v, c));
        }
    }
    Ok(best.expect("nonempty candidate list always yields a selection").1)
}

/// Runs one closed-loop episode and classifies it.
///
/// Per acting step: check margins (a terminal state freezes the episode),
/// observe with sensor noise, estimate the physics from the history window,
/// query the value, arbitrate, act, record, advance. Scheduled `shifts`
/// replace the true physics at the given step — an evaluation-only device
/// for time-varying scenarios; the runtime itself never sees them except
/// through the proprioception they cause.
///
/// Component failures propagate with the step index attached.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    world: &WorldSpec,
    rt: &Runtime,
    s0: State,
    e_true: &EnvParams,
    mode: RunMode,
    shifts: &[(usize, EnvParams)],
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord> {
    let cfg = rt.cfg;
    let scaler = rt.estimator.scaler();
    let mut window = HistoryWindow::new(rt.estimator.history_len());
    let mut s = s0;
    let mut a_prev = Action::ZERO;
    let mut e_cur = *e_true;
    let mut engaged = false;
    let mut trace: Vec<StepTrace> = Vec::new();
    let mut switches: Vec<SwitchEvent> = Vec::new();
    let mut shifts_applied: Vec<usize> = Vec::new();

    for t in 0..cfg.horizon {
        for (at, e) in shifts {
            if *at == t {
                e_cur = *e;
                shifts_applied.push(t);
            }
        }
        let m = world.margins(s.position()).map_err(|err| err.at_step(t))?;
        if m.zeta > 0.0 || m.l <= 0.0 {
            break;
        }
        let obs = observe(cfg, world, &s, a_prev, Some(rng)).map_err(|err| err.at_step(t))?;
        let e_hat = rt.estimator.estimate(&window).map_err(|err| err.at_step(t))?;
        let value = rt
            .value
            .value(world, cfg, &s, &e_hat)
            .map_err(|err| err.at_step(t))?
            .value;
        let recover = match mode {
            RunMode::Safeguarded => rt.switch.engage(value, engaged),
            RunMode::AgileOnly => false,
            RunMode::RecoveryOnly => true,
        };
        if recover != engaged {
            switches.push(SwitchEvent { step: t, engaged: recover });
            engaged = recover;
        }
        let action = if recover {
            let twist = select_recovery_twist(world, cfg, &s, &e_hat, rt.value, &rt.candidates)
                .map_err(|err| err.at_step(t))?;
            recovery_act(rt.recovery, cfg, &obs, twist).map_err(|err| err.at_step(t))?
        } else {
            let cond = scaler.normalize(&e_hat);
            agile_act(rt.agile, cfg, &obs, &cond).map_err(|err| err.at_step(t))?
        };
        window.push(&obs, action);
        trace.push(StepTrace { state: s, margins: m, value, estimate: e_hat, action, recovery: recover });
        s = step(cfg, &s, action, &e_cur).map_err(|err| err.at_step(t))?;
        a_prev = action;
    }

    let final_margins = world.margins(s.position())?;
    let classification = if final_margins.zeta > 0.0 {
        Classification::Collision
    } else if final_margins.l <= 0.0 {
        Classification::Reach
    } else {
        Classification::Timeout
    };

    let v_peak = trace
        .iter()
        .map(|r| r.state.v.abs())
        .fold(s.v.abs(), f64::max);
    let recovery_steps = trace.iter().filter(|r| r.recovery).count();
    let recovery_fraction =
        if trace.is_empty() { 0.0 } else { recovery_steps as f64 / trace.len() as f64 };
    let (min_ra_value, max_ra_value) = if trace.is_empty() {
        // Terminal before the first acting step: report the value the switch
        // would have seen, from the blank-window estimate.
        let e0 = rt.estimator.estimate(&window)?;
        let v = rt.value.value(world, cfg, &s, &e0)?.value;
        (v, v)
    } else {
        trace.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.value), hi.max(r.value))
        })
    };

    Ok(EpisodeRecord {
        outcome: EpisodeOutcome {
            classification,
            steps: trace.len(),
            v_peak,
            recovery_fraction,
            min_ra_value,
            max_ra_value,
        },
        trace,
        final_state: s,
        final_margins,
        switches,
        shifts_applied,
    })
}
