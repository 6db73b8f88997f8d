//! Post-hoc verification and reporting over frozen models: sampled
//! sensitivity constants with the matching closed-form bound, obstacle-sweep
//! value rasters, their artifact writers, and outcome aggregation for
//! evaluation batches.
//!
//! The centerpiece is the chain from measurement to guarantee: sample the
//! closed loop for its dynamics constant, feed the constant through
//! [`lipschitz_bound`], and check the solved value function's parameter
//! slope against the result ([`empirical_value_lipschitz`]). Every sampled
//! supremum here is a lower estimate of the true constant, so the bound
//! check carries an explicit slack factor rather than pretending the
//! measurement is exact.
//!
//! Everything in this module reads its inputs and writes only its own
//! artifacts; nothing mutates a model.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contract_err;
use crate::dynamics::{
    observe, step, wrap_angle, Action, DynamicsConfig, EnvParams, Observation, ParamRanges, State,
};
use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{EstimateVector, ParamScaler, ESTIMATED_DIM};
use crate::ravalue::table::GridAxis;
use crate::ravalue::RaModel;
use crate::safeguard::{Classification, EpisodeOutcome};
use crate::world::{Disc, WorldSpec};

/// A conditioned policy as the sensitivity probes see it: noiseless
/// observation plus normalized parameter estimate in, twist command out.
/// Controllers that ignore the estimate just drop the second argument.
pub type ConditionedPolicy<'a> =
    &'a dyn Fn(&Observation, &[f64; ESTIMATED_DIM]) -> Result<Action>;

/// Maximum joint separation (state distance plus normalized parameter
/// distance) of a sampled pair. Kept small so each ratio reads a local
/// slope rather than a chord across the whole box.
pub const MAX_PAIR_SEPARATION: f64 = 0.05;

/// Horizon cap for the discrete-time sensitivity maximum: the summand
/// decays geometrically under the bound's own condition, so 1000 steps
/// stand in for the unbounded maximum.
pub const DISC_HORIZON: usize = 1000;

/// Normalized parameter separations probed by [`conditioning_probe_pairs`]:
/// one comfortably local, one at the pair-sampling scale, one coarser.
pub const VALUE_SEPARATIONS: [f64; 3] = [0.01, 0.05, 0.1];

// ---------------------------------------------------------------------------
// Sampling region
// ---------------------------------------------------------------------------

/// Axis-aligned sampling region for sensitivity probes: a box per state
/// coordinate and one per estimated parameter (physical units). A zero-width
/// interval pins its coordinate, which is how probes restrict themselves to
/// a dynamics regime (say, the exponential tail of the speed lag).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub theta: [f64; 2],
    pub v: [f64; 2],
    pub omega: [f64; 2],
    /// Parameter intervals in [`EstimateVector`] component order.
    pub e: [[f64; 2]; ESTIMATED_DIM],
}

impl SampleBox {
    /// The full randomization box: the arena for position, every heading,
    /// the speed and yaw-rate command ranges, and the configured parameter
    /// ranges (external force is not an estimated component and has no
    /// interval here).
    pub fn over(world: &WorldSpec, cfg: &DynamicsConfig, ranges: &ParamRanges) -> SampleBox {
        SampleBox {
            x: [world.arena.x_min, world.arena.x_max],
            y: [world.arena.y_min, world.arena.y_max],
            theta: [-std::f64::consts::PI, std::f64::consts::PI],
            v: [0.0, cfg.v_max],
            omega: [-cfg.omega_cmd_max, cfg.omega_cmd_max],
            e: [ranges.payload_mass, ranges.com_x, ranges.com_y, ranges.com_z, ranges.friction],
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.intervals() {
            ensure_finite(name, &[lo, hi])?;
            if lo > hi {
                return Err(contract_err!("sampling interval {name} is empty: [{lo}, {hi}]"));
            }
        }
        if self.intervals().iter().all(|(_, [lo, hi])| lo == hi) {
            return Err(contract_err!("sampling box is fully pinned; no pair can separate"));
        }
        Ok(())
    }

    fn intervals(&self) -> [(&'static str, [f64; 2]); 10] {
        [
            ("x", self.x),
            ("y", self.y),
            ("theta", self.theta),
            ("v", self.v),
            ("omega", self.omega),
            ("payload", self.e[0]),
            ("com_x", self.e[1]),
            ("com_y", self.e[2]),
            ("com_z", self.e[3]),
            ("friction", self.e[4]),
        ]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (State, EstimateVector) {
        let draw = |[lo, hi]: [f64; 2], rng: &mut ChaCha8Rng| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        let s = State::new(
            draw(self.x, rng),
            draw(self.y, rng),
            draw(self.theta, rng),
            draw(self.v, rng),
            draw(self.omega, rng),
        );
        let mut e = [0.0; ESTIMATED_DIM];
        for (i, interval) in self.e.iter().enumerate() {
            e[i] = draw(*interval, rng);
        }
        (s, EstimateVector::from_array(e))
    }

    /// A second point near `(s, e)`: a random direction over the unpinned
    /// coordinates (parameter components move in normalized units), scaled
    /// to a joint separation in `(0, MAX_PAIR_SEPARATION]`, then clamped
    /// back into the box. The caller re-measures the realized separation.
    fn perturb(
        &self,
        s: &State,
        e: &EstimateVector,
        scaler: &ParamScaler,
        rng: &mut ChaCha8Rng,
    ) -> (State, EstimateVector) {
        let widths: Vec<f64> = self.intervals().iter().map(|(_, [lo, hi])| hi - lo).collect();
        let mut dir = [0.0; 10];
        let mut norm = 0.0;
        while norm == 0.0 {
            for (d, w) in dir.iter_mut().zip(&widths) {
                *d = if *w > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            }
            norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        }
        let radius = MAX_PAIR_SEPARATION * (1.0 - rng.random::<f64>());
        let scale = radius / norm;
        let clamp = |value: f64, [lo, hi]: [f64; 2]| value.clamp(lo, hi);
        let s2 = State::new(
            clamp(s.x + dir[0] * scale, self.x),
            clamp(s.y + dir[1] * scale, self.y),
            clamp(s.theta + dir[2] * scale, self.theta),
            clamp(s.v + dir[3] * scale, self.v),
            clamp(s.omega + dir[4] * scale, self.omega),
        );
        let half = scaler.half_widths();
        let mut e2 = [0.0; ESTIMATED_DIM];
        for i in 0..ESTIMATED_DIM {
            e2[i] = clamp(e.as_array()[i] + dir[5 + i] * scale * half[i], self.e[i]);
        }
        (s2, EstimateVector::from_array(e2))
    }
}

/// Euclidean distance between two states with the heading difference
/// wrapped, so near-identical poses across the angle seam read as near.
fn state_distance(a: &State, b: &State) -> f64 {
    let d = [
        a.x - b.x,
        a.y - b.y,
        wrap_angle(a.theta - b.theta),
        a.v - b.v,
        a.omega - b.omega,
    ];
    d.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized_distance(scaler: &ParamScaler, a: &EstimateVector, b: &EstimateVector) -> f64 {
    let na = scaler.normalize(a);
    let nb = scaler.normalize(b);
    na.iter().zip(&nb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Measured constants
// ---------------------------------------------------------------------------

/// A sampled supremum together with how many pairs actually contributed —
/// a lower estimate of the true constant, tighter as the count grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub pairs: usize,
}

/// Samples the closed loop's joint sensitivity: the supremum over nearby
/// pairs of `‖f_π(s₁,e₁) − f_π(s₂,e₂)‖ / (‖s₁−s₂‖ + ‖e₁−e₂‖)`, where
/// `f_π` observes noiselessly (zero previous command), asks the policy
/// conditioned on the normalized true parameters, and takes one dynamics
/// step. Parameter distances are in normalized units so heterogeneous
/// components weigh comparably; state distances are physical.
///
/// `budget` pairs are attempted; pairs whose clamped separation degenerates
/// to zero are skipped and do not count.
pub fn estimate_dynamics_lipschitz(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: ConditionedPolicy,
    sbox: &SampleBox,
    scaler: &ParamScaler,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LipschitzEstimate> {
    if budget == 0 {
        return Err(contract_err!("sensitivity probe needs a pair budget of at least 1"));
    }
    sbox.validate()?;

    let eval = |s: &State, e: &EstimateVector| -> Result<State> {
        let obs = observe(cfg, world, s, Action::ZERO, None)?;
        let a = policy(&obs, &scaler.normalize(e))?;
        step(cfg, s, a, &e.to_env_nominal())
    };

    let mut sup = 0.0_f64;
    let mut pairs = 0usize;
    for _ in 0..budget {
        let (s1, e1) = sbox.sample(rng);
        let (s2, e2) = sbox.perturb(&s1, &e1, scaler, rng);
        let denom = state_distance(&s1, &s2) + normalized_distance(scaler, &e1, &e2);
        if denom <= 1e-12 {
            continue;
        }
        let numer = state_distance(&eval(&s1, &e1)?, &eval(&s2, &e2)?);
        sup = sup.max(numer / denom);
        pairs += 1;
    }
    if pairs == 0 {
        return Err(contract_err!("every sampled pair degenerated after clamping"));
    }
    Ok(LipschitzEstimate { value: sup, pairs })
}

/// Samples the margin functions' state sensitivity the same way: suprema of
/// `|l(s₁) − l(s₂)| / ‖s₁−s₂‖` and likewise for the failure margin. Both
/// margins are signed distances, so the true constants are 1; the sampled
/// values approach that from below.
pub fn estimate_margin_lipschitz(
    world: &WorldSpec,
    sbox: &SampleBox,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if budget == 0 {
        return Err(contract_err!("margin probe needs a pair budget of at least 1"));
    }
    sbox.validate()?;
    // Margins ignore the parameters; reuse the joint sampler and let the
    // parameter components ride along unused.
    let scaler = ParamScaler::new(&ParamRanges::default());
    let mut sup_l = 0.0_f64;
    let mut sup_zeta = 0.0_f64;
    let mut pairs = 0usize;
    for _ in 0..budget {
        let (s1, e1) = sbox.sample(rng);
        let (s2, _) = sbox.perturb(&s1, &e1, &scaler, rng);
        let denom = state_distance(&s1, &s2);
        if denom <= 1e-12 {
            continue;
        }
        let m1 = world.margins(s1.position())?;
        let m2 = world.margins(s2.position())?;
        sup_l = sup_l.max((m1.l - m2.l).abs() / denom);
        sup_zeta = sup_zeta.max((m1.zeta - m2.zeta).abs() / denom);
        pairs += 1;
    }
    if pairs == 0 {
        return Err(contract_err!("every sampled pair degenerated after clamping"));
    }
    Ok((sup_l, sup_zeta))
}

// ---------------------------------------------------------------------------
// Closed-form bound
// ---------------------------------------------------------------------------

/// Output of [`lipschitz_bound`]: the horizon where the per-step
/// sensitivity peaks, the continuous-time bound there, and the discrete
/// (integer-horizon) maximum it dominates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Maximizing horizon of the continuous relaxation.
    pub t_star: f64,
    /// Bound on the value function's parameter slope.
    pub ub_lv: f64,
    /// Maximum of the same expression over integer horizons `0..=1000` —
    /// what a discrete-time value function can actually accumulate.
    pub l_v_disc: f64,
    /// Integer horizon attaining `l_v_disc`.
    pub t_disc: usize,
}

/// Closed-form parameter-sensitivity bound for a discounted reach-avoid
/// value under `L`-Lipschitz closed-loop dynamics and 1-step margin
/// constants `L_l`, `L_ζ`.
///
/// A parameter offset `δ` displaces the horizon-`t` state by at most
/// `((1+L)^t − 1)·δ` (the offset re-enters the dynamics every step), and
/// the value weighs horizon `t` by `γ^t`, so the per-horizon sensitivity is
/// `g(t) = γ^t((1+L)^t − 1)` times the larger margin constant. Whenever
/// `γ(1+L) < 1` the growth loses to the discount and `g` has a single
/// interior maximum: solving `g'(t) = 0` gives
///
/// ```text
/// t* = ln( ln γ / ln(γ(1+L)) ) / ln(1+L),
/// g(t*) = γ^t* · ln(1+L) / (−ln(γ(1+L))),
/// ```
///
/// so `UB = max{L_l, L_ζ} · g(t*)`. The maximum of `g` over integer
/// horizons (capped at [`DISC_HORIZON`]) is returned alongside; it can only
/// be smaller, which is the dominance property tests pin down. When
/// `γ(1+L) ≥ 1` the growth wins, no finite bound exists, and the function
/// refuses rather than reporting one.
pub fn lipschitz_bound(gamma: f64, l_f_pi: f64, l_l: f64, l_zeta: f64) -> Result<BoundReport> {
    ensure_finite("bound inputs", &[gamma, l_f_pi, l_l, l_zeta])?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(contract_err!("discount must lie in (0, 1), got {gamma}"));
    }
    for (name, value) in [("L_f_pi", l_f_pi), ("L_l", l_l), ("L_zeta", l_zeta)] {
        if value <= 0.0 {
            return Err(contract_err!("{name} must be positive, got {value}"));
        }
    }
    let growth = gamma * (1.0 + l_f_pi);
    if growth >= 1.0 {
        return Err(contract_err!(
            "sensitivity condition failed: discount x (1 + dynamics constant) = {growth} >= 1, \
             so the parameter slope has no finite bound at this discount"
        ));
    }

    let margin = l_l.max(l_zeta);
    let log_growth = growth.ln(); // negative
    let log_rate = (1.0 + l_f_pi).ln(); // positive
    let t_star = (gamma.ln() / log_growth).ln() / log_rate;
    let ub_lv = margin * gamma.powf(t_star) * log_rate / (-log_growth);

    // Discrete maximum of g(t) = γ^t((1+L)^t − 1) = (γ(1+L))^t − γ^t.
    let mut grown = 1.0_f64; // (γ(1+L))^t
    let mut plain = 1.0_f64; // γ^t
    let mut l_v_disc = 0.0_f64;
    let mut t_disc = 0usize;
    for t in 1..=DISC_HORIZON {
        grown *= growth;
        plain *= gamma;
        let g = grown - plain;
        if g > l_v_disc {
            l_v_disc = g;
            t_disc = t;
        }
    }
    l_v_disc *= margin;

    Ok(BoundReport { t_star, ub_lv, l_v_disc, t_disc })
}

// ---------------------------------------------------------------------------
// Empirical value slope
// ---------------------------------------------------------------------------

/// Finite-difference parameter slope of a frozen model: the maximum over
/// `probes × pairs` of `|V(s,e₁) − V(s,e₂)| / ‖e₁−e₂‖`, with values
/// rescaled to physical margin units (the bound's units) and parameter
/// distances normalized. Pairs whose normalized separation degenerates are
/// skipped.
pub fn empirical_value_lipschitz(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    model: &RaModel,
    probes: &[State],
    pairs: &[(EstimateVector, EstimateVector)],
    scaler: &ParamScaler,
) -> Result<f64> {
    if probes.is_empty() || pairs.is_empty() {
        return Err(contract_err!("value-slope probe needs at least one state and one parameter pair"));
    }
    let scale = model.margin_scale();
    let mut sup = 0.0_f64;
    let mut used = 0usize;
    for (e1, e2) in pairs {
        let denom = normalized_distance(scaler, e1, e2);
        if denom <= 1e-12 {
            continue;
        }
        for s in probes {
            let v1 = model.value(world, cfg, s, e1)?.value * scale;
            let v2 = model.value(world, cfg, s, e2)?.value * scale;
            sup = sup.max((v1 - v2).abs() / denom);
        }
        used += 1;
    }
    if used == 0 {
        return Err(contract_err!("every parameter pair degenerated; no slope measured"));
    }
    Ok(sup)
}

/// Parameter pairs for the slope probe: `per_separation` pairs at each of
/// [`VALUE_SEPARATIONS`], centers uniform over the calibrated box in
/// normalized coordinates, second points offset along a random direction
/// and clamped back into the box.
pub fn conditioning_probe_pairs(
    scaler: &ParamScaler,
    per_separation: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(EstimateVector, EstimateVector)> {
    let mut out = Vec::with_capacity(VALUE_SEPARATIONS.len() * per_separation);
    for &sep in &VALUE_SEPARATIONS {
        for _ in 0..per_separation {
            let mut n1 = [0.0; ESTIMATED_DIM];
            for c in n1.iter_mut() {
                *c = rng.random_range(-1.0..=1.0);
            }
            let mut dir = [0.0; ESTIMATED_DIM];
            let mut norm = 0.0;
            while norm == 0.0 {
                for d in dir.iter_mut() {
                    *d = rng.sample(StandardNormal);
                }
                norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            }
            let mut n2 = [0.0; ESTIMATED_DIM];
            for i in 0..ESTIMATED_DIM {
                n2[i] = (n1[i] + dir[i] / norm * sep).clamp(-1.0, 1.0);
            }
            out.push((scaler.denormalize(n1), scaler.denormalize(n2)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Assembled report
// ---------------------------------------------------------------------------

/// The sensitivity story in one record: measured constants, the closed-form
/// bound at the model's discount (absent when the finiteness condition
/// fails, which the flag says out loud), and the measured value slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub l_l: f64,
    pub l_zeta: f64,
    pub l_f_pi: f64,
    /// Discount the bound was evaluated at (the model's own).
    pub gamma: f64,
    /// Whether `γ(1+L_fπ) < 1`; the bound fields are present exactly then.
    pub condition_ok: bool,
    pub t_star: Option<f64>,
    pub ub_lv: Option<f64>,
    pub l_v_disc: Option<f64>,
    pub empirical_lv: f64,
    /// Pairs behind the dynamics constant.
    pub dynamics_pairs: usize,
}

/// Measures everything and assembles the record: margin constants and the
/// dynamics constant over `sbox`, the bound at `model.gamma()` when its
/// condition holds, and the empirical slope over the given probes and
/// pairs. A failed condition is a finding, not an error — the report
/// flags it and omits the bound fields.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_report(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    model: &RaModel,
    policy: ConditionedPolicy,
    sbox: &SampleBox,
    scaler: &ParamScaler,
    probes: &[State],
    pairs: &[(EstimateVector, EstimateVector)],
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LipschitzReport> {
    let (l_l, l_zeta) = estimate_margin_lipschitz(world, sbox, budget, rng)?;
    let dynamics = estimate_dynamics_lipschitz(world, cfg, policy, sbox, scaler, budget, rng)?;
    let empirical_lv = empirical_value_lipschitz(world, cfg, model, probes, pairs, scaler)?;
    let gamma = model.gamma();
    // Degenerate measured margins (a constant-margin box) still need positive
    // inputs for the bound; a margin constant of zero just scales it away.
    let bound = lipschitz_bound(gamma, dynamics.value, l_l.max(1e-12), l_zeta.max(1e-12));
    let (condition_ok, t_star, ub_lv, l_v_disc) = match bound {
        Ok(b) => (true, Some(b.t_star), Some(b.ub_lv), Some(b.l_v_disc)),
        Err(_) => (false, None, None, None),
    };
    Ok(LipschitzReport {
        l_l,
        l_zeta,
        l_f_pi: dynamics.value,
        gamma,
        condition_ok,
        t_star,
        ub_lv,
        l_v_disc,
        empirical_lv,
        dynamics_pairs: dynamics.pairs,
    })
}

// ---------------------------------------------------------------------------
// Obstacle-sweep rasters
// ---------------------------------------------------------------------------

/// Relative obstacle placements for a value raster: offsets in the probe's
/// heading frame (`ahead` along the heading, `lateral` to its left) and the
/// disc radius planted at each pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSweep {
    pub ahead: GridAxis,
    pub lateral: GridAxis,
    pub radius: f64,
}

impl ObstacleSweep {
    fn validate(&self) -> Result<()> {
        self.ahead.validate("sweep ahead axis")?;
        self.lateral.validate("sweep lateral axis")?;
        if self.ahead.circular || self.lateral.circular {
            return Err(contract_err!("sweep axes are offsets, not angles; circular axes are invalid"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(contract_err!("sweep obstacle radius must be positive, got {}", self.radius));
        }
        Ok(())
    }
}

/// One payload mass's value raster over the sweep grid, stored lateral-major:
/// `values[li * ahead.n + ai]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub payload_mass: f64,
    pub ahead: GridAxis,
    pub lateral: GridAxis,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn value_at(&self, ai: usize, li: usize) -> f64 {
        self.values[li * self.ahead.n + ai]
    }
}

/// Value rasters for an obstacle swept over relative positions, one per
/// payload mass, with the robot pinned at the probe twist (the headline
/// configuration is 3 m/s straight ahead). Conditioning per raster is
/// `base` with its payload replaced by the raster's mass.
///
/// The two model kinds need opposite sweeps and the function picks the
/// faithful one:
///
/// * a **net** reads the scene, so the sweep plants a fresh disc per pixel
///   into an obstacle-free `world` (one already holding obstacles is
///   refused — the raster would confound the planted disc with the fixed
///   ones);
/// * a **table** bakes its world in at solve time, so the sweep moves the
///   robot relative to the solved obstacle instead — the same relative
///   geometry, exact for the solved world. `world` must then be that world,
///   with the swept disc first in its obstacle list and matching radius.
pub fn heatmap(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    model: &RaModel,
    probe: &State,
    sweep: &ObstacleSweep,
    masses: &[f64],
    base: &EnvParams,
) -> Result<Vec<Raster>> {
    sweep.validate()?;
    ensure_finite("probe state", &probe.as_array())?;
    if masses.is_empty() {
        return Err(contract_err!("raster sweep needs at least one payload mass"));
    }
    ensure_finite("payload masses", masses)?;

    let (sin_h, cos_h) = probe.theta.sin_cos();
    let offset = |ai: usize, li: usize| -> [f64; 2] {
        let a = sweep.ahead.node(ai);
        let l = sweep.lateral.node(li);
        [a * cos_h - l * sin_h, a * sin_h + l * cos_h]
    };

    let anchor = match model {
        RaModel::Table(_) => {
            let ob = world.obstacles.first().ok_or_else(|| {
                contract_err!("table sweep moves the robot around the solved obstacle, but the world has none")
            })?;
            if (ob.radius - sweep.radius).abs() > 1e-9 {
                return Err(contract_err!(
                    "sweep radius {} does not match the solved obstacle radius {}",
                    sweep.radius,
                    ob.radius
                ));
            }
            Some(ob.center)
        }
        RaModel::Net(_) => {
            if !world.obstacles.is_empty() {
                return Err(contract_err!(
                    "net sweep plants its own obstacle; start from an obstacle-free world"
                ));
            }
            None
        }
    };

    let mut rasters = Vec::with_capacity(masses.len());
    for &mass in masses {
        let cond = EstimateVector::from_env(&EnvParams { payload_mass: mass, ..*base });
        let mut values = Vec::with_capacity(sweep.ahead.n * sweep.lateral.n);
        for li in 0..sweep.lateral.n {
            for ai in 0..sweep.ahead.n {
                let d = offset(ai, li);
                let v = match anchor {
                    Some(center) => {
                        let s = State::new(
                            center[0] - d[0],
                            center[1] - d[1],
                            probe.theta,
                            probe.v,
                            probe.omega,
                        );
                        model.value(world, cfg, &s, &cond)?.value
                    }
                    None => {
                        let mut planted = world.clone();
                        planted.obstacles.push(Disc {
                            center: [probe.x + d[0], probe.y + d[1]],
                            radius: sweep.radius,
                        });
                        model.value(&planted, cfg, probe, &cond)?.value
                    }
                };
                values.push(v);
            }
        }
        rasters.push(Raster {
            payload_mass: mass,
            ahead: sweep.ahead,
            lateral: sweep.lateral,
            values,
        });
    }
    Ok(rasters)
}

/// Mean raster value over the pixels whose offsets land in the closed
/// ranges — the forward-patch statistic behind the payload-ordering check.
pub fn forward_patch_mean(
    raster: &Raster,
    ahead_range: [f64; 2],
    lateral_range: [f64; 2],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for li in 0..raster.lateral.n {
        let l = raster.lateral.node(li);
        if l < lateral_range[0] || l > lateral_range[1] {
            continue;
        }
        for ai in 0..raster.ahead.n {
            let a = raster.ahead.node(ai);
            if a < ahead_range[0] || a > ahead_range[1] {
                continue;
            }
            sum += raster.value_at(ai, li);
            count += 1;
        }
    }
    if count == 0 {
        return Err(contract_err!(
            "patch [{}, {}] x [{}, {}] covers no raster pixel",
            ahead_range[0],
            ahead_range[1],
            lateral_range[0],
            lateral_range[1]
        ));
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

/// Writes a raster as a binary 8-bit graymap (`P5`), mapping `[lo, hi]`
/// linearly onto `[0, 255]` (values outside clip). Rows run from the
/// highest lateral offset down, so "left of the heading" is the top of the
/// image. Byte-identical across runs for identical inputs.
pub fn write_pgm(path: &Path, raster: &Raster, lo: f64, hi: f64) -> Result<()> {
    ensure_finite("pgm range", &[lo, hi])?;
    if lo >= hi {
        return Err(contract_err!("pgm range is empty: [{lo}, {hi}]"));
    }
    let mut bytes = Vec::with_capacity(64 + raster.values.len());
    write!(bytes, "P5\n{} {}\n255\n", raster.ahead.n, raster.lateral.n)?;
    for li in (0..raster.lateral.n).rev() {
        for ai in 0..raster.ahead.n {
            let t = (raster.value_at(ai, li) - lo) / (hi - lo);
            bytes.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes a raster as RFC-4180 CSV with one `ahead_m, lateral_m, value` row
/// per pixel, in storage order. Floats print in shortest round-trip form,
/// so identical rasters produce identical bytes.
pub fn write_raster_csv(path: &Path, raster: &Raster) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["ahead_m", "lateral_m", "value"]).map_err(csv_error)?;
    for li in 0..raster.lateral.n {
        for ai in 0..raster.ahead.n {
            w.serialize((raster.ahead.node(ai), raster.lateral.node(li), raster.value_at(ai, li)))
                .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Outcome aggregation
// ---------------------------------------------------------------------------

/// Evaluation-table row for one episode batch. Percentages partition the
/// batch; the peak speed averages over reaching episodes only (`None` when
/// none reached), since a crashed run's peak says nothing about agility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub episodes: usize,
    pub collision_pct: f64,
    pub reach_pct: f64,
    pub timeout_pct: f64,
    pub v_peak_mean: Option<f64>,
    /// Mean fraction of steps spent under the recovery policy, over all
    /// episodes — how often the safeguard actually intervened.
    pub recovery_fraction_mean: f64,
}

/// Aggregates a nonempty batch of episode outcomes into the summary row.
pub fn aggregate_metrics(outcomes: &[EpisodeOutcome]) -> Result<MetricSummary> {
    if outcomes.is_empty() {
        return Err(contract_err!("metric aggregation needs at least one episode"));
    }
    let mut collisions = 0usize;
    let mut reaches = 0usize;
    let mut timeouts = 0usize;
    let mut v_sum = 0.0;
    let mut recovery_sum = 0.0;
    for o in outcomes {
        match o.classification {
            Classification::Collision => collisions += 1,
            Classification::Reach => {
                reaches += 1;
                v_sum += o.v_peak;
            }
            Classification::Timeout => timeouts += 1,
        }
        recovery_sum += o.recovery_fraction;
    }
    let n = outcomes.len() as f64;
    Ok(MetricSummary {
        episodes: outcomes.len(),
        collision_pct: collisions as f64 * 100.0 / n,
        reach_pct: reaches as f64 * 100.0 / n,
        timeout_pct: timeouts as f64 * 100.0 / n,
        v_peak_mean: (reaches > 0).then(|| v_sum / reaches as f64),
        recovery_fraction_mean: recovery_sum / n,
    })
}

/// One-sided exact sign test: the probability of at least `wins` successes
/// in `wins + losses` fair-coin trials. Ties are the caller's to drop, per
/// the usual convention. No trials means no evidence: p = 1.
///
/// Exact binomial arithmetic up to 100 trials (sums fit an integer, the
/// denominator is a power of two, so the quotient is correctly rounded); a
/// running-coefficient float evaluation beyond, where single-ulp error is
/// irrelevant against any sane significance level.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    if n <= 100 {
        let mut coef: u128 = 1; // C(n, 0)
        let mut tail: u128 = 0;
        for k in 0..=n {
            if k >= wins {
                tail += coef;
            }
            if k < n {
                coef = coef * (n - k) as u128 / (k + 1) as u128;
            }
        }
        (tail as f64) / 2f64.powi(n as i32)
    } else {
        let mut coef = 1.0_f64;
        let mut tail = 0.0_f64;
        let half = 2f64.powi(-(n as i32));
        for k in 0..=n {
            if k >= wins {
                tail += coef * half;
            }
            if k < n {
                coef = coef * (n - k) as f64 / (k + 1) as f64;
            }
        }
        tail.min(1.0)
    }
}
