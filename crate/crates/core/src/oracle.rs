//! Ground truth by exhaustive simulation.
//!
//! Everything here is deliberately brute force: roll the exact closed loop
//! from a queried start state, record the raw margins along the way, and
//! read set memberships and values straight off the trajectory. No
//! interpolation, no bootstrapping, no learned parts — these are the
//! answers the fast machinery in [`crate::ravalue`] is checked against.
//!
//! All loops are deterministic and noise-free: sensing uses the exact state,
//! and the policies under test are memoryless maps from observation to
//! command, so membership is a well-defined property of the start state
//! alone. Horizons are finite. A trajectory that neither touches the target
//! nor stops moving within the horizon is treated as frozen at its last
//! state, which under-reports reaching and over-reports safety by at most a
//! band of near-boundary starts; the cross-checks that compare against
//! converged tables exempt exactly that band (see [`boundary_band`]).

use rayon::prelude::*;

use crate::dynamics::{observe, step_substeps, Action, DynamicsConfig, EnvParams, Observation, State};
use crate::error::{Error, Result};
use crate::policies::{BrakeController, SwerveController};
use crate::ravalue::table::{BackupProblem, EBins, GridAxis, StateGrid};
use crate::ravalue::{drabe_backup, normalize_margin};
use crate::world::{Disc, Margins, Rect, WorldSpec};

/// Hard ceiling on `cells x parameter sets` for an exhaustive sweep. Above
/// this the sweep refuses outright rather than silently taking minutes;
/// callers chunk the parameter list or coarsen the grid.
pub const SWEEP_BUDGET: usize = 100_000;

/// Two consecutive states closer than this in every coordinate are treated
/// as a fixed point of the loop: the tail of the trajectory is that state
/// repeated forever.
const SETTLE_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Closed-loop rollouts
// ---------------------------------------------------------------------------

/// One deterministic closed-loop trajectory with its raw margins.
///
/// The roll stops early in two cases, both recorded: `absorbed` when the
/// target margin first reaches `l <= 0` (the task is complete; the episode
/// freezes there), and `settled` when the state stops moving to within
/// [`SETTLE_TOL`] (a memoryless policy then repeats the same state forever).
/// [`margins_at`](Rollout::margins_at) extends the stored prefix to any
/// horizon by freezing the final entry, which is exact in both cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Visited states, `s_0` first.
    pub states: Vec<State>,
    /// Raw (unnormalized) margins at each state, aligned with `states`.
    pub margins: Vec<Margins>,
    /// The final state is on the target (`l <= 0`).
    pub absorbed: bool,
    /// The loop reached a fixed point before the horizon.
    pub settled: bool,
}

impl Rollout {
    /// Margins at step `t`, with the final entry frozen for `t` past the end.
    pub fn margins_at(&self, t: usize) -> Margins {
        self.margins[t.min(self.margins.len() - 1)]
    }

    /// Number of stored steps (states minus one).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Rolls the closed loop `policy ∘ observe ∘ step` from `s0` for at most
/// `horizon` control periods under true parameters `e`.
///
/// Observations are noiseless and carry a zero previous command: the
/// benchmark controllers are memoryless, so the command-history channels are
/// irrelevant, and fixing them keeps membership a function of the state
/// alone. `substeps = 1` is the production integrator; larger values refine
/// the integration within each control period (same command rate) and exist
/// for discretization cross-checks.
pub fn roll_closed_loop<P>(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: &P,
    s0: State,
    e: &EnvParams,
    horizon: usize,
    substeps: usize,
) -> Result<Rollout>
where
    P: Fn(&Observation) -> Result<Action> + ?Sized,
{
    let mut states = Vec::with_capacity(16);
    let mut margins = Vec::with_capacity(16);
    states.push(s0);
    margins.push(world.margins(s0.position())?);
    let mut absorbed = margins[0].l <= 0.0;
    let mut settled = false;

    while !absorbed && !settled && states.len() <= horizon {
        let s = *states.last().expect("rollout holds at least the start state");
        let obs = observe(cfg, world, &s, Action::ZERO, None)?;
        let a = policy(&obs)?;
        let next = step_substeps(cfg, &s, a, e, substeps)?;
        let moved = (next.x - s.x)
            .abs()
            .max((next.y - s.y).abs())
            .max((next.theta - s.theta).abs())
            .max((next.v - s.v).abs())
            .max((next.omega - s.omega).abs());
        if moved < SETTLE_TOL {
            settled = true;
            break;
        }
        margins.push(world.margins(next.position())?);
        states.push(next);
        absorbed = margins.last().expect("just pushed").l <= 0.0;
    }

    Ok(Rollout { states, margins, absorbed, settled })
}

// ---------------------------------------------------------------------------
// Set membership
// ---------------------------------------------------------------------------

/// Membership of one start state in the three sets of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateClass {
    /// No failure at any step: the start lies in the safe set.
    pub safe: bool,
    /// The target margin reaches `l <= 0` at some step: the start lies in
    /// the backward-reachable set, collisions notwithstanding.
    pub reaches: bool,
    /// Reaches with no failure at or before the arrival step: the start
    /// lies in the reach-avoid set.
    pub reach_avoid: bool,
}

/// Reads memberships off a rollout. The scan absorbs at the first `l <= 0`
/// entry and ignores anything a hand-built rollout might store after it;
/// failure at the arrival state itself counts against `reach_avoid` (a
/// target only reached by standing in a failure region is no escape).
pub fn classify_rollout(roll: &Rollout) -> StateClass {
    let mut failed = false;
    let mut reaches = false;
    let mut reach_avoid = false;
    for m in &roll.margins {
        if m.zeta > 0.0 {
            failed = true;
        }
        if m.l <= 0.0 {
            reaches = true;
            reach_avoid = !failed;
            break;
        }
    }
    StateClass { safe: !failed, reaches, reach_avoid }
}

/// Rolls the closed loop from `s0` and classifies the start state.
pub fn classify_state<P>(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: &P,
    s0: State,
    e: &EnvParams,
    horizon: usize,
) -> Result<StateClass>
where
    P: Fn(&Observation) -> Result<Action> + ?Sized,
{
    Ok(classify_rollout(&roll_closed_loop(world, cfg, policy, s0, e, horizon, 1)?))
}

/// Exhaustive memberships over a state grid for one parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetMembership {
    /// Horizon the rollouts were truncated at.
    pub horizon: usize,
    /// Safe-set flags, one per grid cell in cell order.
    pub safe: Vec<bool>,
    /// Backward-reachable flags.
    pub reach: Vec<bool>,
    /// Reach-avoid flags.
    pub reach_avoid: Vec<bool>,
}

impl SetMembership {
    /// Cell counts `(|safe|, |reach|, |reach_avoid|)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |v: &[bool]| v.iter().filter(|b| **b).count();
        (n(&self.safe), n(&self.reach), n(&self.reach_avoid))
    }

    /// Verifies the definitional set algebra: reach-avoid membership implies
    /// both safety and reachability, cell by cell.
    pub fn check_algebra(&self) -> Result<()> {
        for c in 0..self.reach_avoid.len() {
            if self.reach_avoid[c] && !(self.safe[c] && self.reach[c]) {
                return Err(crate::contract_err!(
                    "cell {c}: reach-avoid member outside safe ∩ reach — classification is inconsistent"
                ));
            }
        }
        Ok(())
    }
}

/// Classifies every grid cell under every parameter set in `e_list`, in
/// parallel over cells. Refuses outright when `cells x |e_list|` exceeds
/// [`SWEEP_BUDGET`]; chunk the parameter list to stay under it.
pub fn sweep_sets<P>(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: &P,
    grid: &StateGrid,
    e_list: &[EnvParams],
    horizon: usize,
) -> Result<Vec<SetMembership>>
where
    P: Fn(&Observation) -> Result<Action> + Sync + ?Sized,
{
    grid.validate()?;
    let cells = grid.num_cells();
    let total = cells
        .checked_mul(e_list.len())
        .ok_or_else(|| crate::contract_err!("sweep size overflows"))?;
    if total > SWEEP_BUDGET {
        return Err(crate::contract_err!(
            "exhaustive sweep of {cells} cells x {} parameter sets = {total} rollouts \
             exceeds the budget of {SWEEP_BUDGET}; coarsen the grid or chunk the parameter list",
            e_list.len()
        ));
    }

    let mut out = Vec::with_capacity(e_list.len());
    for e in e_list {
        let classes: Vec<StateClass> = (0..cells)
            .into_par_iter()
            .map(|c| classify_state(world, cfg, policy, grid.cell_state(c), e, horizon))
            .collect::<Result<_>>()?;
        let membership = SetMembership {
            horizon,
            safe: classes.iter().map(|k| k.safe).collect(),
            reach: classes.iter().map(|k| k.reaches).collect(),
            reach_avoid: classes.iter().map(|k| k.reach_avoid).collect(),
        };
        membership.check_algebra()?;
        out.push(membership);
    }
    Ok(out)
}

/// Marks every cell with a grid-neighbor whose flag differs: the one-cell
/// band around a set's boundary. Finite-horizon truncation, interpolation,
/// and integration refinement all move decisions only within this band, so
/// exact-agreement checks exempt it.
pub fn boundary_band(grid: &StateGrid, member: &[bool]) -> Result<Vec<bool>> {
    let cells = grid.num_cells();
    if member.len() != cells {
        return Err(crate::contract_err!(
            "membership has {} flags for a {cells}-cell grid",
            member.len()
        ));
    }
    let dims = grid.dims();
    let circular = [false, false, grid.theta.circular, false, false];
    let mut band = vec![false; cells];
    for c in 0..cells {
        let idx = grid.cell_indices(c);
        'axes: for k in 0..5 {
            if dims[k] < 2 {
                continue;
            }
            for dir in [-1isize, 1] {
                let raw = idx[k] as isize + dir;
                let ni = if circular[k] {
                    raw.rem_euclid(dims[k] as isize) as usize
                } else if raw < 0 || raw >= dims[k] as isize {
                    continue;
                } else {
                    raw as usize
                };
                let mut nidx = idx;
                nidx[k] = ni;
                if member[grid.cell_of(nidx)] != member[c] {
                    band[c] = true;
                    break 'axes;
                }
            }
        }
    }
    Ok(band)
}

// ---------------------------------------------------------------------------
// Exact values along a trajectory
// ---------------------------------------------------------------------------

/// Exact values of one closed-loop trajectory under three payoff readings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactValue {
    /// `min_t max{ l̄_t, max_{κ<=t} ζ̄_κ }`: the undiscounted worst-case
    /// payoff. Non-positive exactly when the trajectory reaches the target
    /// without failing first.
    pub undiscounted: f64,
    /// Same enumeration with `γ^t` on the target margin and `γ^κ` on the
    /// failure margins. Collapses to `undiscounted` at `γ = 1`.
    pub discounted: f64,
    /// Value of the same path under the blended one-step backup the tabular
    /// solver iterates ([`drabe_backup`]), composed backward from a frozen
    /// tail. Matches the solver's fixed point on absorbed or settled paths;
    /// sits `O(1-γ)` away from `discounted` and meets it as `γ -> 1`.
    pub blended: f64,
}

/// Enumerates the three payoffs of a rollout over `0..=horizon`, normalizing
/// margins by `margin_scale`. The stored prefix is extended by freezing its
/// final entry, which is exact for absorbed and settled rollouts and a
/// documented truncation otherwise.
pub fn rollout_values(roll: &Rollout, horizon: usize, gamma: f64, margin_scale: f64) -> Result<ExactValue> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
    }
    if !(margin_scale > 0.0) || !margin_scale.is_finite() {
        return Err(Error::Config(format!("margin scale {margin_scale} must be positive and finite")));
    }
    if roll.margins.is_empty() {
        return Err(crate::contract_err!("empty rollout has no value"));
    }

    // Scan stops at the first on-target entry (absorption) even for
    // hand-built rollouts, and never runs past the horizon.
    let mut last = (roll.margins.len() - 1).min(horizon);
    if let Some(hit) = roll.margins.iter().take(last + 1).position(|m| m.l <= 0.0) {
        last = hit;
    }
    let lbar = |t: usize| normalize_margin(roll.margins_at(t).l, margin_scale);
    let zbar = |t: usize| normalize_margin(roll.margins_at(t).zeta, margin_scale);

    // Undiscounted: frozen-tail terms repeat the last one, so the stored
    // prefix is the whole enumeration.
    let mut run_z = f64::NEG_INFINITY;
    let mut undiscounted = f64::INFINITY;
    for t in 0..=last {
        run_z = run_z.max(zbar(t));
        undiscounted = undiscounted.min(lbar(t).max(run_z));
    }

    // Discounted: within the frozen tail the failure terms only shrink, and
    // the target term `γ^t l̄` moves monotonically toward zero — upward when
    // the path absorbed (`l̄ <= 0`), downward otherwise. Only the downward
    // case can lower the minimum, and its best tail term is at the horizon.
    let mut run_zg = f64::NEG_INFINITY;
    let mut discounted = f64::INFINITY;
    let mut g = 1.0;
    for t in 0..=last {
        run_zg = run_zg.max(g * zbar(t));
        discounted = discounted.min((g * lbar(t)).max(run_zg));
        g *= gamma;
    }
    if lbar(last) > 0.0 && horizon > last {
        let g_h = gamma.powi((horizon - last) as i32) * g / gamma;
        discounted = discounted.min((g_h * lbar(last)).max(run_zg));
    }

    // Blended: backward induction from the stationary fixed point of the
    // frozen tail, max{l̄, ζ̄}.
    let mut blended = lbar(last).max(zbar(last));
    for t in (0..last).rev() {
        blended = drabe_backup(blended, lbar(t), zbar(t), gamma);
    }

    Ok(ExactValue { undiscounted, discounted, blended })
}

/// Rolls the closed loop from `s0` and enumerates its exact values.
#[allow(clippy::too_many_arguments)]
pub fn exact_value<P>(
    world: &WorldSpec,
    cfg: &DynamicsConfig,
    policy: &P,
    s0: State,
    e: &EnvParams,
    horizon: usize,
    gamma: f64,
    margin_scale: f64,
) -> Result<ExactValue>
where
    P: Fn(&Observation) -> Result<Action> + ?Sized,
{
    let roll = roll_closed_loop(world, cfg, policy, s0, e, horizon, 1)?;
    rollout_values(&roll, horizon, gamma, margin_scale)
}

// ---------------------------------------------------------------------------
// Verification benchmarks
// ---------------------------------------------------------------------------

/// The hand-written loop a benchmark closes over. Both variants are
/// memoryless maps from observation to command, so the oracle's membership
/// semantics apply, and both are acceleration-limited, so the hidden payload
/// and friction actually matter to the outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoopController {
    /// Cruise east, stop on range: outcome decided by stopping distance.
    Brake(BrakeController),
    /// Seek the goal, dodge on range: outcome decided by turning clearance.
    Swerve(SwerveController),
}

impl LoopController {
    pub fn act(&self, cfg: &DynamicsConfig, obs: &Observation) -> Result<Action> {
        match self {
            LoopController::Brake(c) => c.act(obs),
            LoopController::Swerve(c) => c.act(cfg, obs),
        }
    }
}

/// A fixed deterministic world + controller + grid on which the tabular
/// solver and the exhaustive oracle can be compared cell by cell.
#[derive(Debug, Clone)]
pub struct Benchmark {
    /// Short name used in reports and file names.
    pub label: &'static str,
    pub world: WorldSpec,
    pub dynamics: DynamicsConfig,
    pub controller: LoopController,
    pub grid: StateGrid,
    /// Conditioning nodes of the tabular value.
    pub bins: EBins,
    /// Discount the table is solved at (cross-checks may re-solve at others).
    pub gamma: f64,
    /// Margin normalization, in meters of clearance per unit of value.
    pub margin_scale: f64,
}

impl Benchmark {
    /// Episode horizon in control periods.
    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }

    /// The controller as a policy closure.
    pub fn policy(&self) -> impl Fn(&Observation) -> Result<Action> + Sync + '_ {
        let c = self.controller;
        move |obs: &Observation| c.act(&self.dynamics, obs)
    }

    /// Builds the tabular backup problem for this benchmark.
    pub fn problem(&self) -> Result<BackupProblem> {
        BackupProblem::from_closed_loop(
            &self.world,
            &self.dynamics,
            &|obs| self.controller.act(&self.dynamics, obs),
            self.grid.clone(),
            self.bins.clone(),
            self.gamma,
            self.margin_scale,
        )
    }

    /// True parameters at a conditioning node, `bin` in payload-major order.
    pub fn bin_env(&self, bin: usize) -> EnvParams {
        self.bins.env(bin)
    }
}

/// Sign-agreement benchmark: a corridor with a mid-lane obstacle.
///
/// The goal disc sits near the east wall; the braking controller cruises
/// east and stops for whatever its forward ray hits. Rows blocked by the
/// obstacle stall in front of it (or plow into it when braking cannot shed
/// the speed in time), clear rows reach the goal, and rows skirting the wall
/// gamble their stopping distance against the remaining run-out — so the
/// grid holds reaching, stalling, and failing cells in every parameter bin,
/// with the boundaries between them moving as payload and friction change.
/// Solved at a discount near one, where a value's sign decides reach-avoid
/// membership; the oracle checks that sign cell by cell.
pub fn corridor_benchmark() -> Benchmark {
    Benchmark {
        label: "corridor",
        world: WorldSpec {
            arena: Rect { x_min: 0.0, x_max: 6.0, y_min: -1.0, y_max: 1.0 },
            goal_center: [5.4, 0.0],
            goal_radius: 0.5,
            obstacles: vec![Disc { center: [3.0, 0.25], radius: 0.4 }],
        },
        dynamics: DynamicsConfig::default(),
        controller: LoopController::Brake(BrakeController::default()),
        grid: StateGrid {
            x: GridAxis::linear(0.05, 5.95, 50),
            y: GridAxis::linear(-0.95, 0.95, 25),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.5, 8),
            omega: GridAxis::pinned(0.0),
        },
        bins: EBins {
            payload: GridAxis::linear(0.0, 12.0, 4),
            friction: GridAxis::linear(0.5, 1.5, 3),
        },
        gamma: 0.999,
        margin_scale: 6.0,
    }
}

/// Payload-sensitivity benchmark: a goal run past a mid-plaza obstacle,
/// closed under the rolling-dodge loop. This is the fixture behind the
/// obstacle-sweep rasters.
///
/// Geometry matters here, so it is worth being explicit about why the
/// obvious simpler layouts cannot work. Any loop that only drives *away*
/// from the goal scores every start at its initial target margin — the
/// pathwise value takes its minimum at time zero — so the whole table goes
/// blind to physics and obstacles alike. And any loop that brakes on a
/// straight line toward the goal orders *backwards*: a heavier robot's
/// trajectory is the lighter one's extended along the same line, so its
/// value is the lighter value min-ed with the extra tail. Payload can only
/// surface with the correct sign through a path that *bends* as a function
/// of mass.
///
/// The rolling dodge is the simplest such loop. The controller seeks a
/// goal placed beyond a lone obstacle and, when its forward ray trips,
/// keeps rolling while it turns away. Payload sets how fast the entry
/// speed sheds during the turn: a light robot slows into a tight arc and
/// clears the disc, a heavy one carries momentum through a wide arc and
/// grazes it — and the running worst-clearance term retains the graze even
/// when the robot recovers and reaches afterwards. The converged value at
/// an eastbound probe therefore rises with payload across the forward
/// band, which is what the raster checks assert.
///
/// Friction is pinned above nominal so the motor's caps, not tire grip,
/// are the binding limit for every payload node; at nominal grip the two
/// lightest nodes shed speed identically and their ordering degenerates to
/// a tie. The margin normalization is kept tight (2 m per unit) so
/// centimeter-scale clearance differences at the disc survive the rasters'
/// eight-bit export. The world is mirror symmetric about the run axis, but
/// the dodge breaks ties toward the left, so the solved table is only
/// approximately so; the exact-symmetry check lives on the braking
/// corridor instead.
pub fn plaza_benchmark() -> Benchmark {
    Benchmark {
        label: "plaza",
        world: WorldSpec {
            arena: Rect { x_min: 0.0, x_max: 10.0, y_min: -2.0, y_max: 2.0 },
            goal_center: [8.5, 0.0],
            goal_radius: 0.5,
            obstacles: vec![Disc { center: [5.5, 0.0], radius: 0.6 }],
        },
        dynamics: DynamicsConfig::default(),
        controller: LoopController::Swerve(SwerveController::default()),
        grid: StateGrid {
            x: GridAxis::linear(0.05, 9.95, 40),
            y: GridAxis::linear(-1.95, 1.95, 15),
            theta: GridAxis::circular(-std::f64::consts::PI, std::f64::consts::PI, 12),
            v: GridAxis::linear(0.0, 3.5, 8),
            omega: GridAxis::linear(-3.0, 3.0, 5),
        },
        bins: EBins {
            payload: GridAxis::linear(0.0, 12.0, 4),
            friction: GridAxis::pinned(1.25),
        },
        gamma: 0.999,
        margin_scale: 2.0,
    }
}

/// The plaza with its obstacle removed. Cells whose plaza trajectory never
/// comes near the obstacle must take matching values here — the
/// irrelevant-obstacle control for the raster checks.
pub fn plaza_open_benchmark() -> Benchmark {
    let mut b = plaza_benchmark();
    b.label = "plaza-open";
    b.world.obstacles.clear();
    b
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::policies::GotoController;
    use crate::ravalue::table::tests::{chain_grid, one_bin};
    use approx::assert_abs_diff_eq;

    fn nominal_with_payload(kg: f64) -> EnvParams {
        EnvParams { payload_mass: kg, ..EnvParams::nominal() }
    }

    /// Goto loop as a policy closure over a fixed config.
    fn goto_policy(cfg: &DynamicsConfig) -> impl Fn(&Observation) -> Result<Action> + Sync + '_ {
        let goto = GotoController::default();
        move |obs: &Observation| Ok(goto.act(cfg, obs.goal_relative))
    }

    /// Hand-built two-step rollout: a positive-margin start that the next
    /// step lands on the target.
    fn two_state_rollout() -> Rollout {
        Rollout {
            states: vec![State::new(0.0, 0.0, 0.0, 0.0, 0.0), State::new(1.0, 0.0, 0.0, 0.0, 0.0)],
            margins: vec![Margins { l: 0.5, zeta: -0.2 }, Margins { l: -0.3, zeta: -0.8 }],
            absorbed: true,
            settled: false,
        }
    }

    #[test]
    fn two_state_path_hits_the_closed_forms() {
        let roll = two_state_rollout();
        let gamma = 0.99;
        let v = rollout_values(&roll, 160, gamma, 1.0).unwrap();
        // Undiscounted: min{ max(0.5, -0.2), max(-0.3, -0.2) } = -0.2.
        assert_abs_diff_eq!(v.undiscounted, -0.2, epsilon = 1e-12);
        // Discounted: at step 1 the target term γ·(-0.3) is still below the
        // running failure ceiling -0.2, so the minimum is -0.2 again.
        assert_abs_diff_eq!(v.discounted, -0.2, epsilon = 1e-12);
        // Blended: V = (1-γ)·0.5 + γ·max{min(-0.3, 0.5), -0.2} = 0.5 - 0.7γ.
        // The O(1-γ) gap to the discounted enumeration is the blend's
        // running-payoff term; the two meet as γ -> 1.
        assert_abs_diff_eq!(v.blended, 0.5 - 0.7 * gamma, epsilon = 1e-12);
        assert!(v.blended > v.discounted);
    }

    #[test]
    fn stationary_state_keeps_its_own_payoff() {
        let roll = Rollout {
            states: vec![State::new(0.0, 0.0, 0.0, 0.0, 0.0)],
            margins: vec![Margins { l: 0.5, zeta: -0.2 }],
            absorbed: false,
            settled: true,
        };
        let v = rollout_values(&roll, 160, 0.99, 1.0).unwrap();
        // The min-max collapses on a constant trajectory.
        assert_abs_diff_eq!(v.undiscounted, 0.5, epsilon = 1e-12);
        // Discounting drains a never-reaching target term toward zero; the
        // best tail term sits at the horizon.
        assert_abs_diff_eq!(v.discounted, 0.5 * 0.99f64.powi(160), epsilon = 1e-12);
        // The blend pins stationary states at max{l, ζ}.
        assert_abs_diff_eq!(v.blended, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn unit_discount_collapses_the_enumerations() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        // A reaching row, a stalling row, a crashing row, and slow starts.
        let probes = [
            State::new(0.5, -0.35, 0.0, 3.0, 0.0),
            State::new(0.5, 0.25, 0.0, 3.0, 0.0),
            State::new(1.75, 0.25, 0.0, 3.0, 0.0),
            State::new(0.2, 0.85, 0.0, 0.0, 0.0),
            State::new(5.0, -0.75, 0.0, 3.5, 0.0),
        ];
        for s0 in probes {
            let roll = roll_closed_loop(&bench.world, &bench.dynamics, &policy, s0, &nominal_with_payload(6.0), 160, 1).unwrap();
            let v = rollout_values(&roll, 160, 1.0, bench.margin_scale).unwrap();
            assert_eq!(v.undiscounted, v.discounted, "γ = 1 must degenerate at {s0:?}");
            assert_eq!(v.undiscounted, v.blended, "the blend loses its running term at γ = 1 ({s0:?})");
        }
    }

    #[test]
    fn chain_path_value_matches_the_tabular_fixed_point() {
        // Five states marching into the goal; the value solver sees them as
        // a grid problem, the oracle as five suffixes of one trajectory.
        let margins = [[0.8, -0.5], [0.55, -0.4], [0.3, -0.6], [0.05, -0.3], [-0.35, -0.7]];
        let gamma = 0.99;
        let stencils = vec![(0..5usize)
            .map(|c| vec![(((c + 1).min(4)) as u32, 1.0)])
            .collect::<Vec<_>>()];
        let problem = BackupProblem::from_parts(
            chain_grid(5),
            one_bin(),
            gamma,
            1.0,
            margins.iter().map(|m| [m[0], m[1]]).collect(),
            &stencils,
        )
        .unwrap();
        let (table, _) = problem.solve(1e-9, 20_000).unwrap();

        for start in 0..5 {
            let tail: Vec<Margins> = margins[start..]
                .iter()
                .map(|m| Margins { l: m[0], zeta: m[1] })
                .collect();
            let roll = Rollout {
                states: (0..tail.len()).map(|k| State::new(k as f64, 0.0, 0.0, 0.0, 0.0)).collect(),
                margins: tail,
                absorbed: true,
                settled: false,
            };
            let v = rollout_values(&roll, 160, gamma, 1.0).unwrap();
            let fixed = table.bin_slice(0)[start];
            assert_abs_diff_eq!(v.blended, fixed, epsilon = 1e-6);
            // The path-enumerated discounted value is a different reading:
            // off the target the blend pays the positive interior margins out
            // at rate 1-γ and sits strictly above it; on the target the two
            // collapse to the same margin.
            if start < 4 {
                assert!(v.discounted < v.blended);
            } else {
                assert_abs_diff_eq!(v.discounted, v.blended, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn goal_and_obstacle_starts_classify_trivially() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let e = EnvParams::nominal();
        let on_goal = classify_state(&bench.world, &bench.dynamics, &policy, State::new(5.4, 0.0, 0.0, 0.0, 0.0), &e, 160).unwrap();
        assert_eq!(on_goal, StateClass { safe: true, reaches: true, reach_avoid: true });
        let in_obstacle = classify_state(&bench.world, &bench.dynamics, &policy, State::new(3.0, 0.25, 0.0, 0.0, 0.0), &e, 160).unwrap();
        assert!(!in_obstacle.safe);
        assert!(!in_obstacle.reach_avoid);
    }

    #[test]
    fn empty_world_keeps_every_cell_safe_and_reach_equals_reach_avoid() {
        let world = WorldSpec {
            arena: Rect { x_min: 0.0, x_max: 20.0, y_min: -10.0, y_max: 10.0 },
            goal_center: [10.0, 0.0],
            goal_radius: 0.6,
            obstacles: vec![],
        };
        let cfg = DynamicsConfig::default();
        let grid = StateGrid {
            x: GridAxis::linear(8.0, 12.0, 6),
            y: GridAxis::linear(-2.0, 2.0, 5),
            theta: GridAxis::circular(-std::f64::consts::PI, std::f64::consts::PI, 4),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let sets = sweep_sets(&world, &cfg, &goto_policy(&cfg), &grid, &[EnvParams::nominal()], 160).unwrap();
        let m = &sets[0];
        assert!(m.safe.iter().all(|b| *b), "nothing to hit far from the walls");
        assert_eq!(m.reach, m.reach_avoid, "with no failures, avoiding is free");
    }

    #[test]
    fn a_wall_of_obstacles_empties_the_reach_avoid_set() {
        let world = WorldSpec {
            arena: Rect { x_min: 0.0, x_max: 6.0, y_min: -1.2, y_max: 1.2 },
            goal_center: [5.4, 0.0],
            goal_radius: 0.4,
            obstacles: vec![
                Disc { center: [3.0, -0.9], radius: 0.45 },
                Disc { center: [3.0, -0.3], radius: 0.45 },
                Disc { center: [3.0, 0.3], radius: 0.45 },
                Disc { center: [3.0, 0.9], radius: 0.45 },
            ],
        };
        let cfg = DynamicsConfig::default();
        let grid = StateGrid {
            x: GridAxis::linear(0.3, 2.2, 5),
            y: GridAxis::linear(-0.9, 0.9, 5),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let sets = sweep_sets(&world, &cfg, &goto_policy(&cfg), &grid, &[EnvParams::nominal()], 160).unwrap();
        let (safe, reach, ra) = sets[0].counts();
        assert_eq!(ra, 0, "no start west of the wall can reach and avoid");
        assert_eq!(safe, 0, "the goal-seeking loop plows into the wall from everywhere");
        // The dynamics are pass-through: a collision is flagged by the
        // margins, not enforced by the body, so the raw reach set stays full
        // — which is exactly why reach-avoid, not reach, is the safety set.
        assert_eq!(reach, grid.num_cells());
    }

    #[test]
    fn heavier_payload_never_enlarges_the_sets() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let grid = StateGrid {
            x: GridAxis::linear(0.25, 5.75, 23),
            y: GridAxis::linear(-0.9, 0.9, 13),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 4),
            omega: GridAxis::pinned(0.0),
        };
        let sets = sweep_sets(
            &bench.world,
            &bench.dynamics,
            &policy,
            &grid,
            &[nominal_with_payload(0.0), nominal_with_payload(10.0)],
            160,
        )
        .unwrap();
        let (safe0, _, ra0) = sets[0].counts();
        let (safe10, _, ra10) = sets[1].counts();
        assert!(ra10 <= ra0, "payload cannot create reach-avoid members ({ra10} vs {ra0})");
        assert!(
            safe10 < safe0,
            "the longer stop must cost some braking-gamble cells ({safe10} vs {safe0})"
        );
    }

    #[test]
    fn oversized_sweeps_are_refused_with_sizes() {
        let grid = StateGrid {
            x: GridAxis::linear(0.0, 1.0, 101),
            y: GridAxis::linear(0.0, 1.0, 100),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 1.0, 10),
            omega: GridAxis::pinned(0.0),
        };
        let bench = corridor_benchmark();
        let err = sweep_sets(&bench.world, &bench.dynamics, &bench.policy(), &grid, &[EnvParams::nominal()], 160).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("101000") && msg.contains("exceeds"), "refusal must report sizes: {msg}");
    }

    #[test]
    fn membership_survives_integration_refinement_off_the_boundary() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let grid = StateGrid {
            x: GridAxis::linear(0.4, 5.6, 13),
            y: GridAxis::linear(-0.8, 0.8, 7),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let e = nominal_with_payload(8.0);
        // Refining the integration shifts a braking trajectory by at most a
        // few centimeters, so a classification may only flip where the
        // coarse trajectory ran within that shift of the deciding surface —
        // grid adjacency is the wrong exemption here, because one marginal
        // braking outcome flips an entire approach corridor at once.
        const SHIFT_TOL: f64 = 0.2;
        for c in 0..grid.num_cells() {
            let s0 = grid.cell_state(c);
            let r1 = roll_closed_loop(&bench.world, &bench.dynamics, &policy, s0, &e, 160, 1).unwrap();
            let r4 = roll_closed_loop(&bench.world, &bench.dynamics, &policy, s0, &e, 160, 4).unwrap();
            let coarse = classify_rollout(&r1);
            let fine = classify_rollout(&r4);
            let closest_fail = r1.margins.iter().fold(f64::NEG_INFINITY, |a, m| a.max(m.zeta));
            let closest_reach = r1.margins.iter().fold(f64::INFINITY, |a, m| a.min(m.l));
            if fine.safe != coarse.safe {
                assert!(
                    closest_fail.abs() <= SHIFT_TOL,
                    "cell {c}: safety flipped with {closest_fail:.3} m of failure clearance"
                );
            }
            if fine.reaches != coarse.reaches {
                assert!(
                    closest_reach.abs() <= SHIFT_TOL,
                    "cell {c}: reaching flipped with {closest_reach:.3} m of target clearance"
                );
            }
            if fine.reach_avoid != coarse.reach_avoid {
                assert!(
                    closest_fail.abs() <= SHIFT_TOL || closest_reach.abs() <= SHIFT_TOL,
                    "cell {c}: membership flipped with {closest_fail:.3} / {closest_reach:.3} m of clearance"
                );
            }
        }
    }

    #[test]
    fn adding_an_obstacle_only_shrinks_the_sets() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let mut crowded = bench.world.clone();
        crowded.obstacles.push(Disc { center: [1.5, -0.5], radius: 0.3 });
        let grid = StateGrid {
            x: GridAxis::linear(0.4, 5.6, 13),
            y: GridAxis::linear(-0.8, 0.8, 7),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let e = [EnvParams::nominal()];
        let base = &sweep_sets(&bench.world, &bench.dynamics, &policy, &grid, &e, 160).unwrap()[0];
        let less = &sweep_sets(&crowded, &bench.dynamics, &policy, &grid, &e, 160).unwrap()[0];
        for c in 0..grid.num_cells() {
            assert!(!less.safe[c] || base.safe[c], "cell {c}: new obstacle grew the safe set");
            assert!(!less.reach[c] || base.reach[c], "cell {c}: new obstacle grew the reach set");
            assert!(!less.reach_avoid[c] || base.reach_avoid[c], "cell {c}: new obstacle grew the reach-avoid set");
        }
    }

    #[test]
    fn undiscounted_sign_decides_membership() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let grid = StateGrid {
            x: GridAxis::linear(0.4, 5.6, 13),
            y: GridAxis::linear(-0.8, 0.8, 7),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let e = nominal_with_payload(4.0);
        for c in 0..grid.num_cells() {
            let s0 = grid.cell_state(c);
            let roll = roll_closed_loop(&bench.world, &bench.dynamics, &policy, s0, &e, 160, 1).unwrap();
            let class = classify_rollout(&roll);
            let v = rollout_values(&roll, 160, 0.97, bench.margin_scale).unwrap();
            assert_eq!(
                v.undiscounted <= 0.0,
                class.reach_avoid,
                "cell {c}: undiscounted value {} disagrees with membership",
                v.undiscounted
            );
        }
    }

    #[test]
    fn sweeps_are_deterministic() {
        let bench = corridor_benchmark();
        let policy = bench.policy();
        let grid = StateGrid {
            x: GridAxis::linear(0.5, 5.5, 7),
            y: GridAxis::linear(-0.8, 0.8, 5),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::linear(0.0, 3.0, 3),
            omega: GridAxis::pinned(0.0),
        };
        let e = [nominal_with_payload(0.0), nominal_with_payload(12.0)];
        let a = sweep_sets(&bench.world, &bench.dynamics, &policy, &grid, &e, 160).unwrap();
        let b = sweep_sets(&bench.world, &bench.dynamics, &policy, &grid, &e, 160).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_band_marks_flag_changes_only() {
        let line = StateGrid {
            x: GridAxis::linear(0.0, 4.0, 5),
            y: GridAxis::pinned(0.0),
            theta: GridAxis::pinned(0.0),
            v: GridAxis::pinned(0.0),
            omega: GridAxis::pinned(0.0),
        };
        let band = boundary_band(&line, &[false, false, true, true, true]).unwrap();
        assert_eq!(band, vec![false, true, true, false, false]);

        let ring = StateGrid {
            x: GridAxis::pinned(0.0),
            y: GridAxis::pinned(0.0),
            theta: GridAxis::circular(-std::f64::consts::PI, std::f64::consts::PI, 4),
            v: GridAxis::pinned(0.0),
            omega: GridAxis::pinned(0.0),
        };
        let band = boundary_band(&ring, &[true, false, false, false]).unwrap();
        assert_eq!(band, vec![true, true, false, true], "the heading seam wraps");
    }

    #[test]
    fn plaza_graze_depth_orders_strictly_by_payload() {
        let bench = plaza_benchmark();
        let policy = bench.policy();
        let mu = bench.bins.friction.lo;
        let masses = [0.0, 4.0, 8.0, 12.0];

        // Eastbound at cruise speed inside the dodge trigger: every payload
        // node swerves (the heading moves, it does not just brake), every
        // node clips the disc, and the clip goes strictly deeper — and the
        // blended value strictly higher — with every added kilogram. This is
        // the pixel-level monotonicity the raster checks ride on.
        for start in [State::new(4.5, 0.0, 0.0, 3.0, 0.0), State::new(4.25, 0.0, 0.0, 3.0, 0.0)] {
            let mut prev_zeta = f64::NEG_INFINITY;
            let mut prev_v = f64::NEG_INFINITY;
            for kg in masses {
                let e = EnvParams { payload_mass: kg, friction: mu, ..EnvParams::nominal() };
                let roll =
                    roll_closed_loop(&bench.world, &bench.dynamics, &policy, start, &e, 600, 1).unwrap();
                let turned = roll.states.iter().map(|s| s.theta.abs()).fold(0.0, f64::max);
                assert!(turned > 0.5, "{kg} kg: the dodge turns the heading, it does not stop");
                assert!(!classify_rollout(&roll).safe, "{kg} kg: the arc cannot clear 0.4 m of room");
                let worst = roll.margins.iter().map(|m| m.zeta).fold(f64::NEG_INFINITY, f64::max);
                assert!(worst > prev_zeta + 1e-4, "{kg} kg: clip {worst:.4} not past {prev_zeta:.4}");
                let v = rollout_values(&roll, 600, bench.gamma, bench.margin_scale).unwrap();
                assert!(v.blended > prev_v + 1e-4, "{kg} kg: value {:.4} not above {prev_v:.4}", v.blended);
                prev_zeta = worst;
                prev_v = v.blended;
            }
        }

        // Past the disc the dodge never triggers: a clean goal run for every
        // payload, worth no more than a small arrival toll — the ground truth
        // behind the rasters' behind-the-robot control pixels.
        for kg in masses {
            let e = EnvParams { payload_mass: kg, friction: mu, ..EnvParams::nominal() };
            let roll = roll_closed_loop(
                &bench.world,
                &bench.dynamics,
                &policy,
                State::new(7.0, 0.0, 0.0, 3.0, 0.0),
                &e,
                600,
                1,
            )
            .unwrap();
            let class = classify_rollout(&roll);
            assert!(class.safe && class.reaches, "{kg} kg: nothing blocks the last 1.5 m");
            let v = rollout_values(&roll, 600, bench.gamma, bench.margin_scale).unwrap();
            assert!(v.blended < 0.05, "{kg} kg: a clean run costs only the toll, got {:.4}", v.blended);
        }
    }

    #[test]
    fn benchmarks_validate_and_assemble() {
        for bench in [corridor_benchmark(), plaza_benchmark(), plaza_open_benchmark()] {
            bench.world.validate().unwrap();
            bench.grid.validate().unwrap();
            bench.bins.validate().unwrap();
            let problem = bench.problem().unwrap();
            let old = problem.initial_values();
            let mut new = vec![0.0; old.len()];
            let residual = problem.backup_into(&old, &mut new).unwrap();
            assert!(residual.is_finite(), "{}: first sweep diverged", bench.label);
        }
        // Only the corridor is oracled exhaustively, cell by cell per bin;
        // the plaza's five-axis grid is spot-checked instead, so the sweep
        // budget binds the corridor alone.
        let corridor = corridor_benchmark();
        assert!(corridor.grid.num_cells() <= SWEEP_BUDGET, "corridor grid too large to oracle per bin");
    }
}
