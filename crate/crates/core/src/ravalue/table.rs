//! Exact value iteration on a state grid crossed with physics bins.
//!
//! The table is the verification instrument: on a benchmark world with a
//! fixed deterministic controller it computes the reach-avoid value to
//! quadrature accuracy, which the exhaustive-rollout oracles can then audit
//! sign by sign. The same machinery doubles as a generic backup operator for
//! contraction and monotonicity property tests — a [`BackupProblem`] is just
//! margins plus interpolation stencils, however they were produced.
//!
//! Grid semantics: each of the five state coordinates gets a [`GridAxis`].
//! An axis with a single node pins that coordinate (the benchmark promises
//! it stays constant), and the heading axis may be circular. Successors come
//! from one dynamics step per cell per physics bin, taken once up front —
//! the closed loop is stationary, so the interpolation stencil at the
//! successor can be precomputed and every sweep reduces to sparse dot
//! products. Sweeps are Jacobi style (read the previous table, write a fresh
//! one), which is what makes the per-sweep contraction bound exact.
//!
//! Two conventions keep the table, the rollout oracles, and the deployed
//! runtime telling the same story:
//!
//! * The goal absorbs: a cell already inside the target maps to itself.
//!   Everywhere else the trajectory keeps evolving — a failure cell needs no
//!   special casing because `max{., zeta}` already floors its value at
//!   `zeta > 0`.
//! * The policy is evaluated on the noiseless observation with a zero
//!   previous command. Verification controllers must be memoryless in the
//!   command-history channels, so this is exact for them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{drabe_backup, normalize_margin, VALUE_BOUND};
use crate::dynamics::{observe, step, Action, DynamicsConfig, EnvParams, Observation, State};
use crate::error::{ensure_finite, Error, Result};
use crate::estimator::EstimateVector;
use crate::world::WorldSpec;

/// Tolerance under which a queried coordinate counts as "on" a pinned axis.
const PIN_TOL: f64 = 1e-9;

/// One rectilinear grid axis: `n` nodes spanning `[lo, hi]`.
///
/// `n == 1` pins the coordinate at `lo`. A circular axis covers `[lo, hi)`
/// with period `hi - lo` and no node at `hi`; interpolation wraps across the
/// seam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub circular: bool,
}

impl GridAxis {
    pub fn linear(lo: f64, hi: f64, n: usize) -> GridAxis {
        GridAxis { lo, hi, n, circular: false }
    }

    /// Single-node axis for a coordinate the benchmark holds constant.
    pub fn pinned(at: f64) -> GridAxis {
        GridAxis { lo: at, hi: at, n: 1, circular: false }
    }

    /// Periodic axis over `[lo, hi)` with `n` evenly spaced nodes.
    pub fn circular(lo: f64, hi: f64, n: usize) -> GridAxis {
        GridAxis { lo, hi, n, circular: true }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        ensure_finite(name, &[self.lo, self.hi])?;
        if self.n == 0 {
            return Err(Error::Config(format!("axis {name} needs at least one node")));
        }
        if self.n == 1 && self.lo != self.hi {
            return Err(Error::Config(format!(
                "single-node axis {name} must have lo == hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.n > 1 && self.lo >= self.hi {
            return Err(Error::Config(format!(
                "axis {name} span is empty: [{}, {}] with {} nodes",
                self.lo, self.hi, self.n
            )));
        }
        Ok(())
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i < self.n);
        if self.n == 1 {
            self.lo
        } else if self.circular {
            self.lo + (self.hi - self.lo) * i as f64 / self.n as f64
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64
        }
    }

    /// Locates `x`: lower node index, blend toward the next node, and
    /// whether the query fell outside the axis (circular axes never do).
    fn locate(&self, x: f64) -> (usize, f64, bool) {
        if self.n == 1 {
            return (0, 0.0, (x - self.lo).abs() > PIN_TOL);
        }
        if self.circular {
            let h = (self.hi - self.lo) / self.n as f64;
            let u = ((x - self.lo) / h).rem_euclid(self.n as f64);
            let i0 = (u.floor() as usize).min(self.n - 1);
            (i0, u - i0 as f64, false)
        } else {
            let h = (self.hi - self.lo) / (self.n - 1) as f64;
            let u = (x - self.lo) / h;
            let top = (self.n - 1) as f64;
            let clamped = !(-1e-9..=top + 1e-9).contains(&u);
            let u = u.clamp(0.0, top);
            let i0 = (u.floor() as usize).min(self.n - 2);
            (i0, u - i0 as f64, clamped)
        }
    }

    fn next_index(&self, i0: usize) -> usize {
        if self.circular {
            (i0 + 1) % self.n
        } else {
            (i0 + 1).min(self.n - 1)
        }
    }
}

/// Rectilinear grid over the full robot state `(x, y, theta, v, omega)`.
///
/// Cells are enumerated row-major with `x` slowest and `omega` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub x: GridAxis,
    pub y: GridAxis,
    pub theta: GridAxis,
    pub v: GridAxis,
    pub omega: GridAxis,
}

impl StateGrid {
    pub fn axes(&self) -> [GridAxis; 5] {
        [self.x, self.y, self.theta, self.v, self.omega]
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, name) in self.axes().iter().zip(["x", "y", "theta", "v", "omega"]) {
            axis.validate(name)?;
            if axis.circular && name != "theta" {
                return Err(Error::Config(format!("only the heading axis may be circular, not {name}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 5] {
        let a = self.axes();
        [a[0].n, a[1].n, a[2].n, a[3].n, a[4].n]
    }

    fn strides(&self) -> [usize; 5] {
        let d = self.dims();
        [d[1] * d[2] * d[3] * d[4], d[2] * d[3] * d[4], d[3] * d[4], d[4], 1]
    }

    pub fn num_cells(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn cell_indices(&self, cell: usize) -> [usize; 5] {
        let d = self.dims();
        let mut rest = cell;
        let mut out = [0usize; 5];
        for k in (0..5).rev() {
            out[k] = rest % d[k];
            rest /= d[k];
        }
        debug_assert_eq!(rest, 0);
        out
    }

    /// Inverse of [`cell_indices`](Self::cell_indices).
    pub fn cell_of(&self, idx: [usize; 5]) -> usize {
        let s = self.strides();
        (0..5).map(|k| idx[k] * s[k]).sum()
    }

    pub fn cell_state(&self, cell: usize) -> State {
        let idx = self.cell_indices(cell);
        let a = self.axes();
        State::new(a[0].node(idx[0]), a[1].node(idx[1]), a[2].node(idx[2]), a[3].node(idx[3]), a[4].node(idx[4]))
    }

    /// Appends the multilinear interpolation stencil for `s` (cell indices
    /// plus convex weights, zero-weight corners dropped) and reports whether
    /// any coordinate had to be clamped into the hull.
    pub fn stencil_into(&self, s: &State, idx: &mut Vec<u32>, w: &mut Vec<f64>) -> bool {
        let axes = self.axes();
        let strides = self.strides();
        let coords = s.as_array();
        let mut acc_idx = [0usize; 32];
        let mut acc_w = [0.0f64; 32];
        acc_w[0] = 1.0;
        let mut n_active = 1usize;
        let mut clamped = false;
        for d in 0..5 {
            let (i0, frac, cl) = axes[d].locate(coords[d]);
            clamped |= cl;
            let i1 = axes[d].next_index(i0);
            if frac <= 1e-12 || i1 == i0 {
                for k in 0..n_active {
                    acc_idx[k] += i0 * strides[d];
                }
            } else if frac >= 1.0 - 1e-12 {
                for k in 0..n_active {
                    acc_idx[k] += i1 * strides[d];
                }
            } else {
                for k in 0..n_active {
                    acc_idx[n_active + k] = acc_idx[k] + i1 * strides[d];
                    acc_w[n_active + k] = acc_w[k] * frac;
                    acc_idx[k] += i0 * strides[d];
                    acc_w[k] *= 1.0 - frac;
                }
                n_active *= 2;
            }
        }
        for k in 0..n_active {
            idx.push(acc_idx[k] as u32);
            w.push(acc_w[k]);
        }
        clamped
    }
}

/// Discretized physics conditioning: payload mass and friction nodes, with
/// the center-of-mass shift and external force pinned at nominal.
///
/// Bins are enumerated payload-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EBins {
    pub payload: GridAxis,
    pub friction: GridAxis,
}

impl EBins {
    pub fn validate(&self) -> Result<()> {
        self.payload.validate("payload bins")?;
        self.friction.validate("friction bins")?;
        if self.payload.circular || self.friction.circular {
            return Err(Error::Config("physics bins cannot be circular".into()));
        }
        if self.friction.lo <= 0.0 {
            return Err(Error::Config(format!(
                "friction bins must stay positive, got lower node {}",
                self.friction.lo
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.payload.n * self.friction.n
    }

    pub fn env(&self, bin: usize) -> EnvParams {
        debug_assert!(bin < self.count());
        EnvParams {
            payload_mass: self.payload.node(bin / self.friction.n),
            friction: self.friction.node(bin % self.friction.n),
            ..EnvParams::nominal()
        }
    }

    /// Bilinear bin weights for an estimate; flags out-of-hull clamping.
    /// Only the binned components of the estimate participate.
    pub fn weights_into(&self, e_hat: &EstimateVector, out: &mut Vec<(usize, f64)>) -> bool {
        let (ip, fp, cp) = self.payload.locate(e_hat.payload_mass);
        let (jf, ff, cf) = self.friction.locate(e_hat.friction);
        let ip1 = self.payload.next_index(ip);
        let jf1 = self.friction.next_index(jf);
        let nf = self.friction.n;
        for (i, wi) in [(ip, 1.0 - fp), (ip1, fp)] {
            for (j, wj) in [(jf, 1.0 - ff), (jf1, ff)] {
                let w = wi * wj;
                if w > 1e-12 {
                    out.push((i * nf + j, w));
                }
            }
        }
        cp || cf
    }
}

/// A frozen backup operator: per-cell margins plus, per bin and cell, the
/// interpolation stencil at the policy-induced successor.
///
/// Stencils are stored CSR-style with cell-local indices — bins never read
/// each other's values because the physics is fixed within an episode.
#[derive(Debug, Clone)]
pub struct BackupProblem {
    grid: StateGrid,
    bins: EBins,
    gamma: f64,
    margin_scale: f64,
    /// Per cell: normalized `(l, zeta)`.
    margins: Vec<[f64; 2]>,
    /// CSR offsets, one run per `(bin, cell)` in bin-major order.
    stencil_start: Vec<u32>,
    stencil_idx: Vec<u32>,
    stencil_w: Vec<f64>,
}

impl BackupProblem {
    /// Builds the operator for a closed loop: `policy` maps the noiseless
    /// observation at each cell to a twist command, and one dynamics step per
    /// bin produces the successor. Goal cells (`l <= 0`) absorb.
    pub fn from_closed_loop(
        world: &WorldSpec,
        cfg: &DynamicsConfig,
        policy: &dyn Fn(&Observation) -> Result<Action>,
        grid: StateGrid,
        bins: EBins,
        gamma: f64,
        margin_scale: f64,
    ) -> Result<BackupProblem> {
        grid.validate()?;
        bins.validate()?;
        world.validate()?;
        cfg.validate()?;
        check_gamma_and_scale(gamma, margin_scale)?;

        let n_cells = grid.num_cells();
        let n_bins = bins.count();
        let mut margins = Vec::with_capacity(n_cells);
        let mut actions = Vec::with_capacity(n_cells);
        for c in 0..n_cells {
            let s = grid.cell_state(c);
            let m = world.margins(s.position())?;
            margins.push([normalize_margin(m.l, margin_scale), normalize_margin(m.zeta, margin_scale)]);
            // The command only matters off the target; goal cells absorb.
            if margins[c][0] > 0.0 {
                let obs = observe(cfg, world, &s, Action::ZERO, None)?;
                actions.push(Some(policy(&obs)?));
            } else {
                actions.push(None);
            }
        }

        let mut stencil_start = Vec::with_capacity(n_bins * n_cells + 1);
        let mut stencil_idx = Vec::new();
        let mut stencil_w = Vec::new();
        stencil_start.push(0u32);
        for b in 0..n_bins {
            let e = bins.env(b);
            for c in 0..n_cells {
                match actions[c] {
                    Some(a) => {
                        let next = step(cfg, &grid.cell_state(c), a, &e)?;
                        grid.stencil_into(&next, &mut stencil_idx, &mut stencil_w);
                    }
                    None => {
                        stencil_idx.push(c as u32);
                        stencil_w.push(1.0);
                    }
                }
                stencil_start.push(stencil_idx.len() as u32);
            }
        }
        Ok(BackupProblem { grid, bins, gamma, margin_scale, margins, stencil_start, stencil_idx, stencil_w })
    }

    /// Assembles an operator from explicit margins and successor stencils —
    /// the entry point for hand-built chains and randomized property tests.
    ///
    /// `stencils[b][c]` lists `(cell, weight)` corners within bin `b`; each
    /// stencil must be a convex combination.
    pub fn from_parts(
        grid: StateGrid,
        bins: EBins,
        gamma: f64,
        margin_scale: f64,
        margins: Vec<[f64; 2]>,
        stencils: &[Vec<Vec<(u32, f64)>>],
    ) -> Result<BackupProblem> {
        grid.validate()?;
        bins.validate()?;
        check_gamma_and_scale(gamma, margin_scale)?;
        let n_cells = grid.num_cells();
        let n_bins = bins.count();
        if margins.len() != n_cells {
            return Err(Error::Contract(format!(
                "{} margin pairs for {} cells",
                margins.len(),
                n_cells
            )));
        }
        for m in &margins {
            ensure_finite("margin", m)?;
            if m.iter().any(|v| v.abs() > VALUE_BOUND) {
                return Err(Error::Contract(format!("margins must be normalized into [-1, 1], got {m:?}")));
            }
        }
        if stencils.len() != n_bins || stencils.iter().any(|s| s.len() != n_cells) {
            return Err(Error::Contract(format!(
                "stencil table must be {n_bins} bins x {n_cells} cells"
            )));
        }
        let mut stencil_start = vec![0u32];
        let mut stencil_idx = Vec::new();
        let mut stencil_w = Vec::new();
        for bin in stencils {
            for stencil in bin {
                let mut total = 0.0;
                for &(c, w) in stencil {
                    if c as usize >= n_cells || !(w >= 0.0) || !w.is_finite() {
                        return Err(Error::Contract(format!("bad stencil corner ({c}, {w})")));
                    }
                    total += w;
                    stencil_idx.push(c);
                    stencil_w.push(w);
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "stencil weights must sum to 1, got {total}"
                    )));
                }
                stencil_start.push(stencil_idx.len() as u32);
            }
        }
        Ok(BackupProblem { grid, bins, gamma, margin_scale, margins, stencil_start, stencil_idx, stencil_w })
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn bins(&self) -> &EBins {
        &self.bins
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.bins.count() * self.grid.num_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized `(l, zeta)` for a cell.
    pub fn cell_margins(&self, cell: usize) -> [f64; 2] {
        self.margins[cell]
    }

    /// The stationary payoff `max{l, zeta}` per cell, tiled across bins.
    ///
    /// This is the exact fixed point at every self-mapped cell (absorbed
    /// goals, stopped robots), so starting iteration here removes the slowest
    /// convergence mode instead of waiting `O(1 / (1 - gamma))` sweeps for
    /// those cells to settle.
    pub fn initial_values(&self) -> Vec<f64> {
        let n_cells = self.grid.num_cells();
        let mut out = Vec::with_capacity(self.len());
        for _ in 0..self.bins.count() {
            out.extend(self.margins[..n_cells].iter().map(|m| m[0].max(m[1])));
        }
        out
    }

    /// One Jacobi sweep: applies the backup to `old`, writes `new`, returns
    /// the sup-norm residual (infinite if any value went non-finite).
    pub fn backup_into(&self, old: &[f64], new: &mut [f64]) -> Result<f64> {
        let n_cells = self.grid.num_cells();
        if old.len() != self.len() || new.len() != self.len() {
            return Err(Error::Contract(format!(
                "value buffers must have {} entries, got {} / {}",
                self.len(),
                old.len(),
                new.len()
            )));
        }
        let residual = new
            .par_chunks_mut(n_cells)
            .enumerate()
            .map(|(b, out)| {
                let old_bin = &old[b * n_cells..(b + 1) * n_cells];
                let base = b * n_cells;
                let mut worst = 0.0f64;
                for c in 0..n_cells {
                    let run = self.stencil_start[base + c] as usize..self.stencil_start[base + c + 1] as usize;
                    let mut v_next = 0.0;
                    for k in run {
                        v_next += self.stencil_w[k] * old_bin[self.stencil_idx[k] as usize];
                    }
                    let [l, zeta] = self.margins[c];
                    let v = drabe_backup(v_next, l, zeta, self.gamma);
                    // A NaN that reaches min/max would be silently dropped
                    // (those ops prefer the non-NaN operand), so the blend
                    // itself is checked as well as the result.
                    if !v_next.is_finite() || !v.is_finite() {
                        return f64::INFINITY;
                    }
                    worst = worst.max((v - old_bin[c]).abs());
                    out[c] = v;
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        Ok(residual)
    }

    /// Iterates to the fixed point: sweeps until the sup-norm residual drops
    /// to `tol`. Returns the converged table and the residual trace.
    pub fn solve(&self, tol: f64, max_sweeps: usize) -> Result<(RaTable, Vec<f64>)> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::Config(format!("tolerance must be positive and finite, got {tol}")));
        }
        let mut cur = self.initial_values();
        let mut next = vec![0.0; cur.len()];
        let mut trace = Vec::new();
        loop {
            let residual = self.backup_into(&cur, &mut next)?;
            if !residual.is_finite() {
                let bad = next.iter().position(|v| !v.is_finite()).unwrap_or(0);
                let n_cells = self.grid.num_cells();
                return Err(Error::Numeric(format!(
                    "value iteration diverged at bin {} cell {}",
                    bad / n_cells,
                    bad % n_cells
                )));
            }
            trace.push(residual);
            std::mem::swap(&mut cur, &mut next);
            if residual <= tol {
                break;
            }
            if trace.len() >= max_sweeps {
                return Err(Error::Numeric(format!(
                    "value iteration missed tolerance {tol} after {max_sweeps} sweeps (residual {residual})"
                )));
            }
        }
        Ok((
            RaTable {
                grid: self.grid.clone(),
                bins: self.bins.clone(),
                gamma: self.gamma,
                margin_scale: self.margin_scale,
                values: cur,
            },
            trace,
        ))
    }
}

fn check_gamma_and_scale(gamma: f64, margin_scale: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount must lie in [0, 1), got {gamma}")));
    }
    if !(margin_scale > 0.0 && margin_scale.is_finite()) {
        return Err(Error::Config(format!("margin scale must be positive, got {margin_scale}")));
    }
    Ok(())
}

/// A converged value table: multilinear in the state, bilinear in the binned
/// physics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaTable {
    pub grid: StateGrid,
    pub bins: EBins,
    pub gamma: f64,
    pub margin_scale: f64,
    /// Bin-major values: `values[bin * num_cells + cell]`.
    pub values: Vec<f64>,
}

impl RaTable {
    /// Interpolated value at `(s, e_hat)`; the flag reports clamping into
    /// the grid hull or the binned physics range. Estimate components the
    /// bins pin at nominal (center-of-mass shift) do not move the lookup.
    pub fn value(&self, s: &State, e_hat: &EstimateVector) -> (f64, bool) {
        let mut idx = Vec::with_capacity(32);
        let mut w = Vec::with_capacity(32);
        let mut clamped = self.grid.stencil_into(s, &mut idx, &mut w);
        let mut bw = Vec::with_capacity(4);
        clamped |= self.bins.weights_into(e_hat, &mut bw);
        let n_cells = self.grid.num_cells();
        let mut value = 0.0;
        for &(b, wb) in &bw {
            let slice = &self.values[b * n_cells..(b + 1) * n_cells];
            let mut v = 0.0;
            for (k, &ci) in idx.iter().enumerate() {
                v += w[k] * slice[ci as usize];
            }
            value += wb * v;
        }
        (value, clamped)
    }

    /// The raw value slice for one physics bin.
    pub fn bin_slice(&self, bin: usize) -> &[f64] {
        let n_cells = self.grid.num_cells();
        &self.values[bin * n_cells..(bin + 1) * n_cells]
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.bins.validate()?;
        check_gamma_and_scale(self.gamma, self.margin_scale)?;
        if self.values.len() != self.bins.count() * self.grid.num_cells() {
            return Err(Error::Contract(format!(
                "table holds {} values for {} bins x {} cells",
                self.values.len(),
                self.bins.count(),
                self.grid.num_cells()
            )));
        }
        ensure_finite("table values", &self.values)?;
        if self.values.iter().any(|v| v.abs() > VALUE_BOUND + 1e-9) {
            return Err(Error::Contract("table values exceed the normalization bound".into()));
        }
        Ok(())
    }
}
