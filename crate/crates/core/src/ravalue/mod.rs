//! Parameter-conditioned discounted reach-avoid values.
//!
//! A state's value answers the safety question for a fixed policy under
//! physics `e`: negative means the closed loop still reaches the goal without
//! first failing, positive means it does not. Values obey the discounted
//! reach-avoid backup
//!
//! ```text
//! B[V](s) = (1 - gamma) * max{l(s), zeta(s)}
//!           + gamma * max{min{V(s'), l(s)}, zeta(s)}
//! ```
//!
//! where `l` is the goal margin (<= 0 inside the target), `zeta` the failure
//! margin (> 0 inside an obstacle or outside the arena), and `s'` the
//! policy-induced successor. Because `max` and `min` are 1-Lipschitz, the
//! backup contracts the sup-norm by exactly `gamma` and is monotone, so value
//! iteration converges geometrically to a unique fixed point. The fixed
//! point's negative side under-approximates the true reach-avoid set for
//! `gamma < 1` (discounting charges a toll on the way to the goal) and
//! recovers it as `gamma -> 1`.
//!
//! Two realizations share this backup:
//!
//! * [`table::RaTable`] — exact value iteration on a rectilinear state grid
//!   crossed with physics bins; the verification instrument.
//! * [`net::RaNet`] — a small regressor fitted to backup targets from rollout
//!   records and conditioned on the estimated physics; the deployment
//!   instrument.
//!
//! Margins are normalized before they enter any value: divided by a fixed
//! length constant and clamped to `[-VALUE_BOUND, VALUE_BOUND]`, so stored
//! values live in the same bounded range regardless of arena size and a
//! saturating network output can cover them.

pub mod net;
pub mod table;

use crate::dynamics::{DynamicsConfig, State};
use crate::error::Result;
use crate::estimator::EstimateVector;
use crate::world::WorldSpec;

/// Normalization bound: every margin and every stored value lies in
/// `[-VALUE_BOUND, VALUE_BOUND]`.
pub const VALUE_BOUND: f64 = 1.0;

/// Scales a raw margin (meters) into the normalized value range.
pub fn normalize_margin(margin: f64, scale: f64) -> f64 {
    (margin / scale).clamp(-VALUE_BOUND, VALUE_BOUND)
}

/// One application of the discounted reach-avoid backup.
///
/// `v_next` is the value at the policy-induced successor, `l`/`zeta` the
/// margins at the current state. `gamma = 0` degenerates to `max{l, zeta}`
/// (the stationary payoff); `gamma -> 1` approaches the undiscounted
/// reach-avoid recursion.
pub fn drabe_backup(v_next: f64, l: f64, zeta: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * l.max(zeta) + gamma * v_next.min(l).max(zeta)
}

/// A queried value plus whether the query had to be clamped into the model's
/// domain (outside the grid hull or the binned physics range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueSample {
    pub value: f64,
    pub clamped: bool,
}

/// Either value realization behind one lookup interface.
///
/// The table ignores `world`/`cfg` (its world is baked in at solve time and
/// only the binned physics components of the estimate move it); the net
/// derives its features from them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RaModel {
    Table(table::RaTable),
    Net(net::RaNet),
}

impl RaModel {
    pub fn gamma(&self) -> f64 {
        match self {
            RaModel::Table(t) => t.gamma,
            RaModel::Net(n) => n.gamma,
        }
    }

    pub fn margin_scale(&self) -> f64 {
        match self {
            RaModel::Table(t) => t.margin_scale,
            RaModel::Net(n) => n.margin_scale,
        }
    }

    pub fn value(
        &self,
        world: &WorldSpec,
        cfg: &DynamicsConfig,
        s: &State,
        e_hat: &EstimateVector,
    ) -> Result<ValueSample> {
        match self {
            RaModel::Table(t) => {
                let (value, clamped) = t.value(s, e_hat);
                Ok(ValueSample { value, clamped })
            }
            RaModel::Net(n) => {
                let value = n.value(world, cfg, s, e_hat)?;
                Ok(ValueSample { value, clamped: false })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn backup_degenerate_cases_read_off_the_formula() {
        // Zero discount: pure stationary payoff.
        assert_abs_diff_eq!(drabe_backup(123.0, 0.3, -0.7, 0.0), 0.3, epsilon = 1e-15);
        // In-target safe state pins the value at -1 regardless of the future.
        for v_next in [-5.0, 0.0, 5.0] {
            assert_abs_diff_eq!(drabe_backup(v_next, -1.0, -1.0, 0.7), -1.0, epsilon = 1e-15);
        }
        // Failure dominates: zeta = 2 floors both terms.
        assert_abs_diff_eq!(drabe_backup(-3.0, 0.5, 2.0, 0.9), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn margin_normalization_scales_and_clamps() {
        assert_abs_diff_eq!(normalize_margin(0.5, 2.0), 0.25);
        assert_abs_diff_eq!(normalize_margin(-7.0, 2.0), -1.0);
        assert_abs_diff_eq!(normalize_margin(7.0, 2.0), 1.0);
    }

    proptest! {
        /// Scalar form of the sup-norm contraction: for fixed margins the
        /// backup moves two values closer by at least a factor gamma.
        #[test]
        fn backup_contracts_pointwise(
            v1 in -1.0f64..1.0, v2 in -1.0f64..1.0,
            l in -1.0f64..1.0, z in -1.0f64..1.0,
            gamma in 0.0f64..1.0,
        ) {
            let d = (drabe_backup(v1, l, z, gamma) - drabe_backup(v2, l, z, gamma)).abs();
            prop_assert!(d <= gamma * (v1 - v2).abs() + 1e-12);
        }

        /// Monotonicity: a larger successor value never lowers the backup.
        #[test]
        fn backup_is_monotone_in_v_next(
            v1 in -1.0f64..1.0, dv in 0.0f64..2.0,
            l in -1.0f64..1.0, z in -1.0f64..1.0,
            gamma in 0.0f64..1.0,
        ) {
            prop_assert!(drabe_backup(v1 + dv, l, z, gamma) >= drabe_backup(v1, l, z, gamma) - 1e-12);
        }

        /// The backup maps the normalized range into itself.
        #[test]
        fn backup_preserves_the_value_bound(
            v in -1.0f64..1.0, l in -1.0f64..1.0, z in -1.0f64..1.0, gamma in 0.0f64..1.0,
        ) {
            let b = drabe_backup(v, l, z, gamma);
            prop_assert!((-VALUE_BOUND - 1e-12..=VALUE_BOUND + 1e-12).contains(&b));
        }
    }
}
