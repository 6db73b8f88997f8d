//! Reach-avoid safeguarded control for a planar ground robot whose physical
//! parameters (payload mass, center-of-mass shift, ground friction, external
//! push force) are randomized per episode and hidden from the controller.
//!
//! The crate provides, end to end:
//!
//! * a planar world model with signed target / failure margins and a range
//!   sensor ([`world`]),
//! * unicycle-style dynamics with parameter-dependent acceleration limits
//!   ([`dynamics`]),
//! * an online estimator that regresses the hidden parameters from a sliding
//!   window of proprioceptive history ([`estimator`]),
//! * an agile goal-reaching policy and a twist-tracking recovery policy, both
//!   trained by a cross-entropy search ([`policies`]),
//! * a discounted reach-avoid value function, solved exactly on a grid and
//!   distilled into a small network ([`ravalue`]),
//! * the runtime safeguard that switches between the two policies on the
//!   value's sign ([`safeguard`]),
//! * brute-force oracles that enumerate closed-loop trajectories to label
//!   safe / reaching states exactly ([`oracle`]),
//! * Lipschitz and monotonicity diagnostics for the value function
//!   ([`analysis`]), and
//! * the experiment harness behind the CLI: training phases, evaluation
//!   scenarios, and artifact I/O ([`harness`]).

pub mod analysis;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod policies;
pub mod ravalue;
pub mod rng;
pub mod safeguard;
pub mod world;

pub use error::{Error, Result};
