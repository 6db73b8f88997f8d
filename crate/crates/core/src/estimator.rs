//! Online physical-parameter estimation from proprioceptive history.
//!
//! The estimator is a small regression network over a sliding window of the
//! last `history_len` control steps; each step contributes the proprioceptive
//! channels plus the applied twist command. It predicts the five estimable
//! parameters — payload mass, the three center-of-mass offsets, and friction
//! — in a normalized space where every component is scaled to `[-1, 1]` by
//! its randomization range. External force is deliberately excluded: a
//! constant position drift is invisible to proprioception.
//!
//! Training targets are always the normalized *true* parameters of the
//! episode that produced the window, never anything policy-dependent, so the
//! regression target is invariant to which policy generated the data.
//!
//! During policy training the conditioning vector is a fusion
//! `alpha * truth + (1 - alpha) * estimate`; the schedule feeds the policy
//! ground truth early (while the estimator is still poor) and anneals to the
//! raw estimate so that by the end the policy runs on exactly what it will
//! have at deployment.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, EnvParams, Observation, ParamRanges, PROPRIO_DIM};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Mlp, Sgd};
use crate::rng::derive_rng;

/// Number of estimated parameters.
pub const ESTIMATED_DIM: usize = 5;

/// Values per history step: proprio channels plus the applied twist.
pub const ENTRY_DIM: usize = PROPRIO_DIM + 2;

/// The estimable subset of [`EnvParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateVector {
    pub payload_mass: f64,
    pub com_shift: [f64; 3],
    pub friction: f64,
}

impl EstimateVector {
    pub fn from_env(e: &EnvParams) -> EstimateVector {
        EstimateVector { payload_mass: e.payload_mass, com_shift: e.com_shift, friction: e.friction }
    }

    pub fn as_array(&self) -> [f64; ESTIMATED_DIM] {
        [self.payload_mass, self.com_shift[0], self.com_shift[1], self.com_shift[2], self.friction]
    }

    pub fn from_array(a: [f64; ESTIMATED_DIM]) -> EstimateVector {
        EstimateVector { payload_mass: a[0], com_shift: [a[1], a[2], a[3]], friction: a[4] }
    }

    /// Expands the estimate into full dynamics parameters, filling the
    /// unestimated components (external force) with their nominal zero. This
    /// is the runtime's best physics model: everything it cannot estimate it
    /// assumes quiet.
    pub fn to_env_nominal(&self) -> EnvParams {
        EnvParams {
            payload_mass: self.payload_mass,
            com_shift: self.com_shift,
            friction: self.friction,
            ext_force: [0.0; 2],
        }
    }

    /// Linear interpolation `alpha * self + (1 - alpha) * other`, used for
    /// truth/estimate fusion.
    pub fn lerp(&self, other: &EstimateVector, alpha: f64) -> EstimateVector {
        let a = self.as_array();
        let b = other.as_array();
        let mut out = [0.0; ESTIMATED_DIM];
        for i in 0..ESTIMATED_DIM {
            out[i] = alpha * a[i] + (1.0 - alpha) * b[i];
        }
        EstimateVector::from_array(out)
    }
}

/// Range-based scaling between physical parameters and the `[-1, 1]` space
/// the estimator works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamScaler {
    mid: [f64; ESTIMATED_DIM],
    half: [f64; ESTIMATED_DIM],
}

impl ParamScaler {
    pub fn new(ranges: &ParamRanges) -> ParamScaler {
        let spans = [ranges.payload_mass, ranges.com_x, ranges.com_y, ranges.com_z, ranges.friction];
        let mut mid = [0.0; ESTIMATED_DIM];
        let mut half = [0.0; ESTIMATED_DIM];
        for (i, [lo, hi]) in spans.iter().enumerate() {
            mid[i] = 0.5 * (lo + hi);
            // Degenerate (zero-width) ranges scale by 1 so normalize stays
            // well-defined; every such component maps to exactly 0.
            half[i] = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        }
        ParamScaler { mid, half }
    }

    pub fn normalize(&self, e: &EstimateVector) -> [f64; ESTIMATED_DIM] {
        let a = e.as_array();
        let mut out = [0.0; ESTIMATED_DIM];
        for i in 0..ESTIMATED_DIM {
            out[i] = (a[i] - self.mid[i]) / self.half[i];
        }
        out
    }

    /// Physical half-width per component — the factor that converts a
    /// normalized offset back into physical units (1 for pinned ranges).
    pub fn half_widths(&self) -> [f64; ESTIMATED_DIM] {
        self.half
    }

    pub fn denormalize(&self, n: [f64; ESTIMATED_DIM]) -> EstimateVector {
        let mut out = [0.0; ESTIMATED_DIM];
        for i in 0..ESTIMATED_DIM {
            out[i] = self.mid[i] + n[i] * self.half[i];
        }
        EstimateVector::from_array(out)
    }

    /// Normalized image of physically negating the lateral center-of-mass
    /// shift (component 2), every other component untouched bitwise.
    ///
    /// With a calibration range symmetric about zero — the default — the
    /// physical negation is an exact sign flip in normalized space, so the
    /// map is a bitwise involution; an off-center range falls back to the
    /// rounding round-trip.
    pub fn mirror_lateral(&self, n: [f64; ESTIMATED_DIM]) -> [f64; ESTIMATED_DIM] {
        let mut out = n;
        out[2] = if self.mid[2] == 0.0 {
            -n[2]
        } else {
            let phys = self.mid[2] + n[2] * self.half[2];
            (-phys - self.mid[2]) / self.half[2]
        };
        out
    }
}

/// Ring buffer of the last `history_len` (observation, action) pairs,
/// zero-filled at episode start so the feature vector always has full length.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    entries: VecDeque<[f64; ENTRY_DIM]>,
    history_len: usize,
}

impl HistoryWindow {
    pub fn new(history_len: usize) -> HistoryWindow {
        let mut entries = VecDeque::with_capacity(history_len);
        for _ in 0..history_len {
            entries.push_back([0.0; ENTRY_DIM]);
        }
        HistoryWindow { entries, history_len }
    }

    /// Clears back to the zero-filled state (episode reset).
    pub fn reset(&mut self) {
        for e in self.entries.iter_mut() {
            *e = [0.0; ENTRY_DIM];
        }
    }

    /// Appends the step that *just finished*: the observation the controller
    /// saw and the action it then applied. Callers must push only after the
    /// step's estimate has been consumed, so the estimate at step `t` never
    /// sees data from step `t` itself.
    pub fn push(&mut self, obs: &Observation, action: Action) {
        let mut entry = [0.0; ENTRY_DIM];
        entry[..PROPRIO_DIM].copy_from_slice(&obs.proprio);
        entry[PROPRIO_DIM] = action.v_cmd;
        entry[PROPRIO_DIM + 1] = action.omega_cmd;
        if self.entries.len() == self.history_len {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Flattened window, oldest step first; length `history_len * ENTRY_DIM`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.history_len * ENTRY_DIM);
        for e in &self.entries {
            out.extend_from_slice(e);
        }
        out
    }

    pub fn feature_len(&self) -> usize {
        self.history_len * ENTRY_DIM
    }
}

/// Which side of the truth/estimate fusion dominates early in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSchedule {
    /// `alpha = min(2 * (1 - progress), 1)`: pure ground truth through the
    /// first half of training, then annealed to the raw estimate. The policy
    /// finishes training on exactly its deployment input.
    TruthFirst,
    /// `alpha = min(2 * progress, 1)`: the reverse ordering, kept selectable
    /// for ablations.
    EstimateFirst,
}

impl FusionSchedule {
    /// Truth weight `alpha` at training progress `p` in `[0, 1]`.
    pub fn alpha(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        match self {
            FusionSchedule::TruthFirst => (2.0 * (1.0 - p)).min(1.0),
            FusionSchedule::EstimateFirst => (2.0 * p).min(1.0),
        }
    }
}

/// Estimator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Steps in the history window.
    pub history_len: usize,
    /// Hidden width of the regression net.
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradient-descent epochs per training round.
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 weight penalty.
    pub weight_decay: f64,
    /// Replay buffer capacity in samples.
    pub buffer_capacity: usize,
    /// Windows sampled per episode when collecting training data.
    pub samples_per_episode: usize,
    /// Truth/estimate fusion schedule used while training policies.
    pub fusion: FusionSchedule,
}

impl Default for EstimatorConfig {
    fn default() -> EstimatorConfig {
        EstimatorConfig {
            history_len: 50,
            hidden: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 4,
            batch_size: 64,
            weight_decay: 1e-5,
            buffer_capacity: 4096,
            samples_per_episode: 12,
            fusion: FusionSchedule::TruthFirst,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "estimator history_len, hidden, and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "estimator learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("estimator momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("estimator weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// One training sample: a flattened window and the normalized true
/// parameters of the episode it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSample {
    pub features: Vec<f64>,
    pub target: [f64; ESTIMATED_DIM],
}

/// The regression network plus its scaling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimator {
    net: Mlp,
    history_len: usize,
    ranges: ParamRanges,
}

impl Estimator {
    /// Fresh estimator with randomly initialized weights drawn from the
    /// given seed stream.
    pub fn new(cfg: &EstimatorConfig, ranges: &ParamRanges, seed: u64, path: &[u64]) -> Result<Estimator> {
        cfg.validate()?;
        let in_dim = cfg.history_len * ENTRY_DIM;
        let mut net = Mlp::new(&[in_dim, cfg.hidden, ESTIMATED_DIM], Activation::Tanh, Activation::Identity)?;
        net.init_uniform(&mut derive_rng(seed, path), 1.0);
        Ok(Estimator { net, history_len: cfg.history_len, ranges: *ranges })
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn scaler(&self) -> ParamScaler {
        ParamScaler::new(&self.ranges)
    }

    /// Raw normalized prediction for a feature vector, clamped to the
    /// normalized range.
    pub fn predict_normalized(&self, features: &[f64]) -> Result<[f64; ESTIMATED_DIM]> {
        let raw = self.net.forward(features)?;
        let mut out = [0.0; ESTIMATED_DIM];
        for (o, r) in out.iter_mut().zip(raw.iter()) {
            *o = r.clamp(-1.0, 1.0);
        }
        Ok(out)
    }

    /// Physical-space estimate for the current window.
    pub fn estimate(&self, window: &HistoryWindow) -> Result<EstimateVector> {
        if window.feature_len() != self.net.input_dim() {
            return Err(Error::Contract(format!(
                "window provides {} features, estimator expects {}",
                window.feature_len(),
                self.net.input_dim()
            )));
        }
        let n = self.predict_normalized(&window.features())?;
        Ok(self.scaler().denormalize(n))
    }

    /// Mean squared error in normalized space over a sample set.
    pub fn loss(&self, samples: &[EstimatorSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("estimator loss over an empty sample set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let raw = self.net.forward(&s.features)?;
            for (p, t) in raw.iter().zip(s.target.iter()) {
                total += (p - t) * (p - t);
            }
        }
        Ok(total / (samples.len() * ESTIMATED_DIM) as f64)
    }

    /// Minibatch SGD over the sample set; returns the post-training loss.
    /// Deterministic: shuffling uses a stream derived from `seed`/`path`.
    pub fn fit(
        &mut self,
        samples: &[EstimatorSample],
        cfg: &EstimatorConfig,
        seed: u64,
        path: &[u64],
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("estimator fit on an empty sample set".into()));
        }
        for s in samples {
            ensure_finite("estimator target", &s.target)?;
            if s.features.len() != self.net.input_dim() {
                return Err(Error::Contract(format!(
                    "sample has {} features, estimator expects {}",
                    s.features.len(),
                    self.net.input_dim()
                )));
            }
        }
        let mut rng = derive_rng(seed, path);
        let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, self.net.num_params());
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut grad = vec![0.0; self.net.num_params()];
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in batch {
                    let s = &samples[i];
                    let cache = self.net.forward_cached(&s.features)?;
                    let out = cache.output();
                    let mut g_out = [0.0; ESTIMATED_DIM];
                    for k in 0..ESTIMATED_DIM {
                        g_out[k] = 2.0 * (out[k] - s.target[k]) / (batch.len() * ESTIMATED_DIM) as f64;
                    }
                    self.net.backward(&cache, &g_out, &mut grad)?;
                }
                if cfg.weight_decay > 0.0 {
                    for (g, p) in grad.iter_mut().zip(self.net.params().iter()) {
                        *g += 2.0 * cfg.weight_decay * p;
                    }
                }
                opt.step(self.net.params_mut(), &grad)?;
            }
        }
        let final_loss = self.loss(samples)?;
        if !final_loss.is_finite() {
            return Err(Error::Numeric(format!("estimator training diverged: loss {final_loss}")));
        }
        Ok(final_loss)
    }
}

/// Fisher-Yates shuffle driven by the crate's deterministic streams.
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Bounded FIFO sample buffer used while training policies: newest samples
/// displace the oldest once capacity is reached.
#[derive(Debug, Clone, Default)]
pub struct SampleBuffer {
    samples: VecDeque<EstimatorSample>,
    capacity: usize,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> SampleBuffer {
        SampleBuffer { samples: VecDeque::new(), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, sample: EstimatorSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Contiguous snapshot for a fit call.
    pub fn as_vec(&self) -> Vec<EstimatorSample> {
        self.samples.iter().cloned().collect()
    }
}
