//! Minimal dense networks: just enough machinery for the three small models
//! this crate trains (parameter estimator, distilled value function, and the
//! policy heads searched by the cross-entropy method).
//!
//! Parameters live in one flat `Vec<f64>` (`[W1 | b1 | W2 | b2 | ...]`, rows
//! of each weight matrix contiguous), which keeps checkpointing, population
//! sampling, and regularization trivial. Everything is `f64` and free of
//! hidden state, so results are bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the *output* value `a = act(z)`.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully-connected network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    acts: Vec<Activation>,
    params: Vec<f64>,
}

/// Forward-pass cache for backpropagation: the input and every layer's
/// post-activation output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache always holds the input")
    }
}

impl Mlp {
    /// Builds a zero-initialized network with layer sizes `dims` (input
    /// first), `hidden_act` on every layer except the last, `output_act` on
    /// the last.
    pub fn new(dims: &[usize], hidden_act: Activation, output_act: Activation) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::Contract(format!(
                "a network needs at least input and output sizes, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero-width layer in {dims:?}")));
        }
        let n_layers = dims.len() - 1;
        let mut acts = vec![hidden_act; n_layers];
        acts[n_layers - 1] = output_act;
        let n_params: usize = (0..n_layers).map(|l| dims[l] * dims[l + 1] + dims[l + 1]).sum();
        Ok(Mlp { dims: dims.to_vec(), acts, params: vec![0.0; n_params] })
    }

    /// Random init: each weight uniform in `+-scale / sqrt(fan_in)`, biases
    /// zero.
    pub fn init_uniform(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        let mut off = 0;
        for l in 0..self.dims.len() - 1 {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let bound = scale / (n_in as f64).sqrt();
            for w in &mut self.params[off..off + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
            off += n_in * n_out + n_out;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces the whole parameter vector.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    /// Forward pass that retains per-layer activations for [`Mlp::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.dims[0] {
            return Err(Error::Contract(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        ensure_finite("network input", x)?;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x.to_vec());
        let mut off = 0;
        for l in 0..self.dims.len() - 1 {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let cur = &activations[l];
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &self.params[off + o * n_in..off + (o + 1) * n_in];
                let mut z = self.params[off + n_in * n_out + o];
                for (w, a) in row.iter().zip(cur.iter()) {
                    z += w * a;
                }
                next.push(self.acts[l].apply(z));
            }
            activations.push(next);
            off += n_in * n_out + n_out;
        }
        Ok(ForwardCache { activations })
    }

    /// Backpropagates `grad_output` (dLoss/dOutput at the cached input) and
    /// *accumulates* parameter gradients into `grad`, which must have
    /// `num_params` entries. Returns dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if grad.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "gradient buffer has {} entries, network needs {}",
                grad.len(),
                self.params.len()
            )));
        }
        if grad_output.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "output gradient has {} entries, network produces {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        let n_layers = self.dims.len() - 1;
        // Per-layer parameter offsets, front to back.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }

        let mut delta = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let outputs = &cache.activations[l + 1];
            let inputs = &cache.activations[l];
            // Through the activation.
            for (d, &a) in delta.iter_mut().zip(outputs.iter()) {
                *d *= self.acts[l].derivative_from_output(a);
            }
            // Weight and bias gradients.
            for o in 0..n_out {
                let d = delta[o];
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(inputs.iter()) {
                    *g += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            // Input gradient for the next (earlier) layer.
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &self.params[off + o * n_in..off + (o + 1) * n_in];
                for (p, &w) in prev.iter_mut().zip(row.iter()) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Plain SGD with momentum; deterministic given the gradient sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, n_params: usize) -> Sgd {
        Sgd { learning_rate, momentum, velocity: vec![0.0; n_params] }
    }

    /// One update: `v = momentum * v + g; p -= lr * v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        ensure_finite("gradient", grads)?;
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads.iter()) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_degenerate_shapes_and_sizes() {
        assert!(Mlp::new(&[4], Activation::Tanh, Activation::Identity).is_err());
        assert!(Mlp::new(&[4, 0, 2], Activation::Tanh, Activation::Identity).is_err());
        let net = Mlp::new(&[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let cache = net.forward_cached(&[1.0, 2.0, 3.0]).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        assert!(net.backward(&cache, &[1.0], &mut grad).is_err());
        assert!(net.backward(&cache, &[1.0, 1.0], &mut grad[..3]).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 2 -> 2 -> 1, weights chosen by hand.
        let mut net = Mlp::new(&[2, 2, 1], Activation::Tanh, Activation::Identity).unwrap();
        net.set_params(&[
            0.5, -1.0, // W1 row 0
            2.0, 0.25, // W1 row 1
            0.1, -0.2, // b1
            1.5, -0.5, // W2
            0.3,       // b2
        ])
        .unwrap();
        let x = [0.4, -0.6];
        let h0 = (0.5 * 0.4 + -1.0 * -0.6 + 0.1f64).tanh();
        let h1 = (2.0 * 0.4 + 0.25 * -0.6 + -0.2f64).tanh();
        let expect = 1.5 * h0 - 0.5 * h1 + 0.3;
        let y = net.forward(&x).unwrap();
        assert_abs_diff_eq!(y[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Tanh).unwrap();
        let mut rng = derive_rng(11, &[0]);
        net.init_uniform(&mut rng, 1.0);
        let x = [0.3, -0.8, 0.5];
        // Loss: weighted sum of outputs, so dLoss/dOutput is a constant.
        let w_loss = [0.7, -1.3];
        let loss = |net: &Mlp| -> f64 {
            let y = net.forward(&x).unwrap();
            w_loss.iter().zip(y.iter()).map(|(w, y)| w * y).sum()
        };

        let cache = net.forward_cached(&x).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        let grad_in = net.backward(&cache, &w_loss, &mut grad).unwrap();

        let eps = 1e-6;
        for i in 0..net.num_params() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + eps;
            let up = loss(&net);
            net.params_mut()[i] = orig - eps;
            let down = loss(&net);
            net.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(grad[i], numeric, epsilon = 1e-6);
        }
        // Input gradient too.
        for i in 0..3 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let up: f64 = w_loss.iter().zip(net.forward(&xp).unwrap()).map(|(w, y)| w * y).sum();
            let down: f64 = w_loss.iter().zip(net.forward(&xm).unwrap()).map(|(w, y)| w * y).sum();
            assert_abs_diff_eq!(grad_in[i], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn backward_accumulates_rather_than_overwrites() {
        let mut net = Mlp::new(&[2, 2], Activation::Identity, Activation::Identity).unwrap();
        let mut rng = derive_rng(11, &[1]);
        net.init_uniform(&mut rng, 1.0);
        let cache = net.forward_cached(&[1.0, 2.0]).unwrap();
        let mut once = vec![0.0; net.num_params()];
        net.backward(&cache, &[1.0, -1.0], &mut once).unwrap();
        let mut twice = vec![0.0; net.num_params()];
        net.backward(&cache, &[1.0, -1.0], &mut twice).unwrap();
        net.backward(&cache, &[1.0, -1.0], &mut twice).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
    }

    /// Solves a small least-squares problem by gradient descent on a linear
    /// network and checks the coefficients against the normal equations,
    /// solved independently by Gaussian elimination.
    #[test]
    fn linear_regression_recovers_normal_equation_solution() {
        let n_in = 4;
        let n_samples = 60;
        let mut rng = derive_rng(11, &[2]);
        let true_w = [1.5, -2.0, 0.5, 0.75];
        let true_b = -0.3;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n_samples {
            let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: f64 = true_w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + true_b;
            xs.push(x);
            ys.push(y);
        }

        // Normal equations on the augmented design matrix [X | 1].
        let d = n_in + 1;
        let mut ata = vec![vec![0.0; d]; d];
        let mut atb = vec![0.0; d];
        for (x, &y) in xs.iter().zip(ys.iter()) {
            let row: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * y;
            }
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..d {
            let pivot = (col..d).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, pivot);
            atb.swap(col, pivot);
            let diag = ata[col][col];
            for r in col + 1..d {
                let f = ata[r][col] / diag;
                for c in col..d {
                    ata[r][c] -= f * ata[col][c];
                }
                atb[r] -= f * atb[col];
            }
        }
        let mut exact = vec![0.0; d];
        for r in (0..d).rev() {
            let mut acc = atb[r];
            for c in r + 1..d {
                acc -= ata[r][c] * exact[c];
            }
            exact[r] = acc / ata[r][r];
        }

        // Gradient descent on the linear net.
        let mut net = Mlp::new(&[n_in, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut opt = Sgd::new(0.05, 0.9, net.num_params());
        for _ in 0..2000 {
            let mut grad = vec![0.0; net.num_params()];
            for (x, &y) in xs.iter().zip(ys.iter()) {
                let cache = net.forward_cached(x).unwrap();
                let err = cache.output()[0] - y;
                net.backward(&cache, &[2.0 * err / n_samples as f64], &mut grad).unwrap();
            }
            opt.step(net.params_mut(), &grad).unwrap();
        }
        for i in 0..n_in {
            assert_abs_diff_eq!(net.params()[i], exact[i], epsilon = 1e-6);
        }
        assert_abs_diff_eq!(net.params()[n_in], exact[n_in], epsilon = 1e-6);
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let mut a = Mlp::new(&[5, 3], Activation::Tanh, Activation::Identity).unwrap();
        let mut b = Mlp::new(&[5, 3], Activation::Tanh, Activation::Identity).unwrap();
        a.init_uniform(&mut derive_rng(3, &[7]), 1.0);
        b.init_uniform(&mut derive_rng(3, &[7]), 1.0);
        assert_eq!(a.params(), b.params());
    }
}
