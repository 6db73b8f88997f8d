//! Cross-entropy search over flat parameter vectors.
//!
//! Each iteration samples a population around the current mean, scores every
//! candidate with a caller-supplied evaluation function, refits mean and
//! per-dimension spread to the elite fraction, and hands the ranked
//! population to a caller hook (which is where the concurrently trained
//! estimator picks up its on-policy data).
//!
//! Determinism: every candidate owns a seed stream derived from
//! `(iteration, candidate)`, evaluations are pure, and results are collected
//! in population order — so the outcome is bit-identical regardless of how
//! many worker threads score the population.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    /// Candidates per iteration.
    pub population: usize,
    /// Candidates kept for the refit.
    pub elites: usize,
    /// Search iterations.
    pub iterations: usize,
    /// Initial per-dimension sampling spread.
    pub init_std: f64,
    /// Spread floor, keeps the search from collapsing early.
    pub min_std: f64,
    /// Exploration noise added (in quadrature) to the refit spread, decayed
    /// linearly to zero over the run; the usual guard against premature
    /// variance collapse.
    pub extra_std: f64,
    /// Episodes averaged per candidate score.
    pub episodes_per_candidate: usize,
    /// L2 coefficient subtracted from raw returns: `fitness = return -
    /// l2 * |w|^2`.
    pub l2_penalty: f64,
    /// Hard clip applied to every sampled weight.
    pub weight_clip: f64,
}

impl Default for CemConfig {
    fn default() -> CemConfig {
        CemConfig {
            population: 24,
            elites: 6,
            iterations: 16,
            init_std: 0.5,
            min_std: 0.02,
            extra_std: 0.2,
            episodes_per_candidate: 2,
            l2_penalty: 1e-4,
            weight_clip: 4.0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.iterations == 0 || self.episodes_per_candidate == 0 {
            return Err(Error::Config("population, iterations, and episodes_per_candidate must be positive".into()));
        }
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::Config(format!(
                "elite count must be in [1, population], got {} of {}",
                self.elites, self.population
            )));
        }
        if !(self.init_std > 0.0) || !(self.min_std >= 0.0) || !(self.extra_std >= 0.0) {
            return Err(Error::Config(format!(
                "sampling spreads must be non-negative (init_std positive), got init {} / min {} / extra {}",
                self.init_std, self.min_std, self.extra_std
            )));
        }
        if !(self.weight_clip > 0.0) {
            return Err(Error::Config(format!("weight clip must be positive, got {}", self.weight_clip)));
        }
        if self.l2_penalty < 0.0 {
            return Err(Error::Config(format!("l2 penalty must be >= 0, got {}", self.l2_penalty)));
        }
        Ok(())
    }
}

/// One scored candidate. `aux` carries whatever the evaluator collected
/// alongside the return (rollout statistics, estimator windows, ...).
#[derive(Debug, Clone)]
pub struct Candidate<A> {
    pub weights: Vec<f64>,
    /// Raw mean return before the L2 penalty.
    pub mean_return: f64,
    /// Penalized score used for ranking.
    pub fitness: f64,
    pub aux: A,
}

/// Fitness summary of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemIterStats {
    pub iteration: usize,
    pub mean_fitness: f64,
    pub elite_mean_fitness: f64,
    pub best_fitness: f64,
    pub mean_std: f64,
}

/// Runs the search and returns the final mean vector plus per-iteration
/// statistics.
///
/// `shared` is read-only state for the evaluators (passed as `&S` so
/// candidates can be scored in parallel) and handed mutably to `refit_hook`
/// between iterations. `eval(shared, iteration, candidate_index, weights)`
/// must be pure given its arguments. `refit_hook(shared, iteration, ranked,
/// elite_count)` runs after ranking; `ranked` is sorted best-first.
/// `post_refit(mean)` regularizes the refit mean in place (weight shrink +
/// clip live there so the caller controls them).
pub fn optimize<S, A, E, H, P>(
    cfg: &CemConfig,
    n_params: usize,
    seed: u64,
    path: &[u64],
    shared: &mut S,
    eval: E,
    mut refit_hook: H,
    mut post_refit: P,
) -> Result<(Vec<f64>, Vec<CemIterStats>)>
where
    S: Sync,
    A: Send,
    E: Fn(&S, usize, usize, &[f64]) -> Result<(f64, A)> + Sync,
    H: FnMut(&mut S, usize, &[Candidate<A>]) -> Result<()>,
    P: FnMut(&mut [f64]),
{
    cfg.validate()?;
    if n_params == 0 {
        return Err(Error::Contract("cannot search over zero parameters".into()));
    }
    let mut mean = vec![0.0; n_params];
    let mut std = vec![cfg.init_std; n_params];
    let mut stats = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        // Sample the population (sequentially: cheap, and keeps the draws in
        // one well-defined order per candidate stream).
        let candidates: Vec<Vec<f64>> = (0..cfg.population)
            .map(|c| {
                let mut rng = derive_rng(seed, &[path, &[iter as u64, c as u64]].concat());
                sample_candidate(&mean, &std, cfg.weight_clip, &mut rng)
            })
            .collect();

        // Score in parallel; order is preserved by collecting into a Vec.
        let shared_ref: &S = shared;
        let scored: Vec<Result<(f64, A)>> = candidates
            .par_iter()
            .enumerate()
            .map(|(c, w)| eval(shared_ref, iter, c, w))
            .collect();

        let mut ranked: Vec<Candidate<A>> = Vec::with_capacity(cfg.population);
        for (c, (weights, result)) in candidates.into_iter().zip(scored).enumerate() {
            let (mean_return, aux) = result?;
            if !mean_return.is_finite() {
                return Err(Error::Numeric(format!(
                    "candidate {c} of iteration {iter} returned non-finite score {mean_return}"
                )));
            }
            let penalty = cfg.l2_penalty * weights.iter().map(|w| w * w).sum::<f64>();
            ranked.push(Candidate { fitness: mean_return - penalty, mean_return, weights, aux });
        }

        // Best first; ties broken by population index so ranking is total.
        let mut order: Vec<usize> = (0..ranked.len()).collect();
        order.sort_by(|&a, &b| ranked[b].fitness.total_cmp(&ranked[a].fitness).then(a.cmp(&b)));
        let ranked = reorder(ranked, &order);

        // Refit to the elites.
        let elites = &ranked[..cfg.elites];
        for (d, m) in mean.iter_mut().enumerate() {
            *m = elites.iter().map(|e| e.weights[d]).sum::<f64>() / cfg.elites as f64;
        }
        let decay = 1.0 - (iter as f64 + 1.0) / cfg.iterations as f64;
        let noise = cfg.extra_std * decay;
        for (d, s) in std.iter_mut().enumerate() {
            let m = mean[d];
            let var = elites.iter().map(|e| (e.weights[d] - m) * (e.weights[d] - m)).sum::<f64>()
                / cfg.elites as f64;
            *s = (var + noise * noise).sqrt().max(cfg.min_std);
        }
        post_refit(&mut mean);

        stats.push(CemIterStats {
            iteration: iter,
            mean_fitness: ranked.iter().map(|c| c.fitness).sum::<f64>() / ranked.len() as f64,
            elite_mean_fitness: elites.iter().map(|c| c.fitness).sum::<f64>() / elites.len() as f64,
            best_fitness: ranked[0].fitness,
            mean_std: std.iter().sum::<f64>() / std.len() as f64,
        });

        refit_hook(shared, iter, &ranked)?;
    }

    Ok((mean, stats))
}

fn sample_candidate(mean: &[f64], std: &[f64], clip: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    mean.iter()
        .zip(std.iter())
        .map(|(&m, &s)| {
            let z: f64 = StandardNormal.sample(rng);
            (m + s * z).clamp(-clip, clip)
        })
        .collect()
}

fn reorder<T>(mut items: Vec<T>, order: &[usize]) -> Vec<T> {
    let mut slots: Vec<Option<T>> = items.drain(..).map(Some).collect();
    order.iter().map(|&i| slots[i].take().expect("order is a permutation")).collect()
}
