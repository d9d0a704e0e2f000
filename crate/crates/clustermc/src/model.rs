//! The spike-slab hierarchical clustering model.
//!
//! Observations carry replicated measurements on V variables. Given an
//! allocation, each (variable, cluster) block is marginally a two-component
//! mixture: with probability p the block gains a shared random mean shift
//! (variance sigma2_theta), and within the block each observation carries a
//! shared random effect (variance sigma2_eta) on top of replicate noise
//! (variance sigma2). All latent effects integrate out in closed form to a
//! Gaussian with compound-symmetry covariance, so the posterior lives on
//! allocations alone.

use crate::error::{Error, Result};
use crate::math::{ln_factorial, log_add_exp};
use crate::partition::Allocation;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Replicated measurements: V variables by N observations, with a per-
/// observation replicate count shared across variables.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    /// values[v][i][r]: variable v, observation i, replicate r
    values: Vec<Vec<Vec<f64>>>,
    ids: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: Vec<Vec<Vec<f64>>>, ids: Vec<String>) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(Error::InvalidInput(
                "data must have at least one variable and one observation".into(),
            ));
        }
        let n = values[0].len();
        if ids.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} observation ids for {} observations",
                ids.len(),
                n
            )));
        }
        for (v, var) in values.iter().enumerate() {
            if var.len() != n {
                return Err(Error::InvalidInput(format!(
                    "variable {v} has {} observations, expected {n}",
                    var.len()
                )));
            }
            for (i, reps) in var.iter().enumerate() {
                if reps.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "observation {i} has no replicates for variable {v}"
                    )));
                }
                if reps.len() != values[0][i].len() {
                    return Err(Error::InvalidInput(format!(
                        "replicate count mismatch at variable {v}, observation {i}"
                    )));
                }
                if reps.iter().any(|y| !y.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "non-finite value at variable {v}, observation {i}"
                    )));
                }
            }
        }
        Ok(DataMatrix { values, ids })
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn n_obs(&self) -> usize {
        self.values[0].len()
    }

    pub fn replicate_count(&self, i: usize) -> usize {
        self.values[0][i].len()
    }

    pub fn replicates(&self, v: usize, i: usize) -> &[f64] {
        &self.values[v][i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// The five model hyperparameters fixed by empirical Bayes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub mu: f64,
    pub sigma2: f64,
    pub sigma2_eta: f64,
    pub sigma2_theta: f64,
    pub p: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |n: &str, v: f64| Error::InvalidHyperParameter(format!("{n} = {v}"));
        if !self.mu.is_finite() {
            return Err(bad("mu", self.mu));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma2_eta", self.sigma2_eta),
            ("sigma2_theta", self.sigma2_theta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(name, v));
            }
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(bad("p", self.p));
        }
        Ok(())
    }
}

/// Log of the multinomial-Dirichlet allocation prior
/// (C-1)! N_1! ... N_C! / (N (N+C-1)!), unnormalized over set partitions.
pub fn log_prior(alloc: &Allocation) -> f64 {
    let n = alloc.n();
    let c = alloc.num_clusters();
    let mut lp = ln_factorial(c - 1) - (n as f64).ln() - ln_factorial(n + c - 1);
    for size in alloc.cluster_sizes() {
        lp += ln_factorial(size);
    }
    lp
}

/// Sufficient statistics of one (variable, cluster) block, centered at mu.
struct BlockStats {
    n_total: usize,
    /// per member: (replicate count, sum, sum of squares) of y - mu
    per_obs: Vec<(usize, f64, f64)>,
}

fn block_stats(data: &DataMatrix, v: usize, members: &[usize], mu: f64) -> BlockStats {
    let mut per_obs = Vec::with_capacity(members.len());
    let mut n_total = 0;
    for &i in members {
        let reps = data.replicates(v, i);
        let mut s = 0.0;
        let mut ss = 0.0;
        for &y in reps {
            let x = y - mu;
            s += x;
            ss += x * x;
        }
        per_obs.push((reps.len(), s, ss));
        n_total += reps.len();
    }
    BlockStats { n_total, per_obs }
}

/// Log density of the block under the compound-symmetry Gaussian with
/// per-observation shared effect sigma2_eta and, when `slab` is set, an
/// additional block-wide shift variance sigma2_theta. Uses the rank-one
/// determinant/quadratic-form updates, O(block size).
fn log_block_normal(stats: &BlockStats, hyper: &HyperParams, slab: bool) -> f64 {
    let s2 = hyper.sigma2;
    let s2e = hyper.sigma2_eta;
    let mut log_det = 0.0;
    let mut quad = 0.0;
    let mut ut_u = 0.0; // 1' S0^-1 1
    let mut ut_x = 0.0; // 1' S0^-1 (y - mu)
    for &(ni, s, ss) in &stats.per_obs {
        let d = s2 + ni as f64 * s2e;
        log_det += (ni as f64 - 1.0) * s2.ln() + d.ln();
        quad += (ss - s2e / d * s * s) / s2;
        ut_u += ni as f64 / d;
        ut_x += s / d;
    }
    if slab {
        let s2t = hyper.sigma2_theta;
        let denom = 1.0 + s2t * ut_u;
        log_det += denom.ln();
        quad -= s2t * ut_x * ut_x / denom;
    }
    -0.5 * (stats.n_total as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// Log marginal likelihood contribution of one cluster (all variables),
/// with the Bernoulli slab indicator mixed out per (variable, cluster)
/// block in log space.
pub fn cluster_log_marglik(data: &DataMatrix, hyper: &HyperParams, members: &[usize]) -> f64 {
    let lp = hyper.p.ln();
    let lq = (1.0 - hyper.p).ln();
    let mut total = 0.0;
    for v in 0..data.n_vars() {
        let stats = block_stats(data, v, members, hyper.mu);
        let slab = log_block_normal(&stats, hyper, true);
        let spike = log_block_normal(&stats, hyper, false);
        total += log_add_exp(lp + slab, lq + spike);
    }
    total
}

/// Log marginal likelihood of the whole dataset under an allocation, with
/// all latent effects integrated out.
pub fn log_marglik(data: &DataMatrix, alloc: &Allocation, hyper: &HyperParams) -> Result<f64> {
    hyper.validate()?;
    if alloc.n() != data.n_obs() {
        return Err(Error::InvalidInput(format!(
            "allocation covers {} observations, data has {}",
            alloc.n(),
            data.n_obs()
        )));
    }
    let mut total = 0.0;
    for c in 1..=alloc.num_clusters() {
        total += cluster_log_marglik(data, hyper, &alloc.members(c as u8));
    }
    Ok(total)
}

/// Unnormalized log posterior: log prior + log marginal likelihood.
pub fn log_posterior_unnorm(
    data: &DataMatrix,
    alloc: &Allocation,
    hyper: &HyperParams,
) -> Result<f64> {
    Ok(log_prior(alloc) + log_marglik(data, alloc, hyper)?)
}

/// The empirical-Bayes objective: the clustering-free marginal, i.e. every
/// observation in its own block, exact per (variable, observation) block
/// so that the within-observation correlation from the shared effect is
/// kept. Equals the marginal likelihood at the all-singletons allocation.
pub fn eb_objective(data: &DataMatrix, hyper: &HyperParams) -> Result<f64> {
    log_marglik(data, &Allocation::singletons(data.n_obs()), hyper)
}

/// Draws a dataset from the generative model: per (variable, cluster)
/// block an independent Bernoulli(p) slab indicator and N(0, sigma2_theta)
/// shift, per member a N(0, sigma2_eta) offset, then replicate noise.
/// Deterministic given the seed.
pub fn simulate_data(
    hyper: &HyperParams,
    alloc: &Allocation,
    n_vars: usize,
    replicates: &[usize],
    seed: u64,
) -> Result<DataMatrix> {
    hyper.validate()?;
    if replicates.len() != alloc.n() {
        return Err(Error::InvalidInput(
            "replicate counts must match allocation length".into(),
        ));
    }
    if n_vars == 0 || replicates.iter().any(|&r| r == 0) {
        return Err(Error::InvalidInput(
            "need at least one variable and one replicate per observation".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_norm = Normal::new(0.0, 1.0).unwrap();
    let n = alloc.n();
    let mut values = vec![vec![Vec::new(); n]; n_vars];
    for v in 0..n_vars {
        for c in 1..=alloc.num_clusters() {
            let gamma = rng.gen::<f64>() < hyper.p;
            let theta = std_norm.sample(&mut rng) * hyper.sigma2_theta.sqrt();
            let shift = if gamma { theta } else { 0.0 };
            for i in alloc.members(c as u8) {
                let eta = std_norm.sample(&mut rng) * hyper.sigma2_eta.sqrt();
                let mean = hyper.mu + shift + eta;
                values[v][i] = (0..replicates[i])
                    .map(|_| mean + std_norm.sample(&mut rng) * hyper.sigma2.sqrt())
                    .collect();
            }
        }
    }
    let ids = (1..=n).map(|i| format!("obs{i}")).collect();
    DataMatrix::new(values, ids)
}
