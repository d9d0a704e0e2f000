//! MCMC kernels on the allocation space: random-scan Gibbs and the
//! Jain-Neal split-merge move with restricted Gibbs launch scans, plus the
//! hybrid schedule that interleaves the two.
//!
//! Both kernels target exp(log_posterior_unnorm). Cluster marginal
//! likelihoods are cached per chain, keyed by the cluster membership
//! bitmask, since Gibbs cost is dominated by block likelihoods.

use crate::error::{Error, Result};
use crate::math::ln_factorial;
use crate::model::{cluster_log_marglik, DataMatrix, HyperParams};
use crate::partition::{Allocation, StateKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gibbs,
    SplitMergeHybrid,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Gibbs => f.write_str("gibbs"),
            KernelKind::SplitMergeHybrid => f.write_str("split_merge_hybrid"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    pub kernel: KernelKind,
    pub n_iterations: usize,
    pub seed: u64,
    pub gibbs_cycles_per_splitmerge: usize,
    pub restricted_scan_count: usize,
    pub initial_allocation: StateKey,
}

impl ChainConfig {
    pub fn new(kernel: KernelKind, n_iterations: usize, seed: u64, init: &Allocation) -> Self {
        ChainConfig {
            kernel,
            n_iterations,
            seed,
            gibbs_cycles_per_splitmerge: 5,
            restricted_scan_count: 5,
            initial_allocation: init.key(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::InvalidInput("n_iterations must be >= 1".into()));
        }
        if self.gibbs_cycles_per_splitmerge < 1 || self.restricted_scan_count < 1 {
            return Err(Error::InvalidInput("cycle counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    pub kernel: Option<KernelKind>,
    pub seed: Option<u64>,
    pub n_iterations: Option<usize>,
    pub gibbs_cycles_per_splitmerge: Option<usize>,
    pub restricted_scan_count: Option<usize>,
    /// recording granularity note: one recorded state per component update
    pub recording: Option<String>,
    pub split_merge_proposed: u64,
    pub split_merge_accepted: u64,
}

/// Time-ordered visited states with the unnormalized log posterior cached
/// once per distinct state.
#[derive(Debug, Clone)]
pub struct Trace {
    states: Vec<StateKey>,
    log_post: HashMap<StateKey, f64>,
    meta: TraceMeta,
}

impl Trace {
    pub fn from_parts(
        states: Vec<StateKey>,
        log_post: HashMap<StateKey, f64>,
        meta: TraceMeta,
    ) -> Result<Self> {
        for s in &states {
            if !log_post.contains_key(s) {
                return Err(Error::InvalidInput(format!(
                    "state {s} has no cached log posterior"
                )));
            }
        }
        Ok(Trace {
            states,
            log_post,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[StateKey] {
        &self.states
    }

    pub fn log_post(&self, key: &StateKey) -> Option<f64> {
        self.log_post.get(key).copied()
    }

    pub fn log_post_table(&self) -> &HashMap<StateKey, f64> {
        &self.log_post
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }
}

/// Posterior evaluator with a per-chain cluster-likelihood cache keyed by
/// membership bitmask.
pub struct PosteriorEval<'a> {
    data: &'a DataMatrix,
    hyper: &'a HyperParams,
    cache: HashMap<u64, f64>,
}

impl<'a> PosteriorEval<'a> {
    pub fn new(data: &'a DataMatrix, hyper: &'a HyperParams) -> Result<Self> {
        hyper.validate()?;
        Ok(PosteriorEval {
            data,
            hyper,
            cache: HashMap::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.data.n_obs()
    }

    /// Sum over variables of the block marginal log likelihood for the
    /// cluster given by `mask`.
    pub fn cluster_ll(&mut self, mask: u64) -> f64 {
        debug_assert!(mask != 0);
        if let Some(&v) = self.cache.get(&mask) {
            return v;
        }
        let members: Vec<usize> = (0..self.data.n_obs()).filter(|i| mask >> i & 1 == 1).collect();
        let v = cluster_log_marglik(self.data, self.hyper, &members);
        self.cache.insert(mask, v);
        v
    }

    pub fn log_post(&mut self, alloc: &Allocation) -> f64 {
        let mut lp = crate::model::log_prior(alloc);
        for c in 1..=alloc.num_clusters() {
            lp += self.cluster_ll(alloc.member_mask(c as u8));
        }
        lp
    }
}

/// log of the allocation-prior factor that varies across candidate moves:
/// (C-1)! / (N+C-1)! times the product of cluster-size factorials.
fn log_prior_from_sizes(n: usize, sizes: &[usize]) -> f64 {
    let c = sizes.len();
    let mut lp = ln_factorial(c - 1) - (n as f64).ln() - ln_factorial(n + c - 1);
    for &s in sizes {
        lp += ln_factorial(s);
    }
    lp
}

/// Rebuilds a canonical allocation from cluster membership masks.
fn alloc_from_masks(n: usize, masks: &[u64]) -> Allocation {
    let mut raw = vec![0u32; n];
    for (c, &m) in masks.iter().enumerate() {
        for i in 0..n {
            if m >> i & 1 == 1 {
                raw[i] = c as u32 + 1;
            }
        }
    }
    crate::partition::canonicalize(&raw).expect("masks cover all observations")
}

fn sample_categorical_log(rng: &mut ChaCha8Rng, log_w: &[f64]) -> usize {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, &wk) in w.iter().enumerate() {
        u -= wk;
        if u <= 0.0 {
            return k;
        }
    }
    w.len() - 1
}

/// One full random-scan Gibbs sweep: each observation, in a fresh uniform
/// random order, is reassigned from its full conditional over joining any
/// cluster of the others or opening a singleton.
pub fn gibbs_sweep(
    eval: &mut PosteriorEval<'_>,
    alloc: &Allocation,
    rng: &mut ChaCha8Rng,
) -> Allocation {
    let n = eval.n();
    let mut masks: Vec<u64> = (1..=alloc.num_clusters())
        .map(|c| alloc.member_mask(c as u8))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        let j = rng.gen_range(0..=k);
        order.swap(k, j);
    }
    for &t in &order {
        let bit = 1u64 << t;
        // remove t
        let mut holding: Vec<u64> = Vec::with_capacity(masks.len() + 1);
        for &m in &masks {
            let m2 = m & !bit;
            if m2 != 0 {
                holding.push(m2);
            }
        }
        let base_ll: f64 = holding.iter().map(|&m| eval.cluster_ll(m)).sum();
        let base_sizes: Vec<usize> = holding.iter().map(|m| m.count_ones() as usize).collect();
        let k_existing = holding.len();
        let mut log_w = Vec::with_capacity(k_existing + 1);
        for k in 0..k_existing {
            let joined = holding[k] | bit;
            let ll = base_ll - eval.cluster_ll(holding[k]) + eval.cluster_ll(joined);
            let mut sizes = base_sizes.clone();
            sizes[k] += 1;
            log_w.push(ll + log_prior_from_sizes(n, &sizes));
        }
        // new singleton
        {
            let ll = base_ll + eval.cluster_ll(bit);
            let mut sizes = base_sizes.clone();
            sizes.push(1);
            log_w.push(ll + log_prior_from_sizes(n, &sizes));
        }
        let choice = sample_categorical_log(rng, &log_w);
        if choice < k_existing {
            holding[choice] |= bit;
        } else {
            holding.push(bit);
        }
        masks = holding;
    }
    alloc_from_masks(n, &masks)
}

/// Outcome of one split-merge proposal.
pub struct SplitMergeOutcome {
    pub alloc: Allocation,
    pub accepted: bool,
    pub was_split: bool,
}

/// One restricted Gibbs scan over `free` members between clusters A and B
/// (bitmasks; A always holds anchor i, B anchor j). When `force_target` is
/// set, assignments are forced to match the target masks instead of being
/// sampled, and the log probability of that forced path is accumulated.
/// Returns (mask_a, mask_b, log_prob_of_path).
#[allow(clippy::too_many_arguments)]
fn restricted_scan(
    eval: &mut PosteriorEval<'_>,
    free: &[usize],
    mut mask_a: u64,
    mut mask_b: u64,
    other_sizes: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
    force_target: Option<(u64, u64)>,
) -> (u64, u64, f64) {
    let mut log_prob = 0.0;
    for &k in free {
        let bit = 1u64 << k;
        let a0 = mask_a & !bit;
        let b0 = mask_b & !bit;
        // option 0: k joins A; option 1: k joins B
        let mut sizes_a: Vec<usize> = other_sizes.to_vec();
        sizes_a.push((a0 | bit).count_ones() as usize);
        sizes_a.push(b0.count_ones() as usize);
        let mut sizes_b: Vec<usize> = other_sizes.to_vec();
        sizes_b.push(a0.count_ones() as usize);
        sizes_b.push((b0 | bit).count_ones() as usize);
        let lw_a =
            eval.cluster_ll(a0 | bit) + eval.cluster_ll(b0) + log_prior_from_sizes(n, &sizes_a);
        let lw_b =
            eval.cluster_ll(a0) + eval.cluster_ll(b0 | bit) + log_prior_from_sizes(n, &sizes_b);
        let m = lw_a.max(lw_b);
        let pa = (lw_a - m).exp();
        let pb = (lw_b - m).exp();
        let prob_a = pa / (pa + pb);
        let to_a = match force_target {
            Some((ta, _)) => ta & bit != 0,
            None => rng.gen::<f64>() < prob_a,
        };
        if to_a {
            mask_a = a0 | bit;
            mask_b = b0;
            log_prob += prob_a.ln();
        } else {
            mask_a = a0;
            mask_b = b0 | bit;
            log_prob += (1.0 - prob_a).ln();
        }
    }
    (mask_a, mask_b, log_prob)
}

/// One Jain-Neal split-merge update: pick two distinct observations; if
/// co-clustered propose a split built from a random launch state refined by
/// restricted Gibbs scans, otherwise propose the merge. Metropolis-Hastings
/// acceptance uses the restricted-scan proposal density.
pub fn split_merge_update(
    eval: &mut PosteriorEval<'_>,
    alloc: &Allocation,
    restricted_scans: usize,
    rng: &mut ChaCha8Rng,
) -> SplitMergeOutcome {
    let n = eval.n();
    assert!(n >= 2, "split-merge requires at least two observations");
    let i = rng.gen_range(0..n);
    let j = loop {
        let j = rng.gen_range(0..n);
        if j != i {
            break j;
        }
    };
    let labels = alloc.labels();
    let ci = labels[i];
    let cj = labels[j];
    let bit_i = 1u64 << i;
    let bit_j = 1u64 << j;

    // clusters not involved in the move
    let mut other_masks: Vec<u64> = Vec::new();
    for c in 1..=alloc.num_clusters() as u8 {
        if c != ci && c != cj {
            other_masks.push(alloc.member_mask(c));
        }
    }
    let other_sizes: Vec<usize> = other_masks.iter().map(|m| m.count_ones() as usize).collect();
    let other_ll: f64 = other_masks.iter().map(|&m| eval.cluster_ll(m)).sum();

    let union_mask = alloc.member_mask(ci) | alloc.member_mask(cj);
    let free: Vec<usize> = (0..n)
        .filter(|&k| union_mask >> k & 1 == 1 && k != i && k != j)
        .collect();

    // random launch state: i alone with A, j with B, free members uniform
    let mut launch_a = bit_i;
    let mut launch_b = bit_j;
    for &k in &free {
        if rng.gen::<bool>() {
            launch_a |= 1 << k;
        } else {
            launch_b |= 1 << k;
        }
    }
    for _ in 0..restricted_scans {
        let (a, b, _) = restricted_scan(
            eval,
            &free,
            launch_a,
            launch_b,
            &other_sizes,
            n,
            rng,
            None,
        );
        launch_a = a;
        launch_b = b;
    }

    let split_prior_sizes = |ma: u64, mb: u64| {
        let mut sizes = other_sizes.clone();
        sizes.push(ma.count_ones() as usize);
        sizes.push(mb.count_ones() as usize);
        sizes
    };
    let merged_sizes = {
        let mut sizes = other_sizes.clone();
        sizes.push(union_mask.count_ones() as usize);
        sizes
    };
    let log_post_merged =
        other_ll + eval.cluster_ll(union_mask) + log_prior_from_sizes(n, &merged_sizes);

    if ci == cj {
        // propose a split: one final scan from the launch state gives the
        // proposal and its density; the reverse (merge) proposal is
        // deterministic
        let (prop_a, prop_b, log_q_fwd) = restricted_scan(
            eval,
            &free,
            launch_a,
            launch_b,
            &other_sizes,
            n,
            rng,
            None,
        );
        let log_post_split = other_ll
            + eval.cluster_ll(prop_a)
            + eval.cluster_ll(prop_b)
            + log_prior_from_sizes(n, &split_prior_sizes(prop_a, prop_b));
        let log_accept = log_post_split - log_post_merged - log_q_fwd;
        if log_accept >= 0.0 || rng.gen::<f64>().ln() < log_accept {
            let mut masks = other_masks;
            masks.push(prop_a);
            masks.push(prop_b);
            SplitMergeOutcome {
                alloc: alloc_from_masks(n, &masks),
                accepted: true,
                was_split: true,
            }
        } else {
            SplitMergeOutcome {
                alloc: alloc.clone(),
                accepted: false,
                was_split: true,
            }
        }
    } else {
        // propose the merge; the reverse split density is the probability
        // that a final restricted scan from the launch state reproduces the
        // current configuration
        let cur_a = alloc.member_mask(ci);
        let cur_b = alloc.member_mask(cj);
        let (_, _, log_q_rev) = restricted_scan(
            eval,
            &free,
            launch_a,
            launch_b,
            &other_sizes,
            n,
            rng,
            Some((cur_a, cur_b)),
        );
        let log_post_split = other_ll
            + eval.cluster_ll(cur_a)
            + eval.cluster_ll(cur_b)
            + log_prior_from_sizes(n, &split_prior_sizes(cur_a, cur_b));
        let log_accept = log_post_merged - log_post_split + log_q_rev;
        if log_accept >= 0.0 || rng.gen::<f64>().ln() < log_accept {
            let mut masks = other_masks;
            masks.push(union_mask);
            SplitMergeOutcome {
                alloc: alloc_from_masks(n, &masks),
                accepted: true,
                was_split: false,
            }
        } else {
            SplitMergeOutcome {
                alloc: alloc.clone(),
                accepted: false,
                was_split: false,
            }
        }
    }
}

/// Runs a chain and records one state per component update. For the hybrid
/// kernel each iteration contributes 1 split-merge state plus
/// `gibbs_cycles_per_splitmerge` Gibbs-sweep states.
pub fn run_chain(data: &DataMatrix, hyper: &HyperParams, config: &ChainConfig) -> Result<Trace> {
    config.validate()?;
    let init = StateKey::parse(config.initial_allocation.as_str())?;
    if init.n() != data.n_obs() {
        return Err(Error::InvalidInput(format!(
            "initial allocation covers {} observations, data has {}",
            init.n(),
            data.n_obs()
        )));
    }
    let mut eval = PosteriorEval::new(data, hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut alloc = init;
    let mut states = Vec::new();
    let mut log_post = HashMap::new();
    let mut meta = TraceMeta {
        kernel: Some(config.kernel),
        seed: Some(config.seed),
        n_iterations: Some(config.n_iterations),
        gibbs_cycles_per_splitmerge: Some(config.gibbs_cycles_per_splitmerge),
        restricted_scan_count: Some(config.restricted_scan_count),
        recording: Some("one state per component update".to_string()),
        ..TraceMeta::default()
    };
    let record =
        |alloc: &Allocation, eval: &mut PosteriorEval<'_>, states: &mut Vec<StateKey>, lp: &mut HashMap<StateKey, f64>| {
            let key = alloc.key();
            if !lp.contains_key(&key) {
                lp.insert(key.clone(), eval.log_post(alloc));
            }
            states.push(key);
        };
    for _ in 0..config.n_iterations {
        match config.kernel {
            KernelKind::Gibbs => {
                alloc = gibbs_sweep(&mut eval, &alloc, &mut rng);
                record(&alloc, &mut eval, &mut states, &mut log_post);
            }
            KernelKind::SplitMergeHybrid => {
                let out =
                    split_merge_update(&mut eval, &alloc, config.restricted_scan_count, &mut rng);
                meta.split_merge_proposed += 1;
                if out.accepted {
                    meta.split_merge_accepted += 1;
                }
                alloc = out.alloc;
                record(&alloc, &mut eval, &mut states, &mut log_post);
                for _ in 0..config.gibbs_cycles_per_splitmerge {
                    alloc = gibbs_sweep(&mut eval, &alloc, &mut rng);
                    record(&alloc, &mut eval, &mut states, &mut log_post);
                }
            }
        }
    }
    Trace::from_parts(states, log_post, meta)
}
