//! Brute-force ground truth for desk-scale problems: the full posterior
//! table by enumeration, exact consensus matrices, and synthetic
//! Markov-chain fixtures (including a two-island construction whose minor
//! island is nearly inescapable) for calibration and power testing.

use crate::consensus::ConsensusMatrix;
use crate::diagnostics::PartitionScheme;
use crate::error::{Error, Result};
use crate::math::LogSumExp;
use crate::model::{DataMatrix, HyperParams};
use crate::partition::{enumerate_partitions_capped, Allocation, StateKey};
use crate::samplers::{PosteriorEval, Trace, TraceMeta};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Default enumeration cap for oracle runs; bell(10) = 115,975 keeps them
/// under a second. Larger N (up to 14) must be requested explicitly.
pub const DEFAULT_ORACLE_CAP: usize = 10;

/// Complete table of unnormalized log masses over all partitions, with the
/// log normalizing constant.
#[derive(Debug, Clone)]
pub struct MassTable {
    entries: Vec<(StateKey, f64)>,
    index: HashMap<StateKey, usize>,
    log_z: f64,
}

impl MassTable {
    pub fn from_entries(entries: Vec<(StateKey, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty mass table".into()));
        }
        let mut lse = LogSumExp::new();
        let mut index = HashMap::new();
        for (i, (k, lm)) in entries.iter().enumerate() {
            if !lm.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite log mass for {k}")));
            }
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate state {k}")));
            }
            lse.add(*lm);
        }
        let log_z = lse.value();
        Ok(MassTable {
            entries,
            index,
            log_z,
        })
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(StateKey, f64)] {
        &self.entries
    }

    pub fn log_mass(&self, key: &StateKey) -> Option<f64> {
        self.index.get(key).map(|&i| self.entries[i].1)
    }

    /// Normalized probability of a state (0 for unknown states).
    pub fn prob(&self, key: &StateKey) -> f64 {
        self.log_mass(key).map_or(0.0, |lm| (lm - self.log_z).exp())
    }

    /// States sorted by decreasing mass, ties broken by lexicographic key.
    pub fn ranked(&self) -> Vec<(&StateKey, f64)> {
        let mut v: Vec<(&StateKey, f64)> =
            self.entries.iter().map(|(k, lm)| (k, *lm)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        v
    }

    /// True top-K singleton partition scheme from the table.
    pub fn top_k_scheme(&self, k: usize) -> Result<PartitionScheme> {
        let ranked = self.ranked();
        if ranked.len() < k {
            return Err(Error::InsufficientStates {
                needed: k,
                seen: ranked.len(),
            });
        }
        let sets = ranked[..k].iter().map(|(s, _)| vec![(*s).clone()]).collect();
        PartitionScheme::from_log_masses(sets, |key| self.log_mass(key).unwrap())
    }

    /// Exact independent draw from the normalized table.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> &StateKey {
        let mut u = rng.gen::<f64>();
        for (k, lm) in &self.entries {
            u -= (lm - self.log_z).exp();
            if u <= 0.0 {
                return k;
            }
        }
        &self.entries.last().unwrap().0
    }

    /// Total-variation distance between the table and empirical state
    /// frequencies.
    pub fn tv_distance(&self, counts: &HashMap<StateKey, usize>, total: usize) -> f64 {
        let mut tv = 0.0;
        for (k, lm) in &self.entries {
            let emp = counts.get(k).copied().unwrap_or(0) as f64 / total as f64;
            tv += (emp - (lm - self.log_z).exp()).abs();
        }
        // states outside the table (should not happen for complete tables)
        for (k, &c) in counts {
            if !self.index.contains_key(k) {
                tv += c as f64 / total as f64;
            }
        }
        tv / 2.0
    }
}

/// Full posterior table over every partition of the data's observations.
pub fn exact_posterior_table(
    data: &DataMatrix,
    hyper: &HyperParams,
    cap: usize,
) -> Result<MassTable> {
    let n = data.n_obs();
    let mut eval = PosteriorEval::new(data, hyper)?;
    let entries: Vec<(StateKey, f64)> = enumerate_partitions_capped(n, cap)?
        .map(|alloc| {
            let lp = eval.log_post(&alloc);
            (alloc.key(), lp)
        })
        .collect();
    MassTable::from_entries(entries)
}

/// Exact consensus matrix from a complete mass table.
pub fn exact_consensus(table: &MassTable) -> Result<ConsensusMatrix> {
    let n = StateKey::parse(table.entries()[0].0.as_str())?.n();
    let mut rho = ConsensusMatrix::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (k, lm) in table.entries() {
                let alloc = StateKey::parse(k.as_str())?;
                if alloc.co_clustered(i, j) {
                    acc += (lm - table.log_z()).exp();
                }
            }
            rho.set(i, j, acc);
        }
    }
    Ok(rho)
}

/// A finite labeled chain with an explicit transition matrix and its
/// stationary distribution.
#[derive(Debug, Clone)]
pub struct ChainFixture {
    states: Vec<StateKey>,
    p: DMatrix<f64>,
    pi: DVector<f64>,
}

impl ChainFixture {
    pub fn new(states: Vec<StateKey>, p: DMatrix<f64>, pi: DVector<f64>) -> Result<Self> {
        let m = states.len();
        if p.nrows() != m || p.ncols() != m || pi.len() != m {
            return Err(Error::InvalidInput("fixture dimension mismatch".into()));
        }
        for i in 0..m {
            let row: f64 = p.row(i).sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "row {i} of P sums to {row}, not 1"
                )));
            }
        }
        if pi.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidInput("stationary masses must be positive".into()));
        }
        let err = (pi.transpose() * &p - pi.transpose()).amax();
        if err > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "pi' P != pi' (max error {err:.2e})"
            )));
        }
        Ok(ChainFixture { states, p, pi })
    }

    pub fn states(&self) -> &[StateKey] {
        &self.states
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn stationary_of(&self, key: &StateKey) -> Option<f64> {
        self.states
            .iter()
            .position(|s| s == key)
            .map(|i| self.pi[i])
    }
}

/// Stationary vector of a row-stochastic matrix: solves pi' (P - I) = 0
/// with the normalization sum(pi) = 1 substituted for one equation.
pub fn stationary_from_p(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(m, m);
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidInput("transition matrix has no unique stationary vector".into()))?;
    if pi.iter().any(|&x| x < -1e-9) {
        return Err(Error::InvalidInput(
            "stationary solve produced negative mass; chain may be reducible".into(),
        ));
    }
    Ok(pi.map(|x| x.max(0.0)))
}

/// Parameters of the two-island fixture.
pub struct TwoIslandFixture {
    pub fixture: ChainFixture,
    /// indices of minor-island states
    pub minor: Vec<usize>,
    /// indices of major-island states
    pub major: Vec<usize>,
    /// per-step escape probability from any minor state
    pub escape_prob: f64,
}

/// Builds an adversarial chain over partitions of 5 observations: a minor
/// island of 10 states carrying total stationary mass epsilon and a major
/// island of 10 states carrying the rest, bridged by proposals so rare
/// that the expected first escape time exceeds 1e6 steps. Within-island
/// moves are Metropolis steps on the exact target, so the stationary
/// distribution is known exactly by construction. Minor-island states all
/// co-cluster observations 1 and 2, which keeps the co-occurrence CV
/// diagnostic quiet on a trapped run.
pub fn adversarial_two_island_fixture(epsilon: f64) -> Result<TwoIslandFixture> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be in (0, 0.5), got {epsilon}"
        )));
    }
    // the minor island is deliberately larger than the major one so that a
    // 10-set diagnostic scheme pairing minor and major states can still
    // leave some minor (visited) states uncovered; a scheme covering every
    // visited state would make the tour covariance exactly singular
    const MINOR: usize = 12;
    const MAJOR: usize = 10;
    const BRIDGE: f64 = 1e-7;

    let mut minor_states = Vec::new();
    let mut major_states = Vec::new();
    for alloc in crate::partition::enumerate_partitions(5)? {
        if alloc.co_clustered(0, 1) {
            if minor_states.len() < MINOR {
                minor_states.push(alloc.key());
            }
        } else if major_states.len() < MAJOR {
            major_states.push(alloc.key());
        }
        if minor_states.len() == MINOR && major_states.len() == MAJOR {
            break;
        }
    }
    let m = MINOR + MAJOR;
    let mut states = minor_states;
    states.extend(major_states);

    // unequal masses inside each island; ratios chosen so that a scheme
    // pairing minor state i with major state i sees wildly uneven f_i
    let minor_w: Vec<f64> = (0..MINOR).map(|i| (i + 1) as f64).collect();
    let major_w: Vec<f64> = (0..MAJOR).map(|i| (MAJOR - i) as f64 * (i as f64 + 0.5)).collect();
    let minor_total: f64 = minor_w.iter().sum();
    let major_total: f64 = major_w.iter().sum();
    let mut pi = DVector::zeros(m);
    for i in 0..MINOR {
        pi[i] = epsilon * minor_w[i] / minor_total;
    }
    for i in 0..MAJOR {
        pi[MINOR + i] = (1.0 - epsilon) * major_w[i] / major_total;
    }

    // Metropolis kernel: propose uniformly within the island with
    // probability 1 - BRIDGE, or the bridge partner across islands (first
    // MAJOR minor states only) with probability BRIDGE; accept with
    // min(1, pi_j / pi_i); remainder stays.
    let island_of = |s: usize| if s < MINOR { 0 } else { 1 };
    let partner = |s: usize| -> Option<usize> {
        if s < MAJOR {
            Some(s + MINOR)
        } else if s >= MINOR {
            Some(s - MINOR)
        } else {
            None
        }
    };
    let island_size = |s: usize| if s < MINOR { MINOR } else { MAJOR };
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut stay = 1.0f64;
        for j in 0..m {
            if j == i {
                continue;
            }
            let q = if island_of(j) == island_of(i) {
                (1.0 - BRIDGE) / (island_size(i) as f64 - 1.0)
            } else if partner(i) == Some(j) {
                BRIDGE
            } else {
                0.0
            };
            if q > 0.0 {
                let accept = (pi[j] / pi[i]).min(1.0);
                p[(i, j)] = q * accept;
                stay -= p[(i, j)];
            }
        }
        p[(i, i)] = stay;
    }

    let fixture = ChainFixture::new(states, p, pi)?;
    Ok(TwoIslandFixture {
        fixture,
        minor: (0..MINOR).collect(),
        major: (MINOR..m).collect(),
        escape_prob: BRIDGE,
    })
}

/// Simulates the fixture chain exactly and packages the run as a Trace,
/// caching ln(pi) (plus an arbitrary constant, since masses are known only
/// up to normalization) as the per-state log posterior.
pub fn simulate_fixture_chain(
    fixture: &ChainFixture,
    n: usize,
    start: usize,
    seed: u64,
) -> Result<Trace> {
    let m = fixture.states.len();
    if start >= m {
        return Err(Error::InvalidInput(format!("start state {start} out of range")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    const LOG_Z_OFFSET: f64 = 2.0; // masses are unnormalized on purpose
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = start;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.gen::<f64>();
        let row = fixture.p.row(cur);
        let mut next = m - 1;
        for j in 0..m {
            u -= row[j];
            if u <= 0.0 {
                next = j;
                break;
            }
        }
        cur = next;
        states.push(fixture.states[cur].clone());
    }
    let log_post: HashMap<StateKey, f64> = fixture
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), fixture.pi[i].ln() + LOG_Z_OFFSET))
        .collect();
    Trace::from_parts(states, log_post, TraceMeta::default())
}

/// Draws `count` exact posterior samples from a mass table as a Trace-like
/// list of allocations.
pub fn sample_exact(table: &MassTable, count: usize, seed: u64) -> Vec<Allocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| StateKey::parse(table.sample(&mut rng).as_str()).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate_data;
    use crate::partition::canonicalize;
    use approx::assert_abs_diff_eq;

    fn hp() -> HyperParams {
        HyperParams {
            mu: 0.0,
            sigma2: 0.25,
            sigma2_eta: 0.2,
            sigma2_theta: 4.0,
            p: 0.3,
        }
    }

    #[test]
    fn table_n1_and_n3_normalize() {
        let hyper = hp();
        let data = simulate_data(&hyper, &Allocation::one_cluster(1), 2, &[2], 1).unwrap();
        let table = exact_posterior_table(&data, &hyper, DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(table.len(), 1);
        assert_abs_diff_eq!(table.prob(&Allocation::one_cluster(1).key()), 1.0, epsilon = 1e-12);

        let alloc = canonicalize(&[1, 1, 2]).unwrap();
        let data = simulate_data(&hyper, &alloc, 3, &[2, 2, 2], 2).unwrap();
        let table = exact_posterior_table(&data, &hyper, DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(table.len(), 5);
        let total: f64 = table.entries().iter().map(|(k, _)| table.prob(k)).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn table_over_cap_is_refused() {
        let hyper = hp();
        let alloc = Allocation::one_cluster(4);
        let data = simulate_data(&hyper, &alloc, 1, &[1; 4], 0).unwrap();
        assert!(matches!(
            exact_posterior_table(&data, &hyper, 3),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn consensus_point_mass_and_uniform() {
        // point mass on [1,1,2]
        let key = canonicalize(&[1, 1, 2]).unwrap().key();
        let table = MassTable::from_entries(vec![(key, 0.0)]).unwrap();
        let rho = exact_consensus(&table).unwrap();
        assert_eq!(rho.get(0, 1), 1.0);
        assert_eq!(rho.get(0, 2), 0.0);

        // uniform over the 5 partitions of 3: any fixed pair co-clusters
        // in 2 of them (brute-force over the listing)
        let entries: Vec<(StateKey, f64)> = crate::partition::enumerate_partitions(3)
            .unwrap()
            .map(|a| (a.key(), 0.0))
            .collect();
        let table = MassTable::from_entries(entries).unwrap();
        let rho = exact_consensus(&table).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_abs_diff_eq!(rho.get(i, j), 2.0 / 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn consensus_matches_double_loop_definition() {
        let hyper = hp();
        let alloc = canonicalize(&[1, 1, 2, 3, 2]).unwrap();
        let data = simulate_data(&hyper, &alloc, 3, &[2; 5], 5).unwrap();
        let table = exact_posterior_table(&data, &hyper, DEFAULT_ORACLE_CAP).unwrap();
        let rho = exact_consensus(&table).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for (k, _) in table.entries() {
                    let a = StateKey::parse(k.as_str()).unwrap();
                    if a.co_clustered(i, j) {
                        acc += table.prob(k);
                    }
                }
                assert_abs_diff_eq!(rho.get(i, j), acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_island_stationary_mass() {
        let two = adversarial_two_island_fixture(0.01).unwrap();
        let minor_mass: f64 = two.minor.iter().map(|&i| two.fixture.pi[i]).sum();
        assert_abs_diff_eq!(minor_mass, 0.01, epsilon = 1e-10);
        // pi' P = pi' residual check
        let resid = (two.fixture.pi.transpose() * two.fixture.transition_matrix()
            - two.fixture.pi.transpose())
        .amax();
        assert!(resid < 1e-10, "residual {resid}");
        // independent route: direct stationary solve (cond ~ 1/bridge, so
        // the tolerance here is looser than the residual check)
        let pi2 = stationary_from_p(two.fixture.transition_matrix()).unwrap();
        for i in 0..two.fixture.states().len() {
            assert_abs_diff_eq!(pi2[i], two.fixture.pi[i], epsilon = 1e-6);
        }
        assert!(two.escape_prob < 1e-6);
    }

    #[test]
    fn trapped_run_matches_island_conditional_distribution() {
        let two = adversarial_two_island_fixture(0.01).unwrap();
        let n = 200_000;
        let trace = simulate_fixture_chain(&two.fixture, n, 0, 42).unwrap();
        let mut counts: HashMap<&StateKey, usize> = HashMap::new();
        for s in trace.states() {
            *counts.entry(s).or_insert(0) += 1;
        }
        // never escaped
        for &i in &two.major {
            assert!(!counts.contains_key(&two.fixture.states()[i]));
        }
        // island-conditional frequencies
        let minor_mass: f64 = two.minor.iter().map(|&i| two.fixture.pi[i]).sum();
        let mut tv = 0.0;
        for &i in &two.minor {
            let cond = two.fixture.pi[i] / minor_mass;
            let emp = counts
                .get(&two.fixture.states()[i])
                .copied()
                .unwrap_or(0) as f64
                / n as f64;
            tv += (cond - emp).abs();
        }
        assert!(tv / 2.0 < 0.02, "tv = {}", tv / 2.0);
    }

    #[test]
    fn fixture_chain_basics() {
        // identity chain: constant trace
        let key = canonicalize(&[1, 1]).unwrap().key();
        let key2 = canonicalize(&[1, 2]).unwrap().key();
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        // identity is not irreducible, but the constructor only checks
        // stationarity; use a point start
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let fx = ChainFixture::new(vec![key.clone(), key2.clone()], p, pi).unwrap();
        let t = simulate_fixture_chain(&fx, 50, 0, 1).unwrap();
        assert!(t.states().iter().all(|s| *s == key));

        // symmetric 2-state switch chain: switch rate 0.5 within 3 SEs
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let fx = ChainFixture::new(vec![key.clone(), key2], p, pi).unwrap();
        let n = 100_000;
        let t = simulate_fixture_chain(&fx, n, 0, 7).unwrap();
        let switches = t
            .states()
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count();
        let rate = switches as f64 / (n - 1) as f64;
        let se = (0.25f64 / (n - 1) as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * se, "rate {rate}");
    }

    #[test]
    fn well_mixed_fixture_matches_stationary() {
        // 5-state chain: Metropolis on unequal masses with uniform proposal
        let keys: Vec<StateKey> = crate::partition::enumerate_partitions(3)
            .unwrap()
            .map(|a| a.key())
            .collect();
        let masses = [0.4f64, 0.25, 0.15, 0.12, 0.08];
        let m = 5;
        let mut p = DMatrix::zeros(m, m);
        for i in 0..m {
            let mut stay = 1.0;
            for j in 0..m {
                if i == j {
                    continue;
                }
                let q = 1.0 / (m as f64 - 1.0);
                let acc = (masses[j] / masses[i]).min(1.0);
                p[(i, j)] = q * acc;
                stay -= p[(i, j)];
            }
            p[(i, i)] = stay;
        }
        let pi = DVector::from_row_slice(&masses);
        let fx = ChainFixture::new(keys, p, pi).unwrap();
        let n = 1_000_000;
        let t = simulate_fixture_chain(&fx, n, 0, 3).unwrap();
        let mut counts: HashMap<StateKey, usize> = HashMap::new();
        for s in t.states() {
            *counts.entry(s.clone()).or_insert(0) += 1;
        }
        let mut tv = 0.0;
        for (i, s) in fx.states().iter().enumerate() {
            let emp = counts.get(s).copied().unwrap_or(0) as f64 / n as f64;
            tv += (emp - fx.pi[i]).abs();
        }
        assert!(tv / 2.0 < 0.01, "tv = {}", tv / 2.0);
    }

    #[test]
    fn sample_exact_frequencies() {
        let hyper = hp();
        let alloc = canonicalize(&[1, 1, 2]).unwrap();
        let data = simulate_data(&hyper, &alloc, 3, &[2, 2, 2], 2).unwrap();
        let table = exact_posterior_table(&data, &hyper, DEFAULT_ORACLE_CAP).unwrap();
        let draws = sample_exact(&table, 100_000, 9);
        let mut counts: HashMap<StateKey, usize> = HashMap::new();
        for a in &draws {
            *counts.entry(a.key()).or_insert(0) += 1;
        }
        assert!(table.tv_distance(&counts, draws.len()) < 0.01);
    }
}
