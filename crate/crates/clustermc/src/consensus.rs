//! Consensus clustering summaries: the pairwise co-occurrence matrix with
//! regenerative standard errors, the MAP allocation, and cumulative-mass
//! curves.

use crate::error::{Error, Result};
use crate::partition::{Allocation, StateKey};
use crate::regen::{rs_mean, rs_var, GSpec, Tours};
use crate::samplers::Trace;

/// Symmetric N x N matrix of co-occurrence probabilities with unit
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    n: usize,
    rho: Vec<f64>, // row-major
}

impl ConsensusMatrix {
    pub fn new(n: usize) -> Self {
        let mut m = ConsensusMatrix {
            n,
            rho: vec![0.0; n * n],
        };
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.rho[i * self.n + j] = v;
        self.rho[j * self.n + i] = v;
    }

    pub fn max_abs_diff(&self, other: &ConsensusMatrix) -> f64 {
        self.rho
            .iter()
            .zip(&other.rho)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// RS estimate of every co-occurrence probability over the tour window,
/// with a matching standard-error matrix from the univariate tour variance
/// estimator.
pub fn co_occurrence_rs(
    trace: &Trace,
    tours: &Tours,
) -> Result<(ConsensusMatrix, ConsensusMatrix)> {
    if tours.num_tours() < 2 {
        return Err(Error::InsufficientRegeneration(
            "co-occurrence standard errors need at least 2 tours".into(),
        ));
    }
    let first = StateKey::parse(trace.states()[0].as_str())?;
    let n = first.n();
    let mut rho = ConsensusMatrix::new(n);
    let mut se = ConsensusMatrix::new(n);
    for i in 0..n {
        se.set(i, i, 0.0);
    }
    let r = tours.num_tours() as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let g = GSpec::scalar(move |s: &StateKey| {
                let alloc = StateKey::parse(s.as_str()).expect("canonical trace key");
                alloc.co_clustered(i, j) as u8 as f64
            });
            rho.set(i, j, rs_mean(trace, tours, &g)[0]);
            se.set(i, j, (rs_var(trace, tours, &g)? / r).sqrt());
        }
    }
    Ok((rho, se))
}

/// The visited state with the highest cached log posterior; ties go to the
/// lexicographically smallest key.
pub fn map_allocation(trace: &Trace) -> Result<(Allocation, f64)> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let (key, lp) = trace
        .log_post_table()
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| b.0.cmp(a.0)))
        .unwrap();
    Ok((StateKey::parse(key.as_str())?, *lp))
}

/// Sorts (state, mass) pairs by decreasing mass and returns the running
/// normalized cumulative probability per rank.
pub fn cumulative_mass_curve(masses: &[(StateKey, f64)]) -> Result<Vec<(usize, f64)>> {
    if masses.is_empty() {
        return Err(Error::InvalidInput("empty mass table".into()));
    }
    let mut sorted: Vec<&(StateKey, f64)> = masses.iter().collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let total: f64 = sorted.iter().map(|(_, m)| m).sum();
    let mut acc = 0.0;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(rank, (_, m))| {
            acc += m / total;
            (rank + 1, acc)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regen::find_tours;
    use crate::samplers::TraceMeta;
    use approx::assert_abs_diff_eq;
    use std::collections::HashMap;

    fn trace_of(names: &[&str], lp: &[(&str, f64)]) -> Trace {
        let states: Vec<StateKey> = names.iter().map(|n| StateKey::parse(n).unwrap().key()).collect();
        let mut table = HashMap::new();
        for (n, v) in lp {
            table.insert(StateKey::parse(n).unwrap().key(), *v);
        }
        Trace::from_parts(states, table, TraceMeta::default()).unwrap()
    }

    #[test]
    fn single_repeated_allocation() {
        let t = trace_of(&["112", "112", "112"], &[("112", -1.0)]);
        let tours = find_tours(&t, &StateKey::parse("112").unwrap().key()).unwrap();
        let (rho, se) = co_occurrence_rs(&t, &tours).unwrap();
        assert_abs_diff_eq!(rho.get(0, 1), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.get(0, 2), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.get(1, 2), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.get(2, 2), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(se.get(0, 1), 0.0, epsilon = 1e-15);
        // symmetry and range
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(rho.get(i, j), rho.get(j, i));
                assert!((0.0..=1.0).contains(&rho.get(i, j)));
            }
        }
    }

    #[test]
    fn co_occurrence_equals_rs_mean_of_indicator() {
        let t = trace_of(
            &["112", "111", "123", "112", "111", "112"],
            &[("112", 0.0), ("111", 0.0), ("123", 0.0)],
        );
        let tours = find_tours(&t, &StateKey::parse("112").unwrap().key()).unwrap();
        let (rho, _) = co_occurrence_rs(&t, &tours).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let g = GSpec::scalar(move |s: &StateKey| {
                    StateKey::parse(s.as_str()).unwrap().co_clustered(i, j) as u8 as f64
                });
                assert_eq!(rho.get(i, j), rs_mean(&t, &tours, &g)[0]);
            }
        }
    }

    #[test]
    fn map_allocation_with_ties() {
        let t = trace_of(&["12", "11"], &[("12", -1.0), ("11", -1.0)]);
        let (map, lp) = map_allocation(&t).unwrap();
        assert_eq!(map.key().as_str(), "11"); // lexicographically smallest
        assert_eq!(lp, -1.0);

        let t = trace_of(&["12"], &[("12", -2.0)]);
        assert_eq!(map_allocation(&t).unwrap().0.key().as_str(), "12");
    }

    #[test]
    fn cumulative_curve_examples() {
        let key = |s: &str| StateKey::parse(s).unwrap().key();
        let single = vec![(key("1"), 0.7)];
        assert_eq!(cumulative_mass_curve(&single).unwrap(), vec![(1, 1.0)]);

        let uniform = vec![
            (key("1"), 0.25),
            (key("12"), 0.25),
            (key("112"), 0.25),
            (key("11"), 0.25),
        ];
        let curve = cumulative_mass_curve(&uniform).unwrap();
        let expect = [(1, 0.25), (2, 0.5), (3, 0.75), (4, 1.0)];
        for ((r, c), (er, ec)) in curve.iter().zip(expect) {
            assert_eq!(*r, er);
            assert_abs_diff_eq!(*c, ec, epsilon = 1e-12);
        }
        assert!(cumulative_mass_curve(&[]).is_err());
    }
}
