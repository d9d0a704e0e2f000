//! Canonical set partitions of N observations.
//!
//! An allocation assigns each observation a 1-based cluster label, with
//! labels in order of first appearance (a restricted-growth sequence).
//! Two raw labelings that induce the same set partition canonicalize to
//! the same allocation.

use crate::error::{Error, Result};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default cap on full enumeration. bell(15) ≈ 1.4e9 states.
pub const DEFAULT_ENUMERATION_CAP: usize = 15;

/// A canonical cluster-label vector: labels[0] = 1 and each subsequent
/// label is at most one larger than the running maximum.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation {
    labels: Vec<u8>,
}

impl Allocation {
    /// Wraps labels that are already canonical. Panics if they are not;
    /// use [`canonicalize`] for untrusted label vectors.
    pub fn from_canonical(labels: Vec<u8>) -> Self {
        assert!(is_canonical(&labels), "labels not in canonical form");
        Allocation { labels }
    }

    pub fn singletons(n: usize) -> Self {
        Allocation {
            labels: (1..=n as u8).collect(),
        }
    }

    pub fn one_cluster(n: usize) -> Self {
        Allocation {
            labels: vec![1; n],
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of clusters C.
    pub fn num_clusters(&self) -> usize {
        *self.labels.iter().max().unwrap() as usize
    }

    /// Cluster sizes N_1..N_C.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_clusters()];
        for &l in &self.labels {
            sizes[l as usize - 1] += 1;
        }
        sizes
    }

    /// 0-based member indices of cluster `c` (1-based label).
    pub fn members(&self, c: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Bitmask of members of cluster `c`; valid for N ≤ 64.
    pub fn member_mask(&self, c: u8) -> u64 {
        let mut m = 0u64;
        for (i, &l) in self.labels.iter().enumerate() {
            if l == c {
                m |= 1 << i;
            }
        }
        m
    }

    pub fn co_clustered(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    pub fn key(&self) -> StateKey {
        StateKey::from_allocation(self)
    }
}

fn is_canonical(labels: &[u8]) -> bool {
    if labels.is_empty() || labels[0] != 1 {
        return false;
    }
    let mut max = 1u8;
    for &l in &labels[1..] {
        if l == 0 || l > max + 1 {
            return false;
        }
        max = max.max(l);
    }
    true
}

/// Relabels by order of first appearance so that equivalent labelings map
/// to the same canonical allocation.
pub fn canonicalize(raw_labels: &[u32]) -> Result<Allocation> {
    if raw_labels.is_empty() {
        return Err(Error::InvalidInput("empty label vector".into()));
    }
    if raw_labels.len() > 64 {
        return Err(Error::InvalidInput(format!(
            "at most 64 observations supported, got {}",
            raw_labels.len()
        )));
    }
    let mut map: Vec<(u32, u8)> = Vec::new();
    let mut labels = Vec::with_capacity(raw_labels.len());
    for &raw in raw_labels {
        let found = map.iter().find(|(r, _)| *r == raw).map(|(_, c)| *c);
        let canon = match found {
            Some(c) => c,
            None => {
                let next = map.len() as u8 + 1;
                map.push((raw, next));
                next
            }
        };
        labels.push(canon);
    }
    Ok(Allocation { labels })
}

/// Compact canonical encoding of an allocation, usable as a lookup key and
/// as the on-disk state identifier.
///
/// Labels 1–9 serialize as the digits '1'–'9'; labels 10 and above as the
/// letters 'a', 'b', … so that lexicographic order on keys of equal length
/// matches lexicographic order on label vectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(String);

fn label_char(l: u8) -> char {
    debug_assert!((1..=35).contains(&l));
    if l <= 9 {
        (b'0' + l) as char
    } else {
        (b'a' + l - 10) as char
    }
}

fn char_label(c: char) -> Option<u8> {
    match c {
        '1'..='9' => Some(c as u8 - b'0'),
        'a'..='z' => Some(c as u8 - b'a' + 10),
        _ => None,
    }
}

impl StateKey {
    pub fn from_allocation(alloc: &Allocation) -> Self {
        StateKey(alloc.labels.iter().map(|&l| label_char(l)).collect())
    }

    /// Parses a restricted-growth digit string back into an allocation.
    pub fn parse(s: &str) -> Result<Allocation> {
        if s.is_empty() {
            return Err(Error::InvalidInput("empty state key".into()));
        }
        if s.len() > 64 {
            return Err(Error::InvalidInput("state key too long".into()));
        }
        let mut labels = Vec::with_capacity(s.len());
        for c in s.chars() {
            match char_label(c) {
                Some(l) => labels.push(l),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "invalid state key character {c:?} in {s:?}"
                    )))
                }
            }
        }
        if !is_canonical(&labels) {
            return Err(Error::InvalidInput(format!(
                "state key {s:?} is not a restricted-growth sequence"
            )));
        }
        Ok(Allocation { labels })
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Iterator over all set partitions of {1..n} in lexicographic
/// restricted-growth order.
pub struct PartitionIter {
    labels: Vec<u8>,
    maxes: Vec<u8>, // maxes[i] = max(labels[0..=i])
    done: bool,
    first: bool,
}

impl Iterator for PartitionIter {
    type Item = Allocation;

    fn next(&mut self) -> Option<Allocation> {
        if self.done {
            return None;
        }
        if self.first {
            self.first = false;
            return Some(Allocation {
                labels: self.labels.clone(),
            });
        }
        let n = self.labels.len();
        // find rightmost position (excluding 0) that can be incremented
        let mut i = n;
        loop {
            if i <= 1 {
                self.done = true;
                return None;
            }
            i -= 1;
            if self.labels[i] <= self.maxes[i - 1] {
                break;
            }
        }
        self.labels[i] += 1;
        self.maxes[i] = self.maxes[i - 1].max(self.labels[i]);
        for j in i + 1..n {
            self.labels[j] = 1;
            self.maxes[j] = self.maxes[j - 1];
        }
        Some(Allocation {
            labels: self.labels.clone(),
        })
    }
}

/// Streams every set partition of {1..n} exactly once, canonically,
/// in lexicographic order. `cap` guards against runaway enumerations
/// (bell(14) already has ~1.9e8 elements).
pub fn enumerate_partitions_capped(n: usize, cap: usize) -> Result<PartitionIter> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if n > cap {
        return Err(Error::ResourceLimit(format!(
            "enumeration of {n} observations exceeds cap {cap} (bell({n}) states)"
        )));
    }
    Ok(PartitionIter {
        labels: vec![1; n],
        maxes: vec![1; n],
        done: false,
        first: true,
    })
}

/// [`enumerate_partitions_capped`] with the default cap of 15.
pub fn enumerate_partitions(n: usize) -> Result<PartitionIter> {
    enumerate_partitions_capped(n, DEFAULT_ENUMERATION_CAP)
}

/// Bell number B(n): the number of set partitions of n items.
/// Exact via the Bell triangle.
pub fn bell(n: usize) -> BigUint {
    assert!(n >= 1, "bell(n) requires n >= 1");
    let mut row = vec![BigUint::from(1u32)];
    for _ in 1..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(row.last().unwrap().clone());
        for v in &row {
            let last = next.last().unwrap().clone();
            next.push(last + v);
        }
        row = next;
    }
    row.last().unwrap().clone()
}

/// Stirling number of the second kind: partitions of n items into exactly
/// c non-empty blocks.
pub fn stirling2(n: usize, c: usize) -> Result<BigUint> {
    if c < 1 || c > n {
        return Err(Error::InvalidInput(format!(
            "stirling2 requires 1 <= c <= n, got n={n}, c={c}"
        )));
    }
    // S(n,c) = S(n-1,c-1) + c*S(n-1,c), row by row
    let mut row = vec![BigUint::from(1u32)]; // S(1,1)
    for m in 2..=n {
        let width = m.min(c + 1);
        let mut next = vec![BigUint::from(0u32); width];
        for k in 1..=width {
            let from_smaller = if k >= 2 { row.get(k - 2).cloned() } else { None };
            let same = row.get(k - 1).map(|v| v * BigUint::from(k as u32));
            next[k - 1] = match (from_smaller, same) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => BigUint::from(0u32),
            };
        }
        row = next;
    }
    Ok(row[c - 1].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize(&[1, 1, 1]).unwrap().labels(), &[1, 1, 1]);
        assert_eq!(canonicalize(&[2, 2, 1]).unwrap().labels(), &[1, 1, 2]);
        assert_eq!(canonicalize(&[3, 1, 2, 3]).unwrap().labels(), &[1, 2, 3, 1]);
    }

    #[test]
    fn canonicalize_rejects_empty() {
        assert!(matches!(canonicalize(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn enumerate_n3() {
        let got: Vec<Vec<u8>> = enumerate_partitions(3)
            .unwrap()
            .map(|a| a.labels().to_vec())
            .collect();
        assert_eq!(
            got,
            vec![
                vec![1, 1, 1],
                vec![1, 1, 2],
                vec![1, 2, 1],
                vec![1, 2, 2],
                vec![1, 2, 3]
            ]
        );
    }

    #[test]
    fn enumerate_n1() {
        let got: Vec<_> = enumerate_partitions(1).unwrap().collect();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].labels(), &[1]);
    }

    #[test]
    fn enumerate_over_cap_errors() {
        assert!(matches!(
            enumerate_partitions(16),
            Err(Error::ResourceLimit(_))
        ));
        assert!(enumerate_partitions_capped(16, 16).is_ok());
    }

    #[test]
    fn bell_small_values() {
        // brute-force oracle: distinct canonical keys over all label vectors
        fn bell_brute(n: usize) -> usize {
            let mut seen = HashSet::new();
            let mut raw = vec![1u32; n];
            loop {
                seen.insert(canonicalize(&raw).unwrap().key());
                let mut i = n;
                loop {
                    if i == 0 {
                        return seen.len();
                    }
                    i -= 1;
                    if raw[i] < n as u32 {
                        raw[i] += 1;
                        for v in raw[i + 1..].iter_mut() {
                            *v = 1;
                        }
                        break;
                    }
                }
            }
        }
        for n in 1..=6 {
            assert_eq!(bell(n), BigUint::from(bell_brute(n)));
        }
        assert_eq!(bell(3), BigUint::from(5u32));
    }

    #[test]
    fn bell_14_exact() {
        assert_eq!(bell(14), BigUint::from(190_899_322u64));
    }

    #[test]
    fn stirling_examples() {
        // brute force: enumerate and count partitions with exactly c blocks
        let count = |n: usize, c: usize| {
            enumerate_partitions(n)
                .unwrap()
                .filter(|a| a.num_clusters() == c)
                .count()
        };
        assert_eq!(stirling2(4, 2).unwrap(), BigUint::from(7u32));
        assert_eq!(count(4, 2), 7);
        for n in 1..=7 {
            assert_eq!(stirling2(n, 1).unwrap(), BigUint::from(1u32));
            assert_eq!(stirling2(n, n).unwrap(), BigUint::from(1u32));
            for c in 1..=n {
                assert_eq!(stirling2(n, c).unwrap(), BigUint::from(count(n, c)));
            }
        }
        assert!(stirling2(3, 4).is_err());
        assert!(stirling2(3, 0).is_err());
    }

    #[test]
    fn stirling_sums_to_bell() {
        for n in 1..=12 {
            let sum: BigUint = (1..=n).map(|c| stirling2(n, c).unwrap()).sum();
            assert_eq!(sum, bell(n), "n={n}");
        }
    }

    #[test]
    fn enumeration_yields_bell_distinct_keys() {
        for n in 1..=8 {
            let keys: HashSet<StateKey> = enumerate_partitions(n)
                .unwrap()
                .map(|a| a.key())
                .collect();
            assert_eq!(BigUint::from(keys.len()), bell(n), "n={n}");
        }
    }

    #[test]
    fn key_roundtrip_multichar_labels() {
        let alloc = Allocation::singletons(12);
        let key = alloc.key();
        assert_eq!(key.as_str(), "123456789abc");
        assert_eq!(StateKey::parse(key.as_str()).unwrap(), alloc);
        assert!(StateKey::parse("121?").is_err());
        assert!(StateKey::parse("211").is_err()); // not restricted-growth
        assert!(StateKey::parse("").is_err());
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent(raw in proptest::collection::vec(1u32..8, 1..16)) {
            let once = canonicalize(&raw).unwrap();
            let raw2: Vec<u32> = once.labels().iter().map(|&l| l as u32).collect();
            let twice = canonicalize(&raw2).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn canonicalize_alphabet_invariant(raw in proptest::collection::vec(1u32..6, 1..14), offset in 1u32..100) {
            // relabel through an injective map of the label alphabet
            let mapped: Vec<u32> = raw.iter().map(|&l| l * 7 + offset).collect();
            prop_assert_eq!(canonicalize(&raw).unwrap(), canonicalize(&mapped).unwrap());
        }

        #[test]
        fn key_roundtrip(raw in proptest::collection::vec(1u32..10, 1..20)) {
            let alloc = canonicalize(&raw).unwrap();
            prop_assert_eq!(StateKey::parse(alloc.key().as_str()).unwrap(), alloc);
        }
    }
}
