//! Regeneration-tour decomposition of a trace and the regenerative-sampling
//! mean and covariance estimators.
//!
//! For a discrete chain the return state delta is an exact atom, so tours
//! between successive visits to delta are i.i.d. blocks. All estimators use
//! the complete-tours window [tau_0, tau_R - 1], discarding the prefix
//! before the first visit.

use crate::error::{Error, Result};
use crate::partition::StateKey;
use crate::samplers::Trace;
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// Tour structure for a chosen return state.
#[derive(Debug, Clone)]
pub struct Tours {
    delta: StateKey,
    /// 0-based trace indices of the visits to delta: tau_0 .. tau_R
    tau: Vec<usize>,
}

impl Tours {
    pub fn delta(&self) -> &StateKey {
        &self.delta
    }

    /// Number of complete tours R.
    pub fn num_tours(&self) -> usize {
        self.tau.len() - 1
    }

    /// Visit indices tau_0..tau_R (0-based into the trace).
    pub fn visit_indices(&self) -> &[usize] {
        &self.tau
    }

    /// Tour lengths N_r = tau_r - tau_{r-1}.
    pub fn lengths(&self) -> Vec<usize> {
        self.tau.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn mean_length(&self) -> f64 {
        (self.tau[self.tau.len() - 1] - self.tau[0]) as f64 / self.num_tours() as f64
    }

    /// The tour-covered window of trace indices: [tau_0, tau_R - 1].
    pub fn window(&self) -> std::ops::Range<usize> {
        self.tau[0]..self.tau[self.tau.len() - 1]
    }
}

/// A vector-valued function of states, evaluated per distinct StateKey.
pub struct GSpec<'a> {
    k: usize,
    f: Box<dyn Fn(&StateKey) -> Vec<f64> + 'a>,
}

impl<'a> GSpec<'a> {
    pub fn new(k: usize, f: impl Fn(&StateKey) -> Vec<f64> + 'a) -> Self {
        GSpec { k, f: Box::new(f) }
    }

    /// Scalar convenience wrapper.
    pub fn scalar(f: impl Fn(&StateKey) -> f64 + 'a) -> Self {
        GSpec {
            k: 1,
            f: Box::new(move |s| vec![f(s)]),
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn eval(&self, key: &StateKey) -> Vec<f64> {
        let v = (self.f)(key);
        debug_assert_eq!(v.len(), self.k);
        v
    }
}

/// Locates the regeneration tours of `delta` in the trace.
pub fn find_tours(trace: &Trace, delta: &StateKey) -> Result<Tours> {
    let tau: Vec<usize> = trace
        .states()
        .iter()
        .enumerate()
        .filter(|(_, s)| *s == delta)
        .map(|(i, _)| i)
        .collect();
    if tau.len() < 2 {
        return Err(Error::InsufficientRegeneration(format!(
            "state {delta} visited {} time(s); need at least 2",
            tau.len()
        )));
    }
    Ok(Tours {
        delta: delta.clone(),
        tau,
    })
}

/// Default return-state rule: the most frequently visited state, ties
/// broken by lexicographic key.
pub fn most_frequent_state(trace: &Trace) -> Result<StateKey> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let mut counts: HashMap<&StateKey, usize> = HashMap::new();
    for s in trace.states() {
        *counts.entry(s).or_insert(0) += 1;
    }
    let best = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .unwrap();
    Ok(best.0.clone())
}

fn eval_cache<'a>(trace: &'a Trace, tours: &Tours, g: &GSpec) -> HashMap<&'a StateKey, Vec<f64>> {
    let mut cache: HashMap<&StateKey, Vec<f64>> = HashMap::new();
    for t in tours.window() {
        let key = &trace.states()[t];
        if !cache.contains_key(key) {
            cache.insert(key, g.eval(key));
        }
    }
    cache
}

/// RS mean of g over the tour-covered window.
pub fn rs_mean(trace: &Trace, tours: &Tours, g: &GSpec) -> Vec<f64> {
    let cache = eval_cache(trace, tours, g);
    let mut sum = vec![0.0; g.dim()];
    let window = tours.window();
    let len = window.len();
    for t in window {
        let v = &cache[&trace.states()[t]];
        for (a, b) in sum.iter_mut().zip(v) {
            *a += b;
        }
    }
    sum.iter_mut().for_each(|a| *a /= len as f64);
    sum
}

/// The tour-based covariance estimator:
/// (R Nbar^2)^{-1} sum_r (s_r - N_r gbar)(s_r - N_r gbar)',
/// accumulated in two passes.
pub fn rs_cov(trace: &Trace, tours: &Tours, g: &GSpec) -> Result<DMatrix<f64>> {
    let r = tours.num_tours();
    if r < 2 {
        return Err(Error::InsufficientRegeneration(format!(
            "covariance needs at least 2 tours, have {r}"
        )));
    }
    let k = g.dim();
    let cache = eval_cache(trace, tours, g);
    let gbar = DVector::from_vec(rs_mean(trace, tours, g));
    let nbar = tours.mean_length();
    let mut acc = DMatrix::<f64>::zeros(k, k);
    let tau = tours.visit_indices();
    for w in tau.windows(2) {
        let (start, end) = (w[0], w[1]);
        let mut s_r = DVector::<f64>::zeros(k);
        for t in start..end {
            let v = &cache[&trace.states()[t]];
            for (a, b) in s_r.iter_mut().zip(v) {
                *a += b;
            }
        }
        let n_r = (end - start) as f64;
        let dev = s_r - &gbar * n_r;
        acc += &dev * dev.transpose();
    }
    Ok(acc / (r as f64 * nbar * nbar))
}

/// Scalar version of [`rs_cov`] for univariate g.
pub fn rs_var(trace: &Trace, tours: &Tours, g: &GSpec) -> Result<f64> {
    assert_eq!(g.dim(), 1);
    Ok(rs_cov(trace, tours, g)?[(0, 0)])
}
