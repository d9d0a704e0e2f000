//! The Hotelling-RS convergence diagnostic.
//!
//! A partition scheme groups states into K disjoint sets with known
//! unnormalized masses q_i. At equilibrium the reweighted visit
//! frequencies f_i = Qbar_i / q_i are all near the (unknown) inverse
//! normalizing constant, so the statistic
//! T^2 = R (gbar - 1 Zinv)' Sigma^-1 (gbar - 1 Zinv) is asymptotically
//! chi-squared with K - 1 degrees of freedom. Large values indicate the
//! chain's relative visit frequencies disagree with the target.

use crate::error::{Error, Result};
use crate::partition::StateKey;
use crate::regen::{rs_mean, rs_var, GSpec, Tours};
use crate::samplers::Trace;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Condition-number guard for inverting the tour covariance. A
/// near-singular estimate means too few regenerations; report instead of
/// masking with a pseudo-inverse.
pub const COND_LIMIT: f64 = 1e12;

/// K disjoint sets of states with their unnormalized masses (the remainder
/// set is implicit).
#[derive(Debug, Clone)]
pub struct PartitionScheme {
    sets: Vec<Vec<StateKey>>,
    q: Vec<f64>,
    membership: HashMap<StateKey, usize>,
}

impl PartitionScheme {
    /// Builds a scheme from explicit sets and the unnormalized log mass of
    /// each state. Masses are exponentiated after a shared shift, so any
    /// common offset in the log masses cancels.
    pub fn from_log_masses(
        sets: Vec<Vec<StateKey>>,
        log_mass: impl Fn(&StateKey) -> f64,
    ) -> Result<Self> {
        if sets.len() < 2 {
            return Err(Error::InvalidInput(
                "partition scheme needs at least 2 sets".into(),
            ));
        }
        let mut membership = HashMap::new();
        let mut shift = f64::NEG_INFINITY;
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidInput(format!("set {i} is empty")));
            }
            for key in set {
                if membership.insert(key.clone(), i).is_some() {
                    return Err(Error::InvalidInput(format!(
                        "state {key} appears in more than one set"
                    )));
                }
                shift = shift.max(log_mass(key));
            }
        }
        let q: Vec<f64> = sets
            .iter()
            .map(|set| set.iter().map(|k| (log_mass(k) - shift).exp()).sum())
            .collect();
        if q.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("set masses must be positive".into()));
        }
        Ok(PartitionScheme {
            sets,
            q,
            membership,
        })
    }

    pub fn k(&self) -> usize {
        self.sets.len()
    }

    pub fn sets(&self) -> &[Vec<StateKey>] {
        &self.sets
    }

    /// Unnormalized masses after the stabilizing shift.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn set_of(&self, key: &StateKey) -> Option<usize> {
        self.membership.get(key).copied()
    }

    /// The reweighted indicator function g_i(x) = I(x in S_i) / q_i.
    pub fn g_spec(&self) -> GSpec<'_> {
        let k = self.k();
        GSpec::new(k, move |s| {
            let mut v = vec![0.0; k];
            if let Some(i) = self.set_of(s) {
                v[i] = 1.0 / self.q[i];
            }
            v
        })
    }
}

/// Ranks distinct visited states by cached log posterior (ties broken by
/// lexicographic key) and takes the top K as singleton sets.
pub fn top_k_scheme(trace: &Trace, k: usize) -> Result<PartitionScheme> {
    if k < 2 {
        return Err(Error::InvalidInput("K must be at least 2".into()));
    }
    let mut ranked: Vec<(&StateKey, f64)> = trace
        .log_post_table()
        .iter()
        .map(|(s, &lp)| (s, lp))
        .collect();
    if ranked.len() < k {
        return Err(Error::InsufficientStates {
            needed: k,
            seen: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    let sets: Vec<Vec<StateKey>> = ranked[..k].iter().map(|(s, _)| vec![(*s).clone()]).collect();
    PartitionScheme::from_log_masses(sets, |key| trace.log_post(key).unwrap())
}

/// Everything [`hotelling_rs`] computes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub k: usize,
    pub g_bar: Vec<f64>,
    /// row-major K x K tour covariance estimate
    pub sigma_hat: Vec<f64>,
    pub z_inv_hat: f64,
    pub weights: Vec<f64>,
    pub t2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub num_tours: usize,
    /// indices of scheme sets never visited in the tour window
    pub unvisited_sets: Vec<usize>,
}

/// Symmetric eigendecomposition with the condition guard applied.
fn guarded_eigen(sigma: &DMatrix<f64>) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = nalgebra::SymmetricEigen::new(sigma.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || max / min > COND_LIMIT {
        return Err(Error::InsufficientRegeneration(format!(
            "tour covariance is singular or ill-conditioned (eigenvalues in [{min:.3e}, {max:.3e}]); run longer"
        )));
    }
    Ok(eig)
}

fn spd_power(sigma: &DMatrix<f64>, pow: f64) -> Result<DMatrix<f64>> {
    let eig = guarded_eigen(sigma)?;
    let k = sigma.nrows();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        d[(i, i)] = eig.eigenvalues[i].powf(pow);
    }
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// w(Sigma) = Sigma^-1 1 / (1' Sigma^-1 1); the weights sum to one.
pub fn weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let inv = spd_power(sigma, -1.0)?;
    let ones = DVector::from_element(sigma.nrows(), 1.0);
    let iv = &inv * &ones;
    let denom = ones.dot(&iv);
    Ok(iv / denom)
}

/// The projection matrix A(Sigma) = Sigma^-1/2 - Sigma^-1/2 1 (1'Sigma^-1 1)^-1 1'Sigma^-1.
pub fn mat_a(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv_sqrt = spd_power(sigma, -0.5)?;
    let inv = spd_power(sigma, -1.0)?;
    let k = sigma.nrows();
    let ones = DVector::from_element(k, 1.0);
    let denom = ones.dot(&(&inv * &ones));
    Ok(&inv_sqrt - (&inv_sqrt * &ones) * (ones.transpose() * inv) / denom)
}

/// The idempotent rank K-1 matrix
/// B(Sigma) = I - Sigma^-1/2 1 (1'Sigma^-1 1)^-1 1'Sigma^-1/2.
pub fn mat_b(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv_sqrt = spd_power(sigma, -0.5)?;
    let k = sigma.nrows();
    let ones = DVector::from_element(k, 1.0);
    let inv = spd_power(sigma, -1.0)?;
    let denom = ones.dot(&(&inv * &ones));
    let half = &inv_sqrt * &ones;
    Ok(DMatrix::identity(k, k) - (&half * half.transpose()) / denom)
}

/// Projection-form statistic R * ||A(Sigma) gbar||^2; used to cross-check
/// the quadratic form in [`hotelling_rs`].
pub fn hotelling_t2_projection(
    g_bar: &DVector<f64>,
    sigma: &DMatrix<f64>,
    num_tours: usize,
) -> Result<f64> {
    let a = mat_a(sigma)?;
    let proj = a * g_bar;
    Ok(num_tours as f64 * proj.norm_squared())
}

/// Upper tail of the chi-squared distribution with `dof` degrees of
/// freedom, via the regularized incomplete gamma function.
pub fn chi2_upper_tail(x: f64, dof: usize) -> f64 {
    assert!(x >= 0.0 && dof >= 1);
    if x == 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Computes the Hotelling-RS statistic and its chi-squared p-value for a
/// trace, its tours, and a partition scheme.
pub fn hotelling_rs(
    trace: &Trace,
    tours: &Tours,
    scheme: &PartitionScheme,
) -> Result<DiagnosticResult> {
    let k = scheme.k();
    let r = tours.num_tours();
    if r < k + 1 {
        return Err(Error::InsufficientRegeneration(format!(
            "need more tours than sets (R = {r}, K = {k})"
        )));
    }
    let g = scheme.g_spec();
    let g_bar_v = rs_mean(trace, tours, &g);
    let unvisited_sets: Vec<usize> = (0..k).filter(|&i| g_bar_v[i] == 0.0).collect();
    let sigma = crate::regen::rs_cov(trace, tours, &g)?;
    let g_bar = DVector::from_vec(g_bar_v.clone());
    let w = weights(&sigma)?;
    let z_inv_hat = w.dot(&g_bar);
    let resid = &g_bar - DVector::from_element(k, z_inv_hat);
    let inv = spd_power(&sigma, -1.0)?;
    let t2 = r as f64 * resid.dot(&(&inv * &resid));
    let t2 = t2.max(0.0);
    let dof = k - 1;
    Ok(DiagnosticResult {
        k,
        g_bar: g_bar_v,
        sigma_hat: sigma.as_slice().to_vec(),
        z_inv_hat,
        weights: w.as_slice().to_vec(),
        t2,
        dof,
        p_value: chi2_upper_tail(t2, dof),
        num_tours: r,
        unvisited_sets,
    })
}

/// The coefficient-of-variation diagnostic for one consensus-matrix entry:
/// se(rho_ij) / max(rho_ij, 1 - rho_ij), with the RS mean and the
/// univariate tour variance estimator.
pub fn cv_diagnostic(trace: &Trace, tours: &Tours, pair: (usize, usize)) -> Result<f64> {
    let (i, j) = pair;
    let g = GSpec::scalar(move |s: &StateKey| {
        let alloc = StateKey::parse(s.as_str()).expect("trace keys are canonical");
        (alloc.co_clustered(i, j)) as u8 as f64
    });
    let rho = rs_mean(trace, tours, &g)[0];
    let var = rs_var(trace, tours, &g)?;
    let se = (var / tours.num_tours() as f64).sqrt();
    Ok(se / rho.max(1.0 - rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::TraceMeta;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(k, k, |_, _| rng.gen::<f64>() - 0.5);
        &m * m.transpose() + DMatrix::identity(k, k) * 0.05
    }

    #[test]
    fn chi2_tail_known_quantiles() {
        assert_abs_diff_eq!(chi2_upper_tail(0.0, 3), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(chi2_upper_tail(3.841459, 1), 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(chi2_upper_tail(16.918978, 9), 0.05, epsilon = 1e-6);
        // dof 2 closed form: exp(-x/2)
        for x in [0.3, 1.7, 8.0] {
            assert_abs_diff_eq!(chi2_upper_tail(x, 2), (-x / 2.0).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_worked_k2_statistic() {
        // gbar = (1.2, 0.8), Sigma = I, R = 100: Zinv = 1, T2 = 8
        let g_bar = DVector::from_vec(vec![1.2, 0.8]);
        let sigma = DMatrix::identity(2, 2);
        let w = weights(&sigma).unwrap();
        let z_inv = w.dot(&g_bar);
        assert_abs_diff_eq!(z_inv, 1.0, epsilon = 1e-12);
        let resid = &g_bar - DVector::from_element(2, z_inv);
        let t2 = 100.0 * resid.dot(&resid);
        assert_abs_diff_eq!(t2, 8.0, epsilon = 1e-10);
        let p = chi2_upper_tail(t2, 1);
        assert_abs_diff_eq!(p, 0.004677735, epsilon = 1e-6);
        // projection form agrees
        let t2p = hotelling_t2_projection(&g_bar, &sigma, 100).unwrap();
        assert_abs_diff_eq!(t2p, 8.0, epsilon = 1e-10);
    }

    #[test]
    fn projection_algebra_on_random_spd() {
        for seed in 0..20 {
            let k = 2 + (seed as usize % 5);
            let sigma = random_spd(k, seed);
            let b = mat_b(&sigma).unwrap();
            let idem = (&b * &b) - &b;
            assert!(idem.amax() < 1e-10, "B not idempotent, seed {seed}");
            assert_abs_diff_eq!(b.trace(), (k - 1) as f64, epsilon = 1e-10);
            let w = weights(&sigma).unwrap();
            assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_and_projection_forms_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for seed in 0..20 {
            let k = 2 + (seed as usize % 4);
            let sigma = random_spd(k, 100 + seed);
            let g_bar = DVector::from_fn(k, |_, _| rng.gen::<f64>() + 0.5);
            let inv = spd_power(&sigma, -1.0).unwrap();
            let w = weights(&sigma).unwrap();
            let z = w.dot(&g_bar);
            let resid = &g_bar - DVector::from_element(k, z);
            let quad = 50.0 * resid.dot(&(&inv * &resid));
            let proj = hotelling_t2_projection(&g_bar, &sigma, 50).unwrap();
            assert!(
                (quad - proj).abs() <= 1e-8 * quad.abs().max(1e-8),
                "{quad} vs {proj}"
            );
        }
    }

    fn toy_trace(names: &[&str], lp: &[(&str, f64)]) -> Trace {
        let states: Vec<StateKey> = names.iter().map(|n| StateKey::parse(n).unwrap().key()).collect();
        let mut table = HashMap::new();
        for (n, v) in lp {
            table.insert(StateKey::parse(n).unwrap().key(), *v);
        }
        Trace::from_parts(states, table, TraceMeta::default()).unwrap()
    }

    #[test]
    fn top_k_ranks_by_log_post_with_tie_break() {
        let t = toy_trace(
            &["1", "12", "11", "12", "1"],
            &[("1", -1.0), ("12", -0.5), ("11", -1.0)],
        );
        let scheme = top_k_scheme(&t, 2).unwrap();
        assert_eq!(scheme.sets()[0][0].as_str(), "12");
        // tie between "1" and "11" at -1.0: lexicographic order
        assert_eq!(scheme.sets()[1][0].as_str(), "1");
        let scheme3 = top_k_scheme(&t, 3).unwrap();
        assert_eq!(scheme3.sets()[2][0].as_str(), "11");
        assert!(matches!(
            top_k_scheme(&t, 4),
            Err(Error::InsufficientStates { .. })
        ));
    }

    #[test]
    fn cv_constant_indicator_is_zero() {
        // observations 0 and 1 co-clustered in every visited state
        let t = toy_trace(
            &["112", "11", "112", "11", "112"],
            &[("112", 0.0), ("11", 0.0)],
        );
        let delta = StateKey::parse("112").unwrap().key();
        let tours = crate::regen::find_tours(&t, &delta).unwrap();
        let cv = cv_diagnostic(&t, &tours, (0, 1)).unwrap();
        assert_abs_diff_eq!(cv, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn scheme_rejects_overlap_and_empty() {
        let k1 = StateKey::parse("1").unwrap().key();
        let k2 = StateKey::parse("12").unwrap().key();
        assert!(PartitionScheme::from_log_masses(
            vec![vec![k1.clone()], vec![k1.clone()]],
            |_| 0.0
        )
        .is_err());
        assert!(
            PartitionScheme::from_log_masses(vec![vec![k1.clone(), k2]], |_| 0.0).is_err()
        );
        assert!(PartitionScheme::from_log_masses(vec![vec![k1], vec![]], |_| 0.0).is_err());
    }

    proptest! {
        // scale equivariance: adding a constant to all log masses leaves
        // q-ratios unchanged
        #[test]
        fn scheme_scale_equivariant(shift in -100.0..100.0f64) {
            let keys: Vec<StateKey> = ["1", "12", "123"].iter().map(|s| StateKey::parse(s).unwrap().key()).collect();
            let lp = |k: &StateKey| match k.as_str() {
                "1" => -0.3, "12" => -1.0, _ => -2.5,
            };
            let sets: Vec<Vec<StateKey>> = keys.iter().map(|k| vec![k.clone()]).collect();
            let a = PartitionScheme::from_log_masses(sets.clone(), lp).unwrap();
            let b = PartitionScheme::from_log_masses(sets, |k| lp(k) + shift).unwrap();
            for i in 0..3 {
                let ra = a.q()[i] / a.q()[0];
                let rb = b.q()[i] / b.q()[0];
                prop_assert!((ra - rb).abs() < 1e-10);
            }
        }
    }
}
