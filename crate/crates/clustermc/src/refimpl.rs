//! Slow reference routes for validating the fast marginal-likelihood path.
//!
//! Everything here works from explicit dense covariance matrices or raw
//! latent-variable sampling, deliberately avoiding the rank-one update
//! formulas used by the production code.

use crate::math::{log_normal_pdf, LogSumExp};
use crate::model::{DataMatrix, HyperParams};
use crate::partition::Allocation;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense multivariate normal log density via Cholesky.
pub fn dense_mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let chol = cov.clone().cholesky().expect("covariance must be SPD");
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&solved))
}

/// Stacks the replicates of one (variable, cluster) block into a vector and
/// builds the two explicit covariance matrices (spike and slab branches).
fn dense_block(
    data: &DataMatrix,
    v: usize,
    members: &[usize],
    hyper: &HyperParams,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut ys = Vec::new();
    let mut owner = Vec::new();
    for (mi, &i) in members.iter().enumerate() {
        for &y in data.replicates(v, i) {
            ys.push(y);
            owner.push(mi);
        }
    }
    let n = ys.len();
    let y = DVector::from_vec(ys);
    let mut cov0 = DMatrix::from_element(n, n, 0.0);
    for a in 0..n {
        for b in 0..n {
            let mut c = 0.0;
            if a == b {
                c += hyper.sigma2;
            }
            if owner[a] == owner[b] {
                c += hyper.sigma2_eta;
            }
            cov0[(a, b)] = c;
        }
    }
    let cov1 = &cov0 + DMatrix::from_element(n, n, hyper.sigma2_theta);
    (y, cov0, cov1)
}

/// Dense-matrix log marginal likelihood of one (variable, cluster) block,
/// mixing the slab indicator out with explicit covariances.
pub fn dense_block_log_marglik(
    data: &DataMatrix,
    v: usize,
    members: &[usize],
    hyper: &HyperParams,
) -> f64 {
    let (y, cov0, cov1) = dense_block(data, v, members, hyper);
    let mean = DVector::from_element(y.len(), hyper.mu);
    let spike = dense_mvn_logpdf(&y, &mean, &cov0);
    let slab = dense_mvn_logpdf(&y, &mean, &cov1);
    crate::math::log_add_exp(hyper.p.ln() + slab, (1.0 - hyper.p).ln() + spike)
}

/// Dense-matrix log marginal likelihood of the whole dataset.
pub fn dense_log_marglik(data: &DataMatrix, alloc: &Allocation, hyper: &HyperParams) -> f64 {
    let mut total = 0.0;
    for v in 0..data.n_vars() {
        for c in 1..=alloc.num_clusters() {
            total += dense_block_log_marglik(data, v, &alloc.members(c as u8), hyper);
        }
    }
    total
}

/// Evaluates the block marginal through the candidate's-formula ratio
/// joint(y, latents) / posterior(latents | y) at a fixed latent point,
/// with the slab branch active. All conditional posteriors are computed
/// from dense linear algebra.
pub fn chib_block_log_marglik(
    data: &DataMatrix,
    v: usize,
    members: &[usize],
    hyper: &HyperParams,
) -> f64 {
    let (y, cov0, cov1) = dense_block(data, v, members, hyper);
    let n_tot = y.len();
    let mean = DVector::from_element(n_tot, hyper.mu);

    // latent evaluation point: gamma = 1, theta fixed, eta fixed per member
    let gamma = 1.0f64;
    let theta = 0.3;
    let etas: Vec<f64> = members.iter().map(|&i| 0.1 + 0.01 * i as f64).collect();

    // joint: likelihood at the latent point times latent priors
    let mut log_lik = 0.0;
    for (mi, &i) in members.iter().enumerate() {
        for &yv in data.replicates(v, i) {
            log_lik += log_normal_pdf(yv, hyper.mu + gamma * theta + etas[mi], hyper.sigma2);
        }
    }
    let log_prior = gamma * hyper.p.ln()
        + (1.0 - gamma) * (1.0 - hyper.p).ln()
        + log_normal_pdf(theta, 0.0, hyper.sigma2_theta)
        + etas
            .iter()
            .map(|&e| log_normal_pdf(e, 0.0, hyper.sigma2_eta))
            .sum::<f64>();

    // posterior, factored p(gamma | y) p(theta | gamma, y) p(eta | gamma, theta, y)
    // p(gamma = 1 | y) from the two dense branch densities
    let l1 = hyper.p.ln() + dense_mvn_logpdf(&y, &mean, &cov1);
    let l0 = (1.0 - hyper.p).ln() + dense_mvn_logpdf(&y, &mean, &cov0);
    let log_p_gamma = l1 - crate::math::log_add_exp(l0, l1);

    // theta | gamma = 1, y: with eta integrated out, y | theta ~ N((mu+theta)1, cov0)
    let chol0 = cov0.clone().cholesky().expect("cov0 SPD");
    let ones = DVector::from_element(n_tot, 1.0);
    let c0_inv_ones = chol0.solve(&ones);
    let prec = 1.0 / hyper.sigma2_theta + ones.dot(&c0_inv_ones);
    let centered = &y - &mean;
    let lin = c0_inv_ones.dot(&centered);
    let theta_var = 1.0 / prec;
    let theta_mean = lin * theta_var;
    let log_p_theta = log_normal_pdf(theta, theta_mean, theta_var);

    // eta_i | gamma, theta, y: conjugate per member
    let mut log_p_eta = 0.0;
    for (mi, &i) in members.iter().enumerate() {
        let reps = data.replicates(v, i);
        let ni = reps.len() as f64;
        let resid_sum: f64 = reps
            .iter()
            .map(|&yv| yv - hyper.mu - gamma * theta)
            .sum();
        let var = 1.0 / (1.0 / hyper.sigma2_eta + ni / hyper.sigma2);
        let m = var * resid_sum / hyper.sigma2;
        log_p_eta += log_normal_pdf(etas[mi], m, var);
    }

    log_lik + log_prior - (log_p_gamma + log_p_theta + log_p_eta)
}

/// Chib-identity evaluation of the full log marginal likelihood.
pub fn chib_log_marglik(data: &DataMatrix, alloc: &Allocation, hyper: &HyperParams) -> f64 {
    let mut total = 0.0;
    for v in 0..data.n_vars() {
        for c in 1..=alloc.num_clusters() {
            total += chib_block_log_marglik(data, v, &alloc.members(c as u8), hyper);
        }
    }
    total
}

/// Plain Monte Carlo integration of one block marginal with latent draws
/// from their priors. Returns (log estimate, log-scale standard error
/// proxy via the delta method).
pub fn mc_block_log_marglik(
    data: &DataMatrix,
    v: usize,
    members: &[usize],
    hyper: &HyperParams,
    n_draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lse = LogSumExp::new();
    let mut raw = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let gamma = if rng.gen::<f64>() < hyper.p { 1.0 } else { 0.0 };
        let theta: f64 =
            rng.sample::<f64, _>(rand_distr::StandardNormal) * hyper.sigma2_theta.sqrt();
        let mut log_lik = 0.0;
        for &i in members {
            let eta: f64 =
                rng.sample::<f64, _>(rand_distr::StandardNormal) * hyper.sigma2_eta.sqrt();
            for &yv in data.replicates(v, i) {
                log_lik += log_normal_pdf(yv, hyper.mu + gamma * theta + eta, hyper.sigma2);
            }
        }
        lse.add(log_lik);
        raw.push(log_lik);
    }
    let log_est = lse.value() - (n_draws as f64).ln();
    // se of the mean of exp(log_lik), mapped to the log scale
    let mean = raw.iter().map(|&l| (l - log_est).exp()).sum::<f64>() / n_draws as f64;
    let var = raw
        .iter()
        .map(|&l| ((l - log_est).exp() - mean).powi(2))
        .sum::<f64>()
        / (n_draws as f64 - 1.0);
    let se_rel = (var / n_draws as f64).sqrt() / mean;
    (log_est, se_rel)
}
