//! Empirical-Bayes hyperparameter fitting.
//!
//! Maximizes the clustering-free marginal likelihood over
//! (mu, sigma2, sigma2_eta, sigma2_theta, p), working on a transformed
//! scale (log variances, logit p) with a quasi-Newton (BFGS) ascent and
//! multi-start. Standard errors come from the inverse observed information
//! on the transformed scale, delta-method mapped back.

use crate::error::{Error, Result};
use crate::model::{eb_objective, DataMatrix, HyperParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const P_FLOOR: f64 = 1e-6;
pub const VAR_FLOOR: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-6;
const MAX_ITER: usize = 500;
pub const DEFAULT_STARTS: usize = 5;

/// Fit output: point estimates, reported-scale standard errors, and
/// optimizer bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub hyper: HyperParams,
    /// standard errors on the reporting scale, same field order as HyperParams
    pub se: HyperStdErrs,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// names of parameters that ended on a boundary guard
    pub boundary_hits: Vec<String>,
    /// objective value at the end of each completed start
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HyperStdErrs {
    pub mu: f64,
    pub sigma2: f64,
    pub sigma2_eta: f64,
    pub sigma2_theta: f64,
    pub p: f64,
}

fn to_transformed(h: &HyperParams) -> [f64; 5] {
    [
        h.mu,
        h.sigma2.ln(),
        h.sigma2_eta.ln(),
        h.sigma2_theta.ln(),
        (h.p / (1.0 - h.p)).ln(),
    ]
}

fn from_transformed(t: &[f64; 5]) -> HyperParams {
    let clamp_var = |x: f64| x.exp().max(VAR_FLOOR).min(1e12);
    let p_raw = 1.0 / (1.0 + (-t[4]).exp());
    HyperParams {
        mu: t[0],
        sigma2: clamp_var(t[1]),
        sigma2_eta: clamp_var(t[2]),
        sigma2_theta: clamp_var(t[3]),
        p: p_raw.clamp(P_FLOOR, 1.0 - P_FLOOR),
    }
}

fn objective_t(data: &DataMatrix, t: &[f64; 5]) -> f64 {
    match eb_objective(data, &from_transformed(t)) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// Central-difference gradient of the transformed objective.
pub fn numeric_gradient(data: &DataMatrix, t: &[f64; 5], step: f64) -> [f64; 5] {
    let mut g = [0.0; 5];
    for k in 0..5 {
        let mut up = *t;
        let mut dn = *t;
        up[k] += step;
        dn[k] -= step;
        g[k] = (objective_t(data, &up) - objective_t(data, &dn)) / (2.0 * step);
    }
    g
}

fn numeric_hessian(data: &DataMatrix, t: &[f64; 5], step: f64) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(5, 5);
    for k in 0..5 {
        let mut up = *t;
        let mut dn = *t;
        up[k] += step;
        dn[k] -= step;
        let gu = numeric_gradient(data, &up, step);
        let gd = numeric_gradient(data, &dn, step);
        for l in 0..5 {
            h[(k, l)] = (gu[l] - gd[l]) / (2.0 * step);
        }
    }
    // symmetrize
    let ht = h.transpose();
    (h + ht) * 0.5
}

struct BfgsOutcome {
    t: [f64; 5],
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// BFGS ascent with backtracking Armijo line search.
fn bfgs(data: &DataMatrix, start: [f64; 5]) -> BfgsOutcome {
    let grad_step = 1e-5;
    let mut t = start;
    let mut f = objective_t(data, &t);
    let mut g = DVector::from_row_slice(&numeric_gradient(data, &t, grad_step));
    let mut h_inv = DMatrix::<f64>::identity(5, 5);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        iterations += 1;
        if g.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        let mut dir = &h_inv * &g;
        if dir.dot(&g) <= 0.0 {
            // reset to steepest ascent if curvature info went bad
            h_inv = DMatrix::identity(5, 5);
            dir = g.clone();
        }
        let slope = dir.dot(&g);
        let mut alpha = 1.0;
        let mut f_new = f64::NEG_INFINITY;
        let mut t_new = t;
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..5 {
                t_new[k] = t[k] + alpha * dir[k];
            }
            f_new = objective_t(data, &t_new);
            if f_new >= f + 1e-4 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || f_new <= f {
            converged = g.norm() < 1e-3;
            break;
        }
        let g_new = DVector::from_row_slice(&numeric_gradient(data, &t_new, grad_step));
        let s = DVector::from_iterator(5, (0..5).map(|k| t_new[k] - t[k]));
        let y = &g - &g_new; // ascent: y = -(grad_new - grad)
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(5, 5);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h_inv = &left * h_inv * right + &s * s.transpose() * rho;
        }
        t = t_new;
        f = f_new;
        g = g_new;
    }
    BfgsOutcome {
        t,
        objective: f,
        iterations,
        converged,
    }
}

fn moment_start(data: &DataMatrix, rng: &mut ChaCha8Rng, jitter: bool) -> [f64; 5] {
    // crude moments over all values
    let mut all = Vec::new();
    for v in 0..data.n_vars() {
        for i in 0..data.n_obs() {
            all.extend_from_slice(data.replicates(v, i));
        }
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut t = [
        mean,
        (0.4 * var).max(VAR_FLOOR).ln(),
        (0.3 * var).max(VAR_FLOOR).ln(),
        (2.0 * var).max(VAR_FLOOR).ln(),
        (0.1f64 / 0.9).ln(),
    ];
    if jitter {
        for (k, v) in t.iter_mut().enumerate() {
            let scale = if k == 0 { var.sqrt().max(0.1) } else { 1.0 };
            *v += scale * (rng.gen::<f64>() - 0.5) * 2.0;
        }
    }
    t
}

/// Multi-start empirical-Bayes fit. The provided init is always the first
/// start; the remainder are moment-based with jitter.
pub fn fit_empirical_bayes(data: &DataMatrix, init: &HyperParams) -> Result<FitResult> {
    fit_empirical_bayes_with(data, init, DEFAULT_STARTS, 0)
}

pub fn fit_empirical_bayes_with(
    data: &DataMatrix,
    init: &HyperParams,
    n_starts: usize,
    seed: u64,
) -> Result<FitResult> {
    init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<BfgsOutcome> = None;
    let mut objective_trace = Vec::new();
    for s in 0..n_starts.max(1) {
        let start = if s == 0 {
            to_transformed(init)
        } else if s == 1 {
            moment_start(data, &mut rng, false)
        } else {
            moment_start(data, &mut rng, true)
        };
        let out = bfgs(data, start);
        objective_trace.push(out.objective);
        if best.as_ref().map_or(true, |b| out.objective > b.objective) {
            best = Some(out);
        }
    }
    let best = best.unwrap();
    if !best.objective.is_finite() {
        return Err(Error::OptimizationFailure(format!(
            "objective non-finite after {} starts; trace {:?}",
            n_starts, objective_trace
        )));
    }
    let init_obj = objective_t(data, &to_transformed(init));
    if best.objective < init_obj {
        return Err(Error::OptimizationFailure(format!(
            "no ascent from init (init {} > best {})",
            init_obj, best.objective
        )));
    }
    let hyper = from_transformed(&best.t);

    let mut boundary_hits = Vec::new();
    if hyper.p <= P_FLOOR || hyper.p >= 1.0 - P_FLOOR {
        boundary_hits.push("p".to_string());
    }
    for (name, v) in [
        ("sigma2", hyper.sigma2),
        ("sigma2_eta", hyper.sigma2_eta),
        ("sigma2_theta", hyper.sigma2_theta),
    ] {
        if v <= VAR_FLOOR * 1.001 {
            boundary_hits.push(name.to_string());
        }
    }

    // observed information on the transformed scale
    let hess = numeric_hessian(data, &best.t, 1e-4);
    let info = -hess;
    let se_t: [f64; 5] = match info.clone().try_inverse() {
        Some(cov) => {
            let mut se = [f64::NAN; 5];
            for k in 0..5 {
                se[k] = if cov[(k, k)] > 0.0 {
                    cov[(k, k)].sqrt()
                } else {
                    f64::NAN
                };
            }
            se
        }
        None => [f64::NAN; 5],
    };
    // delta method back to the reporting scale
    let se = HyperStdErrs {
        mu: se_t[0],
        sigma2: hyper.sigma2 * se_t[1],
        sigma2_eta: hyper.sigma2_eta * se_t[2],
        sigma2_theta: hyper.sigma2_theta * se_t[3],
        p: hyper.p * (1.0 - hyper.p) * se_t[4],
    };

    Ok(FitResult {
        hyper,
        se,
        objective: best.objective,
        iterations: best.iterations,
        converged: best.converged,
        boundary_hits,
        objective_trace,
    })
}
