//! Scaled forward-backward recursion and posterior weights.
//!
//! Forward vectors fold the emission at their own index; backward vectors do
//! too, so the product identity α'(t_j) Γ(t_{j+1}) ν(t_{j+1}) covers every
//! observation exactly once. Both passes normalize each vector to sum one and
//! accumulate the log normalizers; the observed-data log-likelihood is the
//! sum of the forward log normalizers.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{
    transition_etas, transition_matrix, Chain, PosteriorWeights, StateModel, TransitionMode,
};

/// Poisson log-pmf with the μ = 0 point mass at zero.
pub fn poisson_ln_pmf(y: u64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0)
}

/// Diagonal emission matrix P = diag(f(y | μ_1), …, f(y | μ_K)).
pub fn emission_matrix(y: u64, mus: &[f64]) -> Result<DMatrix<f64>> {
    let probs = emission_probs(y, mus);
    if probs.iter().all(|&p| p == 0.0) {
        return Err(Error::DegenerateEmission {
            context: "emission_matrix".into(),
            y,
        });
    }
    Ok(DMatrix::from_diagonal(&probs))
}

fn emission_probs(y: u64, mus: &[f64]) -> DVector<f64> {
    DVector::from_iterator(mus.len(), mus.iter().map(|&mu| poisson_ln_pmf(y, mu).exp()))
}

/// Scaled forward/backward vectors, cached transition matrices, and the
/// observed-data log-likelihood for one chain.
#[derive(Debug, Clone)]
pub struct ForwardBackwardResult {
    /// Scaled forward vectors, indices 0..=n; each sums to one.
    pub alpha: Vec<DVector<f64>>,
    /// Scaled backward vectors, indices 0..=n.
    pub nu: Vec<DVector<f64>>,
    /// log Pr(Y = y | X, Θ).
    pub log_lik: f64,
    /// Log normalizers of the forward pass (one per observation).
    pub alpha_log_scale: Vec<f64>,
    /// Log normalizers of the backward pass.
    pub nu_log_scale: Vec<f64>,
    /// Γ(t_j) for each transition record, cached for posterior computation.
    pub gammas: Vec<DMatrix<f64>>,
}

/// Recursion core over explicit emission vectors and transition matrices.
/// `emissions` has one pmf vector per observation (n+1 of them), `gammas`
/// one matrix per transition record.
pub fn forward_backward_raw(
    emissions: &[DVector<f64>],
    gammas: Vec<DMatrix<f64>>,
    delta0: &DVector<f64>,
    context: &str,
) -> Result<ForwardBackwardResult> {
    let n = gammas.len();
    assert_eq!(emissions.len(), n + 1);
    let k = delta0.len();

    let mut alpha = Vec::with_capacity(n + 1);
    let mut alpha_log_scale = Vec::with_capacity(n + 1);
    let mut cur = delta0.component_mul(&emissions[0]);
    let mut scale = cur.sum();
    if !(scale > 0.0) {
        return Err(Error::DegenerateEmission {
            context: format!("{context} record 0 (zero initial mass)"),
            y: 0,
        });
    }
    cur /= scale;
    alpha_log_scale.push(scale.ln());
    alpha.push(cur);
    for j in 1..=n {
        let propagated = gammas[j - 1].transpose() * &alpha[j - 1];
        let mut next = propagated.component_mul(&emissions[j]);
        scale = next.sum();
        if !(scale > 0.0) {
            return Err(Error::DegenerateEmission {
                context: format!("{context} record {j} (zero forward mass)"),
                y: 0,
            });
        }
        next /= scale;
        alpha_log_scale.push(scale.ln());
        alpha.push(next);
    }
    let log_lik: f64 = alpha_log_scale.iter().sum();

    let mut nu = vec![DVector::zeros(k); n + 1];
    let mut nu_log_scale = vec![0.0; n + 1];
    let mut cur = emissions[n].clone();
    let s = cur.sum();
    cur /= s;
    nu_log_scale[n] = s.ln();
    nu[n] = cur;
    for j in (0..n).rev() {
        let propagated = &gammas[j] * &nu[j + 1];
        let mut v = emissions[j].component_mul(&propagated);
        let s = v.sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateEmission {
                context: format!("{context} record {j} (zero backward mass)"),
                y: 0,
            });
        }
        v /= s;
        nu_log_scale[j] = s.ln();
        nu[j] = v;
    }

    Ok(ForwardBackwardResult {
        alpha,
        nu,
        log_lik,
        alpha_log_scale,
        nu_log_scale,
        gammas,
    })
}

/// Runs the scaled forward-backward recursion for one chain.
pub fn forward_backward(
    chain: &Chain,
    states: &[StateModel],
    delta0: &DVector<f64>,
    mode: TransitionMode,
) -> Result<ForwardBackwardResult> {
    let k = states.len();
    assert_eq!(delta0.len(), k);
    let n = chain.n();
    let mus: Vec<f64> = states.iter().map(|s| s.mu).collect();

    let gammas: Vec<DMatrix<f64>> = chain
        .records
        .iter()
        .map(|rec| {
            let etas = transition_etas(states, &rec.x, rec.z_index);
            transition_matrix(&etas, mode, rec.delta)
        })
        .collect();

    let mut emissions = Vec::with_capacity(n + 1);
    let p0 = emission_probs(chain.y0, &mus);
    if p0.iter().all(|&p| p == 0.0) {
        return Err(Error::DegenerateEmission {
            context: format!("chain {} record 0", chain.id),
            y: chain.y0,
        });
    }
    emissions.push(p0);
    for (j, rec) in chain.records.iter().enumerate() {
        let pj = emission_probs(rec.y, &mus);
        if pj.iter().all(|&p| p == 0.0) {
            return Err(Error::DegenerateEmission {
                context: format!("chain {} record {}", chain.id, j + 1),
                y: rec.y,
            });
        }
        emissions.push(pj);
    }

    forward_backward_raw(&emissions, gammas, delta0, &format!("chain {}", chain.id))
}

/// Pairwise transition posteriors w and state posteriors u from a completed
/// forward-backward pass.
///
/// w(t_j) entry (q, r) ∝ α_q(t_{j-1}) γ_qr(t_j) ν_r(t_j), normalized over all
/// K² entries; u(t_j) ∝ α(t_j) ⊙ (Γ(t_{j+1}) ν(t_{j+1})) with the final
/// record's u equal to the forward vector alone.
pub fn transition_posteriors(fb: &ForwardBackwardResult) -> PosteriorWeights {
    let n = fb.gammas.len();
    let k = fb.alpha[0].len();

    let mut w = Vec::with_capacity(n);
    for j in 1..=n {
        let mut wm = DMatrix::zeros(k, k);
        for q in 0..k {
            for r in 0..k {
                wm[(q, r)] = fb.alpha[j - 1][q] * fb.gammas[j - 1][(q, r)] * fb.nu[j][r];
            }
        }
        let total = wm.sum();
        debug_assert!(total > 0.0);
        w.push(wm / total);
    }

    let mut u = Vec::with_capacity(n + 1);
    for j in 0..n {
        let future = &fb.gammas[j] * &fb.nu[j + 1];
        let mut uv = fb.alpha[j].component_mul(&future);
        let total = uv.sum();
        debug_assert!(total > 0.0);
        uv /= total;
        u.push(uv);
    }
    u.push(fb.alpha[n].clone());

    PosteriorWeights { w, u }
}

/// Posterior transition shares out of one state in the multinomial E-step:
/// stay with share 1/(1+Σλ), move to target k with share λ_k/(1+Σλ).
pub fn multinomial_estep_weight(lambdas: &[f64]) -> Vec<f64> {
    let denom = 1.0 + lambdas.iter().sum::<f64>();
    let mut shares = Vec::with_capacity(lambdas.len() + 1);
    shares.push(1.0 / denom);
    shares.extend(lambdas.iter().map(|&l| l / denom));
    shares
}
