//! Orchestration of the four estimators over one or many chains: mixture
//! initialization, the EM loop, convergence control, decoding, and accuracy.
//!
//! All methods are initialized from the Poisson-mixture MAP labels and
//! iterate until the L1 change over (β, μ, σ²) drops below the tolerance.
//! E-steps fan out across chains; the M-step pools augmented rows over all
//! chains, so the fitted coefficients are shared across individuals while
//! each chain keeps its own initial-state distribution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::{forward_backward, poisson_ln_pmf, transition_posteriors, ForwardBackwardResult};
use crate::exec;
use crate::inference;
use crate::model::{
    transition_etas, transition_matrix, Chain, ModelParams, PosteriorWeights, StateModel,
    TransitionMode,
};
use crate::mstep::{
    augment, fit_poisson_mixture, fit_weighted_exp_ph, fit_weighted_exp_ph_frailty,
    fit_weighted_logistic, fit_weighted_logistic_frailty, Family, WEIGHT_FLOOR,
};

/// Estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Two-step Poisson mixture MAP estimator.
    Pmm,
    /// Discrete-time logistic-transition HMM.
    DtHmm,
    /// Continuous-time HMM (generator matrix exponential).
    CtHmm,
    /// Hazard-regression HMM.
    PhHmm,
}

impl Method {
    /// Transition-matrix mode used in the E-step.
    pub fn mode(self) -> TransitionMode {
        match self {
            Method::DtHmm => TransitionMode::Dt,
            Method::CtHmm => TransitionMode::Ct,
            // The mixture estimator never runs a forward-backward pass; the
            // hazard mode stands in where a Γ is formally required.
            Method::Pmm | Method::PhHmm => TransitionMode::Ph,
        }
    }
}

/// Where random intercepts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    /// Fixed effects only; indicator columns in the data are ignored.
    None,
    /// 24 hour-of-day intercepts derived from the timestamps.
    HourOfDay,
    /// One intercept per individual (chains sharing an id prefix before
    /// `#` belong to the same individual).
    PerIndividual,
    /// Use the indicator column already present in the data.
    FromData,
}

/// EM configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub method: Method,
    /// L1 parameter-change threshold over (β, μ, σ²).
    pub tol: f64,
    pub max_iters: usize,
    /// Population model: shared β plus per-individual random intercepts.
    /// Implies `PerIndividual` when `random_effects` is `None`.
    pub pooled: bool,
    pub random_effects: RandomEffects,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            method: Method::PhHmm,
            tol: 1e-4,
            max_iters: 500,
            pooled: false,
            random_effects: RandomEffects::None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Domain {
                op: "EmConfig::validate",
                msg: format!("tol must be positive, got {}", self.tol),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::Domain {
                op: "EmConfig::validate",
                msg: "max_iters must be at least 1".into(),
            });
        }
        Ok(())
    }

    fn effective_random_effects(&self) -> RandomEffects {
        if self.pooled && self.random_effects == RandomEffects::None {
            RandomEffects::PerIndividual
        } else {
            self.random_effects
        }
    }
}

/// Converged parameters, diagnostics, and per-chain posteriors.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Observed-data log-likelihood at the start of every iteration, plus a
    /// final entry at the converged parameters.
    pub loglik_trace: Vec<f64>,
    /// Asymptotic standard errors of the fixed effects, per state (empty
    /// when unavailable for the method).
    pub se: Vec<Vec<f64>>,
    pub posterior: Vec<PosteriorWeights>,
    /// Per-chain MAP label sequences (length n+1 each).
    pub decoded: Vec<Vec<usize>>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Forward-backward outputs of one E-step sweep over all chains.
pub struct EStepOutcome {
    pub fb: Vec<ForwardBackwardResult>,
    pub posteriors: Vec<PosteriorWeights>,
    /// Sum of the per-chain observed-data log-likelihoods.
    pub loglik: f64,
}

fn collect_estep(
    per_chain: Vec<Result<(ForwardBackwardResult, PosteriorWeights)>>,
) -> Result<EStepOutcome> {
    let mut fb = Vec::with_capacity(per_chain.len());
    let mut posteriors = Vec::with_capacity(per_chain.len());
    let mut loglik = 0.0;
    for item in per_chain {
        let (f, p) = item?;
        loglik += f.log_lik;
        fb.push(f);
        posteriors.push(p);
    }
    Ok(EStepOutcome {
        fb,
        posteriors,
        loglik,
    })
}

/// E-step over all chains; parallel when the `parallel` feature is active.
/// The log-likelihood reduction runs in chain order regardless.
pub fn e_step_all(
    chains: &[Chain],
    params: &ModelParams,
    mode: TransitionMode,
) -> Result<EStepOutcome> {
    let per_chain = exec::map_indices(chains.len(), |i| {
        let fb = forward_backward(&chains[i], &params.states, &params.delta0[i], mode)?;
        let post = transition_posteriors(&fb);
        Ok((fb, post))
    });
    collect_estep(per_chain)
}

/// Always-sequential E-step, for benchmarking against the dispatched path.
pub fn e_step_all_sequential(
    chains: &[Chain],
    params: &ModelParams,
    mode: TransitionMode,
) -> Result<EStepOutcome> {
    let per_chain = exec::map_indices_seq(chains.len(), |i| {
        let fb = forward_backward(&chains[i], &params.states, &params.delta0[i], mode)?;
        let post = transition_posteriors(&fb);
        Ok((fb, post))
    });
    collect_estep(per_chain)
}

// ---------------------------------------------------------------------------
// Poisson mixture (initialization and the PMM estimator)
// ---------------------------------------------------------------------------

/// Two-component Poisson mixture fit on pooled counts.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    /// Component weights, ordered with the high-mean component first.
    pub pi: [f64; 2],
    pub mu: [f64; 2],
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Component means collapsed within 1e-6 of each other.
    pub collapsed: bool,
}

impl MixtureFit {
    /// Posterior responsibility of the high-mean component.
    pub fn responsibility(&self, y: u64) -> f64 {
        let l1 = self.pi[0].ln() + poisson_ln_pmf(y, self.mu[0]);
        let l2 = self.pi[1].ln() + poisson_ln_pmf(y, self.mu[1]);
        let m = l1.max(l2);
        if m == f64::NEG_INFINITY {
            return 0.5;
        }
        let e1 = (l1 - m).exp();
        let e2 = (l2 - m).exp();
        e1 / (e1 + e2)
    }

    /// Hard MAP label (0 = high-mean component).
    pub fn map_label(&self, y: u64) -> usize {
        if self.responsibility(y) >= 0.5 {
            0
        } else {
            1
        }
    }
}

/// EM for a two-component Poisson mixture over pooled counts.
pub fn poisson_mixture_em(ys: &[u64], tol: f64, max_iters: usize) -> Result<MixtureFit> {
    if ys.len() < 2 {
        return Err(Error::Domain {
            op: "poisson_mixture_em",
            msg: "need at least two counts".into(),
        });
    }
    let mut sorted: Vec<u64> = ys.to_vec();
    sorted.sort_unstable();
    let half = sorted.len() / 2;
    let mean = |s: &[u64]| s.iter().sum::<u64>() as f64 / s.len().max(1) as f64;
    let mut mu = [mean(&sorted[half..]), mean(&sorted[..half])];
    if mu[0] == mu[1] {
        mu[0] += 0.5;
    }
    let mut pi: [f64; 2] = [0.5, 0.5];

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iters {
        iterations = iter + 1;
        let mut loglik = 0.0;
        let mut resp_sum = [0.0, 0.0];
        let mut resp_y = [0.0, 0.0];
        for &y in ys {
            let l1 = pi[0].max(1e-300).ln() + poisson_ln_pmf(y, mu[0]);
            let l2 = pi[1].max(1e-300).ln() + poisson_ln_pmf(y, mu[1]);
            let m = l1.max(l2);
            if m == f64::NEG_INFINITY {
                return Err(Error::DegenerateEmission {
                    context: "poisson_mixture_em".into(),
                    y,
                });
            }
            let e1 = (l1 - m).exp();
            let e2 = (l2 - m).exp();
            let denom = e1 + e2;
            loglik += m + denom.ln();
            let r1 = e1 / denom;
            resp_sum[0] += r1;
            resp_sum[1] += 1.0 - r1;
            resp_y[0] += r1 * y as f64;
            resp_y[1] += (1.0 - r1) * y as f64;
        }
        trace.push(loglik);
        let n = ys.len() as f64;
        let new_mu = [
            if resp_sum[0] > 0.0 {
                resp_y[0] / resp_sum[0]
            } else {
                mu[0]
            },
            if resp_sum[1] > 0.0 {
                resp_y[1] / resp_sum[1]
            } else {
                mu[1]
            },
        ];
        let new_pi = [resp_sum[0] / n, resp_sum[1] / n];
        let l1_change =
            (new_mu[0] - mu[0]).abs() + (new_mu[1] - mu[1]).abs() + (new_pi[0] - pi[0]).abs();
        mu = new_mu;
        pi = new_pi;
        if l1_change <= tol {
            converged = true;
            break;
        }
    }
    if mu[0] < mu[1] {
        mu.swap(0, 1);
        pi.swap(0, 1);
    }
    let collapsed = (mu[0] - mu[1]).abs() < 1e-6;
    Ok(MixtureFit {
        pi,
        mu,
        loglik_trace: trace,
        iterations,
        converged,
        collapsed,
    })
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

fn validate_chains(chains: &[Chain]) -> Result<usize> {
    if chains.is_empty() {
        return Err(Error::Domain {
            op: "fit",
            msg: "no chains provided".into(),
        });
    }
    let p = chains[0].p();
    for chain in chains {
        chain.validate()?;
        if chain.p() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                got: chain.p(),
            });
        }
    }
    Ok(p)
}

fn individual_key(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

/// Rewrites the indicator columns of the chains according to the
/// random-effects choice and returns the effective dimension.
fn effective_chains(chains: &[Chain], re: RandomEffects) -> (Vec<Chain>, usize) {
    match re {
        RandomEffects::None => {
            let out = chains
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.q = 0;
                    c.z0 = None;
                    for rec in &mut c.records {
                        rec.z_index = None;
                    }
                    c
                })
                .collect();
            (out, 0)
        }
        RandomEffects::HourOfDay => {
            let hour = |t: f64| -> usize { (t.floor() as i64).rem_euclid(24) as usize };
            let out = chains
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.q = 24;
                    c.z0 = Some(hour(c.t0));
                    for rec in &mut c.records {
                        rec.z_index = Some(hour(rec.t));
                    }
                    c
                })
                .collect();
            (out, 24)
        }
        RandomEffects::PerIndividual => {
            let mut keys: Vec<&str> = Vec::new();
            for c in chains {
                let key = individual_key(&c.id);
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
            let q = keys.len();
            let out = chains
                .iter()
                .map(|c| {
                    let idx = keys
                        .iter()
                        .position(|k| *k == individual_key(&c.id))
                        .unwrap();
                    let mut c = c.clone();
                    c.q = q;
                    c.z0 = Some(idx);
                    for rec in &mut c.records {
                        rec.z_index = Some(idx);
                    }
                    c
                })
                .collect();
            (out, q)
        }
        RandomEffects::FromData => {
            let q = chains.iter().map(|c| c.q).max().unwrap_or(0);
            let out = chains
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.q = q;
                    c
                })
                .collect();
            (out, q)
        }
    }
}

/// Hard one-hot posteriors from a label sequence.
fn hard_posteriors(labels: &[usize], k: usize) -> PosteriorWeights {
    let n = labels.len() - 1;
    let mut w = Vec::with_capacity(n);
    for j in 1..=n {
        let mut wm = DMatrix::zeros(k, k);
        wm[(labels[j - 1], labels[j])] = 1.0;
        w.push(wm);
    }
    let u = labels
        .iter()
        .map(|&s| {
            let mut v = DVector::zeros(k);
            v[s] = 1.0;
            v
        })
        .collect();
    PosteriorWeights { w, u }
}

struct TransitionFitOutcome {
    states: Vec<StateModel>,
    warnings: Vec<String>,
}

/// Fits the transition models of every state from pooled augmented rows;
/// `prev` supplies warm starts and the current σ² values.
fn fit_transition_models(
    chains: &[Chain],
    posteriors: &[PosteriorWeights],
    prev: &[StateModel],
    mus: &[f64],
    method: Method,
    q_eff: usize,
    p: usize,
) -> Result<TransitionFitOutcome> {
    let k = prev.len();
    let mut warnings = Vec::new();

    // The continuous-time method shares the weighted survival M-step with
    // the hazard method; it differs only in the E-step transition matrices.
    // Refitting rates through the generator likelihood itself (see
    // `fit_ct_generator`) admits a degenerate fast-mixing mode on
    // heterogeneous data, which the survival refit cannot reach.
    if method == Method::CtHmm {
        if k != 2 {
            return Err(Error::Unsupported(
                "the continuous-time method supports two states only".into(),
            ));
        }
        if q_eff > 0 {
            return Err(Error::Unsupported(
                "the continuous-time method does not support random intercepts".into(),
            ));
        }
    }

    let family = match method {
        Method::PhHmm | Method::Pmm | Method::CtHmm => Family::ExpPh,
        Method::DtHmm => Family::Logistic,
    };

    let mut states = Vec::with_capacity(k);
    for q in 0..k {
        let mut betas = Vec::with_capacity(k - 1);
        let mut b = DVector::zeros(0);
        let mut sigma2 = prev[q].sigma2;
        let mut out_idx = 0;
        let mut sigma2_updated = false;
        for r in 0..k {
            if r == q {
                continue;
            }
            let mut rows = Vec::new();
            for (chain, post) in chains.iter().zip(posteriors) {
                rows.extend(augment(chain, post, q, r, WEIGHT_FLOOR));
            }
            let warm = prev[q].betas.get(out_idx);
            if q_eff == 0 {
                let beta = match family {
                    Family::ExpPh => fit_weighted_exp_ph(&rows, p, warm)?.beta,
                    Family::Logistic => {
                        let fit = fit_weighted_logistic(&rows, p, warm)?;
                        if fit.separation {
                            warnings.push(format!(
                                "state {}→{} logistic fit hit separation (‖β‖ = {:.1})",
                                q + 1,
                                r + 1,
                                fit.beta.norm()
                            ));
                        }
                        fit.beta
                    }
                };
                betas.push(beta);
            } else {
                let fit = match family {
                    Family::ExpPh => fit_weighted_exp_ph_frailty(&rows, p, q_eff, warm, sigma2)?,
                    Family::Logistic => {
                        fit_weighted_logistic_frailty(&rows, p, q_eff, warm, sigma2)?
                    }
                };
                if fit.sigma2_at_floor && !sigma2_updated {
                    warnings.push(format!(
                        "state {} variance estimate at the floor ({:.1e})",
                        q + 1,
                        fit.sigma2
                    ));
                }
                betas.push(fit.beta);
                b = fit.b;
                sigma2 = fit.sigma2;
                sigma2_updated = true;
            }
            out_idx += 1;
        }
        states.push(StateModel {
            betas,
            b,
            sigma2,
            mu: mus[q],
        });
    }
    Ok(TransitionFitOutcome { states, warnings })
}

fn mu_update(chains: &[Chain], posteriors: &[PosteriorWeights]) -> Result<Vec<f64>> {
    let mut u_flat = Vec::new();
    let mut ys = Vec::new();
    for (chain, post) in chains.iter().zip(posteriors) {
        ys.push(chain.y0);
        u_flat.push(post.u[0].clone());
        for (j, rec) in chain.records.iter().enumerate() {
            ys.push(rec.y);
            u_flat.push(post.u[j + 1].clone());
        }
    }
    fit_poisson_mixture(&u_flat, &ys)
}

fn l1_distance(a: &[StateModel], b: &[StateModel], include_sigma2: bool) -> f64 {
    let mut d = 0.0;
    for (sa, sb) in a.iter().zip(b) {
        for (ba, bb) in sa.betas.iter().zip(&sb.betas) {
            d += (ba - bb).abs().sum();
        }
        d += (sa.mu - sb.mu).abs();
        if include_sigma2 {
            d += (sa.sigma2 - sb.sigma2).abs();
        }
    }
    d
}

fn standard_errors(
    chains: &[Chain],
    posteriors: &[PosteriorWeights],
    states: &[StateModel],
    method: Method,
    q_eff: usize,
    p: usize,
    warnings: &mut Vec<String>,
) -> Vec<Vec<f64>> {
    let k = states.len();
    let family = match method {
        Method::DtHmm => Family::Logistic,
        _ => Family::ExpPh,
    };
    let mut out = Vec::with_capacity(k);
    for q in 0..k {
        // Standard errors cover the first outgoing transition model of each
        // state (the only one when K = 2).
        let target = if q == 0 { 1 } else { 0 };
        let mut rows = Vec::new();
        for (chain, post) in chains.iter().zip(posteriors) {
            rows.extend(augment(chain, post, q, target, WEIGHT_FLOOR));
        }
        let sigma2 = (q_eff > 0).then_some(states[q].sigma2);
        match inference::observed_information_family(
            family,
            &rows,
            p,
            q_eff,
            &states[q].betas[0],
            &states[q].b,
            sigma2,
        )
        .and_then(|info| inference::asymptotic_se(&info))
        {
            Ok(se) => out.push(se),
            Err(e) => {
                warnings.push(format!(
                    "standard errors unavailable for state {}: {e}",
                    q + 1
                ));
                out.push(Vec::new());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PMM
// ---------------------------------------------------------------------------

/// Two-step mixture estimator: Poisson mixture EM, hard MAP labels, then
/// hazard fits on the labels (logistic fits when every elapsed time is one).
pub fn fit_pmm(chains: &[Chain]) -> Result<FitResult> {
    let p = validate_chains(chains)?;
    let (chains_eff, _) = effective_chains(chains, RandomEffects::None);

    let mut ys = Vec::new();
    for chain in &chains_eff {
        ys.push(chain.y0);
        ys.extend(chain.records.iter().map(|r| r.y));
    }
    let mixture = poisson_mixture_em(&ys, 1e-6, 500)?;
    if mixture.collapsed {
        return Err(Error::DegenerateMixture { mu: mixture.mu[0] });
    }

    let labels: Vec<Vec<usize>> = chains_eff
        .iter()
        .map(|chain| {
            let mut l = vec![mixture.map_label(chain.y0)];
            l.extend(chain.records.iter().map(|r| mixture.map_label(r.y)));
            l
        })
        .collect();
    let posteriors: Vec<PosteriorWeights> = labels.iter().map(|l| hard_posteriors(l, 2)).collect();

    // Regression stage matches the event-time structure of the data.
    let discrete = chains_eff
        .iter()
        .all(|c| c.records.iter().all(|r| (r.delta - 1.0).abs() < 1e-9));
    let method = if discrete { Method::DtHmm } else { Method::PhHmm };

    let init = vec![
        StateModel::new_k2(DVector::zeros(p), mixture.mu[0]),
        StateModel::new_k2(DVector::zeros(p), mixture.mu[1]),
    ];
    let fit = fit_transition_models(
        &chains_eff,
        &posteriors,
        &init,
        &[mixture.mu[0], mixture.mu[1]],
        method,
        0,
        p,
    )?;
    let mut warnings = fit.warnings;
    let states = fit.states;

    let delta0: Vec<DVector<f64>> = chains_eff
        .iter()
        .map(|chain| {
            let r = mixture.responsibility(chain.y0);
            DVector::from_vec(vec![r, 1.0 - r])
        })
        .collect();

    let se = standard_errors(
        &chains_eff,
        &posteriors,
        &states,
        method,
        0,
        p,
        &mut warnings,
    );
    Ok(FitResult {
        params: ModelParams { states, delta0 },
        loglik_trace: mixture.loglik_trace,
        se,
        posterior: posteriors,
        decoded: labels,
        iterations: mixture.iterations,
        converged: mixture.converged,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// EM driver
// ---------------------------------------------------------------------------

fn pmm_map_init(
    chains: &[Chain],
    method: Method,
    q_eff: usize,
    p: usize,
) -> Result<(ModelParams, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut ys = Vec::new();
    for chain in chains {
        ys.push(chain.y0);
        ys.extend(chain.records.iter().map(|r| r.y));
    }
    let mixture = poisson_mixture_em(&ys, 1e-6, 500)?;

    let (labels, mus, delta0): (Vec<Vec<usize>>, [f64; 2], Vec<DVector<f64>>) = if mixture.collapsed
    {
        // Quantile-split fallback: the threshold that best balances the two
        // halves, counts strictly above it going to the high-mean state.
        warnings
            .push("mixture collapsed at initialization; using quantile-split labels".into());
        let mut sorted = ys.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let half = ys.len() as i64 / 2;
        let threshold = sorted
            .iter()
            .copied()
            .min_by_key(|&c| {
                let above = ys.iter().filter(|&&y| y > c).count() as i64;
                (above - half).abs()
            })
            .unwrap_or(0);
        let lab = |y: u64| if y > threshold { 0usize } else { 1 };
        let labels: Vec<Vec<usize>> = chains
            .iter()
            .map(|chain| {
                let mut l = vec![lab(chain.y0)];
                l.extend(chain.records.iter().map(|r| lab(r.y)));
                l
            })
            .collect();
        let mut sums = [0.0, 0.0];
        let mut counts = [0.0, 0.0];
        for (chain, labs) in chains.iter().zip(&labels) {
            let all_ys = std::iter::once(chain.y0).chain(chain.records.iter().map(|r| r.y));
            for (y, &l) in all_ys.zip(labs) {
                sums[l] += y as f64;
                counts[l] += 1.0;
            }
        }
        let mus = [
            if counts[0] > 0.0 { sums[0] / counts[0] } else { 0.0 },
            if counts[1] > 0.0 { sums[1] / counts[1] } else { 0.0 },
        ];
        let delta0 = labels
            .iter()
            .map(|l| {
                let mut v = DVector::zeros(2);
                v[l[0]] = 1.0;
                v
            })
            .collect();
        (labels, mus, delta0)
    } else {
        let labels: Vec<Vec<usize>> = chains
            .iter()
            .map(|chain| {
                let mut l = vec![mixture.map_label(chain.y0)];
                l.extend(chain.records.iter().map(|r| mixture.map_label(r.y)));
                l
            })
            .collect();
        let delta0 = chains
            .iter()
            .map(|chain| {
                let r = mixture.responsibility(chain.y0);
                DVector::from_vec(vec![r, 1.0 - r])
            })
            .collect();
        (labels, mixture.mu, delta0)
    };

    let posteriors: Vec<PosteriorWeights> = labels.iter().map(|l| hard_posteriors(l, 2)).collect();
    let b_init = DVector::zeros(q_eff);
    let init_states = vec![
        StateModel {
            betas: vec![DVector::zeros(p)],
            b: b_init.clone(),
            sigma2: 1.0,
            mu: mus[0],
        },
        StateModel {
            betas: vec![DVector::zeros(p)],
            b: b_init,
            sigma2: 1.0,
            mu: mus[1],
        },
    ];
    let fit = fit_transition_models(
        chains,
        &posteriors,
        &init_states,
        &mus.to_vec(),
        method,
        q_eff,
        p,
    )?;
    warnings.extend(fit.warnings);
    let mut params = ModelParams {
        states: fit.states,
        delta0,
    };
    params.order_by_mu();
    Ok((params, warnings))
}

/// EM fit of one of the HMM methods over a set of chains, initialized from
/// the Poisson-mixture MAP labels.
pub fn fit_em(chains: &[Chain], config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    if config.method == Method::Pmm {
        return fit_pmm(chains);
    }
    let p = validate_chains(chains)?;
    let (chains_eff, q_eff) = effective_chains(chains, config.effective_random_effects());
    let mode = config.method.mode();

    let (mut params, mut warnings) = pmm_map_init(&chains_eff, config.method, q_eff, p)?;

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // Fixed-effect runs are expected to climb; dips above this are surfaced.
    // Laplace-approximated runs get a looser bound.
    let dip_tol = if q_eff == 0 { 1e-8 } else { 1e-3 };

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let estep = e_step_all(&chains_eff, &params, mode)?;
        if let Some(&prev_ll) = trace.last() {
            if estep.loglik < prev_ll - dip_tol {
                warnings.push(format!(
                    "log-likelihood decreased by {:.3e} at iteration {iter}",
                    prev_ll - estep.loglik
                ));
            }
        }
        trace.push(estep.loglik);

        let mus = mu_update(&chains_eff, &estep.posteriors).map_err(|e| match e {
            Error::StateStarvation { state, weight, .. } => Error::StateStarvation {
                state,
                weight,
                iteration: Some(iter),
            },
            other => other,
        })?;
        let fit = fit_transition_models(
            &chains_eff,
            &estep.posteriors,
            &params.states,
            &mus,
            config.method,
            q_eff,
            p,
        )?;
        warnings.extend(fit.warnings);

        let delta0 = estep
            .posteriors
            .iter()
            .map(|post| post.u[0].clone())
            .collect();
        let mut new_params = ModelParams {
            states: fit.states,
            delta0,
        };
        new_params.order_by_mu();

        let l1 = l1_distance(&params.states, &new_params.states, q_eff > 0);
        params = new_params;
        if l1 <= config.tol {
            converged = true;
            break;
        }
    }

    // Final E-step at the converged parameters.
    let estep = e_step_all(&chains_eff, &params, mode)?;
    if let Some(&prev_ll) = trace.last() {
        if estep.loglik < prev_ll - dip_tol {
            warnings.push(format!(
                "log-likelihood decreased by {:.3e} at the final evaluation",
                prev_ll - estep.loglik
            ));
        }
    }
    trace.push(estep.loglik);
    let decoded = estep
        .posteriors
        .iter()
        .map(|post| map_decode(&post.u))
        .collect();
    let se = standard_errors(
        &chains_eff,
        &estep.posteriors,
        &params.states,
        config.method,
        q_eff,
        p,
        &mut warnings,
    );
    if !converged {
        warnings.push(format!(
            "EM did not reach the L1 tolerance {} within {} iterations",
            config.tol, config.max_iters
        ));
    }

    Ok(FitResult {
        params,
        loglik_trace: trace,
        se,
        posterior: estep.posteriors,
        decoded,
        iterations,
        converged,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Decoding and accuracy
// ---------------------------------------------------------------------------

/// Per-record argmax of the posterior state probabilities; ties break toward
/// the lower state index.
pub fn map_decode(u: &[DVector<f64>]) -> Vec<usize> {
    u.iter()
        .map(|v| {
            let mut best = 0;
            for s in 1..v.len() {
                if v[s] > v[best] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

/// Most probable state path under the model, by log-space dynamic
/// programming; ties break toward the lower state index.
pub fn viterbi_decode(
    chain: &Chain,
    states: &[StateModel],
    delta0: &DVector<f64>,
    mode: TransitionMode,
) -> Vec<usize> {
    let k = states.len();
    let n = chain.n();
    let mus: Vec<f64> = states.iter().map(|s| s.mu).collect();

    let mut score: Vec<f64> = (0..k)
        .map(|s| delta0[s].ln() + poisson_ln_pmf(chain.y0, mus[s]))
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for rec in &chain.records {
        let etas = transition_etas(states, &rec.x, rec.z_index);
        let gamma = transition_matrix(&etas, mode, rec.delta);
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut ptr = vec![0usize; k];
        for r in 0..k {
            let emit = poisson_ln_pmf(rec.y, mus[r]);
            for q in 0..k {
                let cand = score[q] + gamma[(q, r)].ln() + emit;
                if cand > next[r] {
                    next[r] = cand;
                    ptr[r] = q;
                }
            }
        }
        score = next;
        back.push(ptr);
    }

    let mut best = 0;
    for s in 1..k {
        if score[s] > score[best] {
            best = s;
        }
    }
    let mut path = vec![0usize; n + 1];
    path[n] = best;
    for j in (0..n).rev() {
        path[j] = back[j][path[j + 1]];
    }
    path
}

/// Fraction of positions where the decoded labels match the truth. State
/// identities are fixed by the μ-ordering convention, so no permutation
/// search is applied.
pub fn accuracy(truth: &[usize], decoded: &[usize]) -> Result<f64> {
    if truth.len() != decoded.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: decoded.len(),
        });
    }
    let matches = truth.iter().zip(decoded).filter(|(a, b)| a == b).count();
    Ok(matches as f64 / truth.len() as f64)
}
