//! Elementary model mathematics and the domain types shared by every module.
//!
//! The transition structure comes in three flavors selected by
//! [`TransitionMode`]:
//!
//! * `Ph` and `Dt` — one-step probabilities are logistic (K = 2) or
//!   multinomial (K ≥ 3) functions of the per-transition hazards. The elapsed
//!   time Δ cancels out of these probabilities, so [`transition_matrix`]
//!   ignores it in both modes; Δ re-enters only through the survival
//!   likelihood maximized in the M-step.
//! * `Ct` — the matrix exponential of a generator built from the hazards,
//!   scaled by Δ. The 2-state case uses the closed form; larger generators go
//!   through scaling-and-squaring with a degree-6 Padé approximant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this range before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of hazard evaluations that hit the [`ETA_CLAMP`] guard since the
/// last [`reset_clamp_events`].
pub fn clamp_event_count() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_clamp_events() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Hazard rate λ = exp(η), with η clamped to ±[`ETA_CLAMP`].
pub fn hazard(eta: f64) -> f64 {
    if eta.abs() > ETA_CLAMP {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()
    } else {
        eta.exp()
    }
}

/// Logistic function 1/(1+e^{-η}), stable over the whole real line.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^η) without overflow for large η.
pub fn softplus(eta: f64) -> f64 {
    if eta > 30.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Exponential density f(Δ | λ) = λ e^{-λΔ}.
pub fn exp_density(delta: f64, lambda: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Domain {
            op: "exp_density",
            msg: format!("delta must be positive, got {delta}"),
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain {
            op: "exp_density",
            msg: format!("lambda must be positive, got {lambda}"),
        });
    }
    Ok(lambda * (-lambda * delta).exp())
}

/// Exponential survival S(Δ | λ) = e^{-λΔ}.
///
/// λ = 0 is accepted as the no-hazard boundary and yields 1.
pub fn exp_survival(delta: f64, lambda: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Domain {
            op: "exp_survival",
            msg: format!("delta must be positive, got {delta}"),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain {
            op: "exp_survival",
            msg: format!("lambda must be non-negative, got {lambda}"),
        });
    }
    Ok((-lambda * delta).exp())
}

/// How per-record transition probabilities are formed from hazards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    /// Hazard-normalized probabilities (logistic/multinomial); Δ ignored.
    Ph,
    /// Discrete-time logistic/multinomial probabilities; identical to `Ph`.
    Dt,
    /// Matrix exponential of the hazard generator, scaled by Δ.
    Ct,
}

/// One-step transition probability matrix Γ for a K-state chain.
///
/// `etas[(q, r)]` is the linear predictor for the q→r transition; diagonal
/// entries are ignored. Rows of the result sum to one.
pub fn transition_matrix(etas: &DMatrix<f64>, mode: TransitionMode, delta: f64) -> DMatrix<f64> {
    let k = etas.nrows();
    assert_eq!(k, etas.ncols(), "etas must be square");
    assert!(k >= 2, "need at least two states");
    match mode {
        TransitionMode::Ph | TransitionMode::Dt => {
            let mut gamma = DMatrix::zeros(k, k);
            for q in 0..k {
                let mut denom = 1.0;
                for r in 0..k {
                    if r != q {
                        denom += hazard(etas[(q, r)]);
                    }
                }
                for r in 0..k {
                    gamma[(q, r)] = if r == q {
                        1.0 / denom
                    } else {
                        hazard(etas[(q, r)]) / denom
                    };
                }
            }
            gamma
        }
        TransitionMode::Ct => {
            let mut gen = DMatrix::zeros(k, k);
            for q in 0..k {
                let mut total = 0.0;
                for r in 0..k {
                    if r != q {
                        let rate = hazard(etas[(q, r)]);
                        gen[(q, r)] = rate;
                        total += rate;
                    }
                }
                gen[(q, q)] = -total;
            }
            if k == 2 {
                expm_generator_2x2(gen[(0, 1)], gen[(1, 0)], delta)
            } else {
                expm_generator(&(gen * delta))
            }
        }
    }
}

/// Closed-form matrix exponential of a 2-state generator with rates
/// q12, q21 over elapsed time Δ: Γ = I + (1 - e^{-sΔ})/s · Q with s = q12+q21.
pub fn expm_generator_2x2(q12: f64, q21: f64, delta: f64) -> DMatrix<f64> {
    let s = q12 + q21;
    // (1 - e^{-sΔ})/s, with the s→0 limit Δ.
    let factor = if s > 0.0 {
        -(-s * delta).exp_m1() / s
    } else {
        delta
    };
    DMatrix::from_row_slice(
        2,
        2,
        &[
            1.0 - factor * q12,
            factor * q12,
            factor * q21,
            1.0 - factor * q21,
        ],
    )
}

/// Matrix exponential by scaling-and-squaring with a degree-6 Padé
/// approximant.
pub fn expm_pade6(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    // Infinity norm decides the number of squarings.
    let norm = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2.0_f64.powi(s as i32);

    // Padé(6,6) coefficients of e^x.
    const B: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let eye = DMatrix::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    // Even part V = b0 I + b2 A^2 + b4 A^4 + b6 A^6, odd part U = A (b1 I + b3 A^2 + b5 A^4).
    let v = &eye * B[0] + &a2 * B[2] + &a4 * B[4] + &a6 * B[6];
    let u = &scaled * (&eye * B[1] + &a2 * B[3] + &a4 * B[5]);
    // N = V + U, D = V - U; expm ≈ D^{-1} N.
    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is singular");
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// [`expm_pade6`] of a generator, with rounding drift in the (mathematically
/// exact) unit row sums normalized away.
fn expm_generator(gen_delta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = expm_pade6(gen_delta);
    for q in 0..g.nrows() {
        let mut sum = 0.0;
        for r in 0..g.ncols() {
            if g[(q, r)] < 0.0 {
                g[(q, r)] = 0.0;
            }
            sum += g[(q, r)];
        }
        for r in 0..g.ncols() {
            g[(q, r)] /= sum;
        }
    }
    g
}

/// Convex gap between the discrete-time hazard and logistic objectives:
/// Σ_j [ -log(1+e^{η_j}) + e^{η_j} ], strictly positive for nonempty input.
pub fn ph_penalty(etas: &[f64]) -> f64 {
    etas.iter().map(|&eta| hazard(eta) - softplus(eta)).sum()
}

/// Result of assembling the penalty Hessian X^T Ω X.
#[derive(Debug, Clone)]
pub struct PenaltyHessianCheck {
    /// Smallest eigenvalue is at least -1e-10.
    pub psd: bool,
    pub min_eigenvalue: f64,
    /// Diagonal of Ω: exp(η)[1 - (1+exp(η))^{-2}] per row.
    pub omega: Vec<f64>,
}

/// Assembles the penalty Hessian X^T Ω X for the given design rows and
/// coefficients, and checks positive semidefiniteness.
pub fn penalty_hessian_check(design: &DMatrix<f64>, beta: &DVector<f64>) -> PenaltyHessianCheck {
    assert!(design.nrows() > 0, "design must be nonempty");
    assert_eq!(design.ncols(), beta.len());
    let etas = design * beta;
    let omega: Vec<f64> = etas
        .iter()
        .map(|&eta| {
            let e = hazard(eta);
            e * (1.0 - (1.0 + e).powi(-2))
        })
        .collect();
    let p = design.ncols();
    let mut h: DMatrix<f64> = DMatrix::zeros(p, p);
    for (i, &w) in omega.iter().enumerate() {
        let row = design.row(i);
        for a in 0..p {
            for c in 0..p {
                h[(a, c)] += w * row[a] * row[c];
            }
        }
    }
    let min_eigenvalue = h
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    PenaltyHessianCheck {
        psd: min_eigenvalue >= -1e-10,
        min_eigenvalue,
        omega,
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A single time-stamped observation within one individual's chain.
///
/// The random-effect indicator is stored sparsely: `z_index = Some(r)` means
/// the r-th indicator is one and the rest are zero; `None` means all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// Timestamp in hours.
    pub t: f64,
    /// Elapsed time since the previous record, > 0 (exactly 1 in discrete mode).
    pub delta: f64,
    /// Fixed-covariate vector; the intercept 1 is the first entry.
    pub x: Vec<f64>,
    /// Active random-effect indicator, if any.
    pub z_index: Option<usize>,
    /// Emission count.
    pub y: u64,
}

/// One individual's time-ordered observations.
///
/// `records[j]` holds the j+1-th observation; the initial observation at
/// `t0` contributes only its emission count `y0` (no elapsed time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub id: String,
    pub t0: f64,
    pub y0: u64,
    /// Covariates at the initial timestamp (carried for serialization only).
    pub x0: Vec<f64>,
    pub z0: Option<usize>,
    /// Random-effect dimension; all `z_index` values are below this.
    pub q: usize,
    pub records: Vec<ObservationRecord>,
}

impl Chain {
    /// Number of transition records (the chain has `n() + 1` observations).
    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Fixed-covariate dimension.
    pub fn p(&self) -> usize {
        self.records.first().map_or(self.x0.len(), |r| r.x.len())
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        let mut prev_t = self.t0;
        for (j, rec) in self.records.iter().enumerate() {
            if !(rec.delta > 0.0) {
                return Err(Error::Domain {
                    op: "Chain::validate",
                    msg: format!("chain {} record {j}: delta {} must be > 0", self.id, rec.delta),
                });
            }
            if rec.t <= prev_t {
                return Err(Error::Domain {
                    op: "Chain::validate",
                    msg: format!(
                        "chain {} record {j}: timestamp {} not increasing past {}",
                        self.id, rec.t, prev_t
                    ),
                });
            }
            if rec.x.len() != p {
                return Err(Error::LengthMismatch {
                    expected: p,
                    got: rec.x.len(),
                });
            }
            if let Some(z) = rec.z_index {
                if z >= self.q {
                    return Err(Error::Domain {
                        op: "Chain::validate",
                        msg: format!(
                            "chain {} record {j}: z index {z} out of range (q = {})",
                            self.id, self.q
                        ),
                    });
                }
            }
            prev_t = rec.t;
        }
        Ok(())
    }
}

/// Per-state parameters.
///
/// `betas` holds one coefficient vector per outgoing transition, ordered by
/// increasing target state index (skipping the state itself); a 2-state model
/// has exactly one. Random intercepts `b` are empty when the model carries no
/// random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub betas: Vec<DVector<f64>>,
    pub b: DVector<f64>,
    pub sigma2: f64,
    pub mu: f64,
}

impl StateModel {
    /// Two-state constructor: a single outgoing coefficient vector, no
    /// random effects.
    pub fn new_k2(beta: DVector<f64>, mu: f64) -> Self {
        StateModel {
            betas: vec![beta],
            b: DVector::zeros(0),
            sigma2: 1.0,
            mu,
        }
    }

    /// The unique outgoing coefficient vector of a 2-state model.
    pub fn beta(&self) -> &DVector<f64> {
        assert_eq!(self.betas.len(), 1, "beta() requires a 2-state model");
        &self.betas[0]
    }
}

/// Linear predictor x'β + b[z] for one record. A model without random
/// intercepts (empty `b`) ignores the record's indicator.
pub fn linear_predictor(
    beta: &DVector<f64>,
    b: &DVector<f64>,
    x: &[f64],
    z_index: Option<usize>,
) -> f64 {
    debug_assert_eq!(beta.len(), x.len());
    let mut eta = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        eta += beta[i] * xi;
    }
    if let Some(z) = z_index {
        if !b.is_empty() {
            eta += b[z];
        }
    }
    eta
}

/// K×K matrix of transition linear predictors at one record; diagonal unused.
pub fn transition_etas(states: &[StateModel], x: &[f64], z_index: Option<usize>) -> DMatrix<f64> {
    let k = states.len();
    let mut etas = DMatrix::zeros(k, k);
    for (q, st) in states.iter().enumerate() {
        let mut out = 0;
        for r in 0..k {
            if r == q {
                continue;
            }
            etas[(q, r)] = linear_predictor(&st.betas[out], &st.b, x, z_index);
            out += 1;
        }
    }
    etas
}

/// Full parameter set: state models plus per-chain initial distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub states: Vec<StateModel>,
    /// One K-simplex vector per chain, in chain order.
    pub delta0: Vec<DVector<f64>>,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.states.len()
    }

    /// Enforces the labeling convention μ₁ > μ₂ > …, permuting states and
    /// initial distributions. Returns true when a permutation was applied.
    /// Only supported for 2-state models beyond the already-sorted case.
    pub fn order_by_mu(&mut self) -> bool {
        let sorted = self
            .states
            .windows(2)
            .all(|w| w[0].mu >= w[1].mu);
        if sorted {
            return false;
        }
        assert_eq!(self.k(), 2, "state reordering implemented for K = 2");
        self.states.swap(0, 1);
        for d in &mut self.delta0 {
            d.swap_rows(0, 1);
        }
        true
    }

    pub fn validate(&self, n_chains: usize) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::Domain {
                op: "ModelParams::validate",
                msg: format!("need at least 2 states, got {}", self.k()),
            });
        }
        if self.delta0.len() != n_chains {
            return Err(Error::LengthMismatch {
                expected: n_chains,
                got: self.delta0.len(),
            });
        }
        for (i, d) in self.delta0.iter().enumerate() {
            let sum: f64 = d.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || d.iter().any(|&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "ModelParams::validate",
                    msg: format!("delta0[{i}] is not a probability vector (sum {sum})"),
                });
            }
        }
        Ok(())
    }
}

/// Posterior transition weights and state memberships for one chain.
///
/// `w[j]` is the K×K posterior over the transition into record j (entries sum
/// to one); `u[j]` is the K-vector posterior over the state at observation j
/// (length n+1, including the initial observation).
#[derive(Debug, Clone)]
pub struct PosteriorWeights {
    pub w: Vec<DMatrix<f64>>,
    pub u: Vec<DVector<f64>>,
}
