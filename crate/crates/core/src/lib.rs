//! Estimation of alternating latent-state processes whose transitions are
//! driven by hazard regressions, observed only through count emissions.
//!
//! The library couples a two-state (or K-state) hidden Markov model with
//! exponential proportional-hazards regressions on the transition rates. An
//! EM algorithm alternates a forward-backward E-step — transition
//! probabilities are logistic (or multinomial) functions of the hazards —
//! with an M-step that fits independent weighted survival models on
//! event/censor-augmented data. Alongside the hazard-regression HMM
//! (`PhHmm`) it implements three competitor estimators (`Pmm`, `DtHmm`,
//! `CtHmm`), data simulators, observed-information standard errors, and a
//! replication harness for simulation studies.
//!
//! Chain-level work (E-steps, simulation, replicates) is data-parallel via
//! rayon under the default `parallel` feature; disabling the feature yields
//! a fully sequential build with identical results.

pub mod em;
pub mod error;
pub mod estep;
pub mod exec;
pub mod inference;
pub mod io;
pub mod model;
pub mod mstep;
pub mod optim;
pub mod replicate;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Chain, ModelParams, ObservationRecord, PosteriorWeights, StateModel, TransitionMode};
