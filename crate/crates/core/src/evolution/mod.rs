//! Behavior-conditional state evolution: Gaussian mixtures, conditional
//! mixture regression, and the particle propagation step that samples a
//! behavior per particle before drawing its next state.

mod cgmr;
mod gmm;
mod htspm;

pub use cgmr::{cgmr_condition, cgmr_sample, CgmrModel};
pub(crate) use gmm::kmeans;
pub use gmm::{gmm_fit_em, gmm_fit_em_traced, trace_is_monotone, EmConfig, EmFit, Gmm};
pub use htspm::{htspm_propagate, BehaviorEvolution, HtspmModel, StateHistory};
