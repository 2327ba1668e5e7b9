//! Estimation of version-specific causal effects when a treatment hides
//! several latent versions.
//!
//! Each treatment arm is modeled as a mixture of Gaussian linear experts
//! with a multinomial-logit gating network; the treatment itself follows a
//! multinomial-logit assignment model. Parameters are fitted by EM and the
//! version-specific potential-outcome means are estimated with a plug-in
//! Horvitz-Thompson estimator.

pub mod em;
pub mod error;
pub mod estimate;
pub mod glm;
pub mod io;
pub mod model;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
