//! Markov chain Monte Carlo and variational inference combined: stochastic
//! lower bounds on the log marginal likelihood built from chains of
//! transition operators with learned reverse models.

pub mod autodiff;
pub mod bound;
pub mod distributions;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod markov;
pub mod optimize;
pub mod params;
pub mod special;
pub mod targets;

pub use error::{Error, Result};
