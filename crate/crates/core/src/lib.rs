//! Direct-simulation Monte Carlo for the spatially homogeneous inelastic
//! hard-sphere Boltzmann equation with a velocity-diffusion heat bath,
//! together with the closed-form predictions it is checked against.

pub mod analytics;
pub mod dsmc;
pub mod error;
pub mod experiments;
pub mod kinematics;
pub mod observables;
pub mod quadrature;
pub mod rng;
pub mod snapshot;
pub mod validation;

pub use error::{Error, Result};
