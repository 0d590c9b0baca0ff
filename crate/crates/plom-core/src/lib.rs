//! Probabilistic learning on manifolds with two projection bases: the
//! diffusion-maps basis and the transient anisotropic-kernel basis built from
//! the nonstationary transition density of the sampling diffusion.

pub mod data_model;
pub mod error;
pub mod gaussian_reference;
pub mod gkde;
pub mod info_metrics;
pub mod io;
pub mod isde;
pub mod kernels;
pub mod linalg;
pub mod pipeline;
pub mod plom;
pub mod rng;
pub mod selection;
pub mod synthetic;

pub use error::{Error, Result};
