//! Model-generic sequential Monte Carlo.
//!
//! Models are written in a small declarative language, compiled into a
//! scalar node graph, and handed to the filters (bootstrap, auxiliary,
//! Liu–West, ensemble Kalman) or the particle marginal Metropolis–Hastings
//! sampler. A Kalman filter provides exact answers for linear-Gaussian
//! models.

pub mod distributions;
pub mod filters;
pub mod kalman;
pub mod model;
pub mod pmmh;
pub mod resampling;
pub mod rng;
pub mod runtime;
pub mod transform;
