//! Dynamics-guided refinement of global human motion.
//!
//! A world-frame motion sequence is refined by minimizing an energy that ties
//! its camera-frame joint velocities, accelerations and 2D projections to
//! per-frame predictions, while penalizing jerk and drift from the
//! initialization. The [`metrics`] module provides the world-grounded
//! evaluation suite used to score the result.

pub mod body;
pub mod contact;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod synth;

pub use error::{Error, Result};
