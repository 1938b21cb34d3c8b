//! Twin-experiment laboratory for forecast uncertainty quantification.
//!
//! The crate is organized around the stages of the experimental pipeline:
//!
//! * [`dyncore`] — Lorenz'96 model variants and the fixed-step RK4 integrator.
//! * [`assim`] — synthetic observations and the ensemble transform Kalman filter.
//! * [`forecastgen`] — deterministic/ensemble forecast dataset generation.
//! * [`neuralnet`] — dense networks, variance losses, Adam, and the two-stage
//!   training protocol with early stopping and the LR×WD sweep.
//! * [`verify`] — probabilistic verification scores with bootstrap confidence
//!   intervals.
//! * [`seed`] — named counter-based sub-streams derived from a master seed.

pub mod assim;
pub mod dyncore;
pub mod forecastgen;
pub mod neuralnet;
pub mod seed;
pub mod verify;

pub use dyncore::{
    integrate, l96_tendency, l96_two_scale_tendency, rk4_step, surrogate_tendency, DynError,
    PhaseState, SingleScaleParams, StateVector, SurrogateParams, Trajectory, TwoScaleParams,
    TwoScaleState,
};
