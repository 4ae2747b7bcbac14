//! Ion-exchange chromatography simulation: general rate column model with
//! steric mass-action binding, batch and simulated moving bed processes, and
//! their performance indicators.

pub mod linalg;
pub mod model;
pub mod ode;
pub mod column;
pub mod profile;
pub mod batch;
pub mod indicators;
pub mod network;
