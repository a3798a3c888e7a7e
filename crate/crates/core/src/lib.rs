//! Penalized-likelihood proportional hazards models for partly
//! interval-censored survival data.

pub mod basis;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod optimizer;
pub mod quad;
pub mod report;
pub mod simulator;
pub mod smoothing;
pub mod survdata;
