//! Surrogate structure-property pipeline for organic photovoltaic active
//! layers.
//!
//! * [`chgen`] generates phase-separated morphologies with a Cahn-Hilliard
//!   solver,
//! * [`oracle`] labels them with a reduced-order device model,
//! * [`nn`] trains a shallow CNN classifier of short-circuit-current bins,
//! * [`interpret`] computes gradient saliency maps,
//! * [`design`] searches morphology space with PBIL using the CNN as fitness.

pub mod chgen;
pub mod design;
pub mod fft;
pub mod interpret;
pub mod kv;
pub mod nn;
pub mod morpho;
pub mod oracle;
pub mod presets;
