//! Additive causal effects of a binary treatment on a binary outcome from one-row-per-unit
//! panels: G-estimation of a structural nested mean model, IPTW marginal structural models,
//! balance diagnostics and BCa bootstrap intervals, plus a confounded synthetic generator with
//! known ground truth.

pub mod bootstrap;
pub mod cli;
pub mod diagnostics;
pub mod gest;
pub mod glm;
pub mod iptw;
pub mod output;
pub mod panel;
pub mod stats;
pub mod synth;
