//! Simulation and analysis toolkit for demand-driven orchestration of
//! roadside infrastructure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod channel;
pub mod cli;
pub mod geo;
pub mod orchestration;
pub mod recordings;
pub mod scenario;
pub mod sim;
pub mod synth;
pub mod time;
pub mod v2x;
