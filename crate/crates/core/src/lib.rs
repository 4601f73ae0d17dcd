//! Simulation of semantic-aware multi-agent UAV trajectory planning driven
//! by a dual-timescale RAN intelligent controller.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agentenv;
pub mod digest;
pub mod evalharness;
pub mod geom;
pub mod maddpg;
pub mod radio;
pub mod ricbus;
pub mod semantics;
pub mod tinynet;
pub mod worldmodel;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Comment line placed at the top of every exported file.
pub fn header_comment(scenario_digest: &str) -> String {
    format!("scenario_digest={scenario_digest} tool=laesim {TOOL_VERSION}")
}
