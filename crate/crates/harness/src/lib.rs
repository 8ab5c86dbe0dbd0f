//! Experiment harness for `fisher-steer`.

pub mod config;
pub mod framework;
pub mod geometry;
pub mod oracle;
pub mod output;
pub mod seeds;
pub mod stats;
pub mod steering_comparison;
pub mod toy_stability;
