//! Experiment runner for the in-context regression study: config
//! resolution, the sweep grid with its CSV/SVG outputs, the bound report and
//! the self-check suite.

pub mod config;
pub mod selfcheck;
pub mod svg;
pub mod sweep;
pub mod theory_report;
