//! Library half of the `widenet` binary: config loading, run orchestration,
//! record files, plotting, and multi-seed reports. Kept as a library so
//! integration tests can drive parsing and rendering directly.

pub mod config;
pub mod plot;
pub mod record;
pub mod report;
pub mod run;
pub mod svg;
