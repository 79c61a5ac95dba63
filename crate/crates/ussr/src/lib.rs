//! Run harness around `ussr-core`: configuration, CSV and cache IO,
//! synthetic benchmark generation, the two-phase training loops, and
//! expansion orchestration with an audit trail.

pub mod config;
pub mod dataio;
pub mod synth;
pub mod trainer;
