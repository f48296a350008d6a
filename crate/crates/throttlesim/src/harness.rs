//! Experiment harness: configuration loading, model calibration against a
//! measured-target table, the experiment drivers, and report emission.

pub mod calibrate;
pub mod config;
pub mod experiments;
pub mod report;
