//! Deterministic simulator of processor current-management side effects —
//! load-line power delivery, multi-level voltage guardbands with serialized
//! regulator transitions, and 1-of-4 execution throttling — plus the timing
//! channels those mechanisms leak and an experiment harness that measures
//! them.
//!
//! Module map:
//! - [`pdn`]: load-line arithmetic and the serialized voltage regulator.
//! - [`core`]: instruction classes, throttled retirement timing, power
//!   gates, and the reference single-core interpreter.
//! - [`pmu`]: guardband targets, licensing state, and frequency-limit
//!   enforcement.
//! - [`machine`]: the event-driven multicore machine tying those together
//!   on one clock.
//! - [`covert`]: symbol encoding, threshold decoding, and transcript runs
//!   for the three channel placements.
//! - [`noise`]: Poisson interrupt/context-switch interference and the
//!   bursty background application.
//! - [`harness`]: config files, model calibration, experiments, reports.

pub mod core;
pub mod covert;
pub mod error;
pub mod harness;
pub mod machine;
pub mod noise;
pub mod pdn;
pub mod pmu;
