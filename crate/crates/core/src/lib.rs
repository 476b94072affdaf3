//! Temporal-integrity anomaly detection toolkit.
//!
//! Simulates device clock dynamics (drift, synchronization offsets, 32-bit
//! epoch rollover), builds drift-corrupted telemetry datasets, trains a
//! desk-scale spatio-temporal graph attention detector with curvature
//! regularization, and runs an online sequential detector over streamed
//! telemetry, with a statistical evaluation suite.

pub mod clockdyn;
pub mod datagen;
pub mod detector;
pub mod rng;
pub mod stats;
pub mod stgat;
