//! Pooling probes over cached frozen-encoder token maps.
//!
//! The crate covers the whole probing pipeline: a binary embedding store,
//! ten pooling heads with hand-written backward passes, an asymmetric
//! multi-label loss, AdamW, a seeded trainer, a small hyperparameter search
//! and the reporting that turns per-seed results into comparison tables.

pub mod embedstore;
pub mod heads;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod trainer;
pub mod hpo;
pub mod report;
