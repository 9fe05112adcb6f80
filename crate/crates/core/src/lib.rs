//! Fertility classification of candled chicken-egg images.
//!
//! The crate covers the whole batch pipeline: dataset ingestion and synthesis
//! ([`data`]), online augmentation ([`augment`]), the backbone zoo and a small
//! reference CNN ([`zoo`]) running on a CPU engine ([`nn`]), k-fold training
//! ([`trainer`]), confusion-matrix metrics ([`metrics`]) and report emission
//! ([`report`]).

mod label;
pub mod augment;
pub mod data;
pub mod seed;
pub mod trainer;
pub mod zoo;
pub mod metrics;
pub mod nn;
pub mod report;

pub use label::{Label, ParseLabelError};
