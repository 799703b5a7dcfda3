//! Hierarchical parameter server for sparse-embedding CTR training.

pub mod model;
pub mod osrp;
pub mod transport;
pub mod wire;
pub mod ssd;
pub mod hbm;
pub mod sync_util;
pub mod mem;
pub mod dataset;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod oracle;
pub mod verify;
