//! Deterministic discrete-event simulation of an edge site: shaped links,
//! sans-IO nodes, pull clients and the benchmark scenarios built on them.

pub mod bench;
pub mod cluster;
pub mod fabric;
pub mod report;
pub mod topology;

pub use cluster::Cluster;
pub use fabric::Fabric;
pub use topology::{LinkShape, Topology, TopologyError};
