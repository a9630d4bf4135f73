//! Building blocks of a peer-to-peer container registry for edge sites.

pub mod cas;
pub mod cid;
pub mod dht;
pub mod error;
pub mod exchange;
pub mod gateway;
pub mod image;
pub mod node;
pub mod peer;
pub mod replication;
pub mod time;
pub mod wire;

pub use cid::ContentId;
pub use error::CasError;
