//! Edge-to-cloud IoT reference services.
//!
//! The data plane runs from [`edge`] gateways over the [`msgbus`] broker
//! into the [`cloudgw`] ingestion boundary, which fans admitted readings out
//! to [`streams`], [`tsdb`] and [`twins`]. [`controlplane`] owns node
//! identity, lifecycle, monitoring and quarantine. [`infomodel`] supplies
//! the shared vocabulary and payload codec.

pub mod cloudgw;
pub mod controlplane;
pub mod edge;
pub mod infomodel;
pub mod msgbus;
pub mod streams;
pub mod tsdb;
pub mod twins;
pub mod types;

pub use types::{ChannelKey, CmpOp, Reading, TagSet, Timestamp, TypedScalar};
