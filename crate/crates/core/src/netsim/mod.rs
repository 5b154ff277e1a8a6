//! Deterministic discrete-event network simulation.

mod network;
mod sim;
mod topology;

pub use network::{Delivery, NetError, Network};
pub use sim::{Fired, Simulator, TraceRecord};
pub use topology::{LinkSpec, NodeRole, NodeSpec, Topology, TopologyError};
