//! IoT service slicing and task offloading testbed.
//!
//! The crate is organised bottom-up:
//!
//! * [`resource`] is the resource-oriented service layer (CSE tree, CRUD,
//!   virtual latest child, subscription matching).
//! * [`wire`] is the textual key/value codec for request, response and
//!   control primitives.
//! * [`registry`] holds the function image catalogue and per-worker caches.
//! * [`worker`] is the edge container-runner that hosts function instances,
//!   gates primitives and owns the edge tree.
//! * [`offload`] exports, grafts and synchronizes task subtrees.
//! * [`orchestrator`] decides between fast-path offloading and slice
//!   instantiation, and keeps the slice registry.
//! * [`netsim`] is the deterministic discrete-event network simulator.
//! * [`harness`] wires everything into a testbed and runs the benchmarks.

pub mod function;
pub mod harness;
pub mod netsim;
pub mod node;
pub mod offload;
pub mod orchestrator;
pub mod registry;
pub mod resource;
mod serde_b64;
pub mod time;
pub mod wire;
pub mod worker;

pub use function::FunctionKind;
pub use node::NodeId;
pub use time::{SimDuration, SimTime};
