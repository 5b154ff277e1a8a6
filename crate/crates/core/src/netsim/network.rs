use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::topology::Topology;
use crate::node::NodeId;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetError {
    #[error("no route from {from} to {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("link {a}-{b} is down")]
    LinkDown { a: NodeId, b: NodeId },
}

/// Scheduling result of one message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub from: NodeId,
    pub to: NodeId,
    pub sent_at: SimTime,
    pub arrive_at: SimTime,
    pub size_bytes: u64,
    pub hops: Vec<NodeId>,
}

/// Message transport over a static topology.
///
/// Per hop a message costs the link delay, a jitter draw from
/// `[0, jitter]`, and `size / bandwidth`. Intermediate nodes add their relay
/// time. Messages between one ordered pair of endpoints never overtake each
/// other.
#[derive(Clone, Debug)]
pub struct Network {
    topology: Topology,
    routes: BTreeMap<(NodeId, NodeId), Vec<NodeId>>,
    relay: BTreeMap<NodeId, SimDuration>,
    down: BTreeSet<(NodeId, NodeId)>,
    last_arrival: BTreeMap<(NodeId, NodeId), SimTime>,
    rng: ChaCha8Rng,
    messages: u64,
    bytes: u64,
}

fn pair(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl Network {
    pub fn new(topology: Topology, seed: u64) -> Self {
        let mut routes = BTreeMap::new();
        for a in &topology.nodes {
            for b in &topology.nodes {
                if let Some(path) = topology.shortest_path(&a.id, &b.id) {
                    routes.insert((a.id.clone(), b.id.clone()), path);
                }
            }
        }
        Self {
            topology,
            routes,
            relay: BTreeMap::new(),
            down: BTreeSet::new(),
            last_arrival: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            messages: 0,
            bytes: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_relay(&mut self, node: &NodeId, relay: SimDuration) {
        self.relay.insert(node.clone(), relay);
    }

    pub fn relay(&self, node: &NodeId) -> SimDuration {
        self.relay.get(node).copied().unwrap_or_default()
    }

    pub fn route(&self, from: &NodeId, to: &NodeId) -> Option<&[NodeId]> {
        self.routes
            .get(&(from.clone(), to.clone()))
            .map(Vec::as_slice)
    }

    pub fn set_link_up(&mut self, a: &NodeId, b: &NodeId, up: bool) {
        if up {
            self.down.remove(&pair(a, b));
        } else {
            self.down.insert(pair(a, b));
        }
    }

    pub fn is_link_up(&self, a: &NodeId, b: &NodeId) -> bool {
        !self.down.contains(&pair(a, b))
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes
    }

    /// Schedules a message of `size_bytes` leaving `from` at `now`.
    pub fn send(
        &mut self,
        from: &NodeId,
        to: &NodeId,
        size_bytes: u64,
        now: SimTime,
    ) -> Result<Delivery, NetError> {
        let hops = self
            .route(from, to)
            .ok_or_else(|| NetError::NoRoute {
                from: from.clone(),
                to: to.clone(),
            })?
            .to_vec();
        for w in hops.windows(2) {
            if !self.is_link_up(&w[0], &w[1]) {
                return Err(NetError::LinkDown {
                    a: w[0].clone(),
                    b: w[1].clone(),
                });
            }
        }
        let mut t = now;
        for (i, w) in hops.windows(2).enumerate() {
            if i > 0 {
                t += self.relay(&w[0]);
            }
            let link = self
                .topology
                .link(&w[0], &w[1])
                .expect("route uses existing links");
            let jitter = link.jitter().as_nanos();
            let draw = if jitter > 0 {
                SimDuration::from_nanos(self.rng.gen_range(0..=jitter))
            } else {
                SimDuration::ZERO
            };
            t +=
                link.delay() + draw + SimDuration::transfer(size_bytes, link.bandwidth_bytes_per_s);
        }
        let key = (from.clone(), to.clone());
        if let Some(last) = self.last_arrival.get(&key) {
            t = t.max(*last);
        }
        self.last_arrival.insert(key, t);
        self.messages += 1;
        self.bytes += size_bytes;
        Ok(Delivery {
            from: from.clone(),
            to: to.clone(),
            sent_at: now,
            arrive_at: t,
            size_bytes,
            hops,
        })
    }
}
