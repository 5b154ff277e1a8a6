use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::time::SimDuration;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Device,
    #[serde(alias = "edge")]
    EdgeWorker,
    Cloud,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: NodeRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub one_way_delay_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl LinkSpec {
    pub fn new(
        a: &str,
        b: &str,
        one_way_delay_ms: f64,
        jitter_ms: f64,
        bandwidth_bytes_per_s: f64,
    ) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            one_way_delay_ms,
            jitter_ms,
            bandwidth_bytes_per_s,
        }
    }

    pub fn delay(&self) -> SimDuration {
        SimDuration::from_millis_f64(self.one_way_delay_ms)
    }

    pub fn jitter(&self) -> SimDuration {
        SimDuration::from_millis_f64(self.jitter_ms)
    }

    pub fn joins(&self, x: &NodeId, y: &NodeId) -> bool {
        (&self.a == x && &self.b == y) || (&self.a == y && &self.b == x)
    }

    pub fn other(&self, end: &NodeId) -> Option<&NodeId> {
        if &self.a == end {
            Some(&self.b)
        } else if &self.b == end {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("link endpoint {0} is not a node")]
    UnknownNode(NodeId),
    #[error("link {0}-{1} joins a node to itself")]
    SelfLink(NodeId, NodeId),
    #[error("more than one link between {0} and {1}")]
    DuplicateLink(NodeId, NodeId),
    #[error("link {a}-{b}: {reason}")]
    InvalidLink {
        a: NodeId,
        b: NodeId,
        reason: String,
    },
    #[error("node {0} is not connected to {1}")]
    Disconnected(NodeId, NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

impl Topology {
    pub fn new(nodes: Vec<NodeSpec>, links: Vec<LinkSpec>) -> Result<Self, TopologyError> {
        let t = Self { nodes, links };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(&n.id) {
                return Err(TopologyError::DuplicateNode(n.id.clone()));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !ids.contains(end) {
                    return Err(TopologyError::UnknownNode(end.clone()));
                }
            }
            if l.a == l.b {
                return Err(TopologyError::SelfLink(l.a.clone(), l.b.clone()));
            }
            let key = if l.a < l.b {
                (&l.a, &l.b)
            } else {
                (&l.b, &l.a)
            };
            if !pairs.insert(key) {
                return Err(TopologyError::DuplicateLink(l.a.clone(), l.b.clone()));
            }
            let invalid = |reason: &str| TopologyError::InvalidLink {
                a: l.a.clone(),
                b: l.b.clone(),
                reason: reason.into(),
            };
            if !(l.one_way_delay_ms.is_finite() && l.one_way_delay_ms >= 0.0) {
                return Err(invalid("delay must be a finite number >= 0"));
            }
            if !(l.jitter_ms.is_finite() && l.jitter_ms >= 0.0) {
                return Err(invalid("jitter must be a finite number >= 0"));
            }
            if !(l.bandwidth_bytes_per_s.is_finite() && l.bandwidth_bytes_per_s > 0.0) {
                return Err(invalid("bandwidth must be > 0"));
            }
        }
        if let Some(first) = self.nodes.first() {
            let reach = self.distances(&first.id);
            if let Some(n) = self.nodes.iter().find(|n| !reach.contains_key(&n.id)) {
                return Err(TopologyError::Disconnected(n.id.clone(), first.id.clone()));
            }
        }
        Ok(())
    }

    pub fn role(&self, id: &NodeId) -> Option<NodeRole> {
        self.nodes.iter().find(|n| &n.id == id).map(|n| n.role)
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> impl Iterator<Item = &NodeId> {
        self.nodes
            .iter()
            .filter(move |n| n.role == role)
            .map(|n| &n.id)
    }

    pub fn link(&self, a: &NodeId, b: &NodeId) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.joins(a, b))
    }

    pub fn link_mut(&mut self, a: &NodeId, b: &NodeId) -> Option<&mut LinkSpec> {
        self.links.iter_mut().find(|l| l.joins(a, b))
    }

    /// Shortest one-way delay from `from` to every reachable node.
    fn distances(&self, from: &NodeId) -> BTreeMap<NodeId, (SimDuration, Option<NodeId>)> {
        let mut best: BTreeMap<NodeId, (SimDuration, Option<NodeId>)> = BTreeMap::new();
        let mut settled: BTreeSet<NodeId> = BTreeSet::new();
        let mut heap = BinaryHeap::new();
        best.insert(from.clone(), (SimDuration::ZERO, None));
        heap.push(Reverse((SimDuration::ZERO, from.clone())));
        while let Some(Reverse((d, node))) = heap.pop() {
            if !settled.insert(node.clone()) {
                continue;
            }
            for l in self.links.iter().filter(|l| l.a == node || l.b == node) {
                let next = l.other(&node).expect("incident link").clone();
                if settled.contains(&next) {
                    continue;
                }
                let nd = d + l.delay();
                let better = match best.get(&next) {
                    None => true,
                    Some((bd, Some(via))) => nd < *bd || (nd == *bd && node < *via),
                    Some((_, None)) => false,
                };
                if better {
                    best.insert(next.clone(), (nd, Some(node.clone())));
                    heap.push(Reverse((nd, next)));
                }
            }
        }
        best
    }

    /// Minimum-delay node sequence from `from` to `to`, endpoints included.
    /// Equal-delay alternatives resolve toward lexicographically smaller
    /// predecessors.
    pub fn shortest_path(&self, from: &NodeId, to: &NodeId) -> Option<Vec<NodeId>> {
        let dist = self.distances(from);
        dist.get(to)?;
        let mut path = vec![to.clone()];
        let mut cur = to.clone();
        while let Some((_, Some(prev))) = dist.get(&cur) {
            path.push(prev.clone());
            cur = prev.clone();
        }
        path.reverse();
        Some(path)
    }

    /// Sum of one-way link delays along the shortest path.
    pub fn path_delay(&self, from: &NodeId, to: &NodeId) -> Option<SimDuration> {
        self.distances(from).get(to).map(|(d, _)| *d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, role: NodeRole) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            role,
        }
    }

    fn line() -> Topology {
        Topology::new(
            vec![
                node("device", NodeRole::Device),
                node("edge", NodeRole::EdgeWorker),
                node("cloud", NodeRole::Cloud),
            ],
            vec![
                LinkSpec::new("device", "edge", 1.0, 0.0, 1e6),
                LinkSpec::new("edge", "cloud", 15.0, 0.0, 1e6),
            ],
        )
        .unwrap()
    }

    #[test]
    fn device_reaches_cloud_through_edge() {
        let t = line();
        let path = t.shortest_path(&"device".into(), &"cloud".into()).unwrap();
        let names: Vec<&str> = path.iter().map(NodeId::as_str).collect();
        assert_eq!(names, ["device", "edge", "cloud"]);
        assert_eq!(
            t.path_delay(&"device".into(), &"cloud".into()),
            Some(SimDuration::from_millis_f64(16.0))
        );
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let nodes = vec![node("a", NodeRole::Device), node("b", NodeRole::Cloud)];
        assert!(matches!(
            Topology::new(nodes.clone(), vec![LinkSpec::new("a", "x", 1.0, 0.0, 1.0)]),
            Err(TopologyError::UnknownNode(_))
        ));
        assert!(matches!(
            Topology::new(
                nodes.clone(),
                vec![
                    LinkSpec::new("a", "b", 1.0, 0.0, 1.0),
                    LinkSpec::new("b", "a", 1.0, 0.0, 1.0)
                ]
            ),
            Err(TopologyError::DuplicateLink(..))
        ));
        assert!(matches!(
            Topology::new(nodes.clone(), vec![LinkSpec::new("a", "b", -1.0, 0.0, 1.0)]),
            Err(TopologyError::InvalidLink { .. })
        ));
        assert!(matches!(
            Topology::new(nodes.clone(), vec![LinkSpec::new("a", "b", 1.0, 0.0, 0.0)]),
            Err(TopologyError::InvalidLink { .. })
        ));
        assert!(matches!(
            Topology::new(nodes, vec![]),
            Err(TopologyError::Disconnected(..))
        ));
    }

    #[test]
    fn role_lookup() {
        let t = line();
        assert_eq!(t.role(&"edge".into()), Some(NodeRole::EdgeWorker));
        assert_eq!(t.nodes_with_role(NodeRole::Cloud).count(), 1);
    }
}
