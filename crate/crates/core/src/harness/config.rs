//! Scenario files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::function::FunctionKind;
use crate::netsim::{LinkSpec, NodeRole, NodeSpec, Topology};
use crate::node::NodeId;
use crate::offload::SyncMode;
use crate::orchestrator::{LatencyClass, SliceProfile};
use crate::registry::FunctionRegistry;
use crate::resource::ResourcePath;
use crate::time::SimDuration;
use crate::worker::{ProcessingProfile, ResourceQuota};

/// Built-in scenario calibrated against the reported latency means.
pub const PAPER_CALIBRATED: &str = include_str!("../../scenarios/paper_calibrated.toml");
/// Built-in road-safety scenario.
pub const ROAD_SCENARIO: &str = include_str!("../../scenarios/road_scenario.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadOp {
    Create,
    Retrieve,
    Prepare,
}

impl WorkloadOp {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadOp::Create => "create",
            WorkloadOp::Retrieve => "retrieve",
            WorkloadOp::Prepare => "prepare",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cloud,
    Edge,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cloud => "cloud",
            Mode::Edge => "edge",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageSizes {
    #[serde(default = "defaults::header_bytes")]
    pub header_bytes: u64,
    #[serde(default = "defaults::control_bytes")]
    pub control_bytes: u64,
    #[serde(default = "defaults::payload_bytes")]
    pub payload_bytes: u64,
}

impl Default for MessageSizes {
    fn default() -> Self {
        Self {
            header_bytes: defaults::header_bytes(),
            control_bytes: defaults::control_bytes(),
            payload_bytes: defaults::payload_bytes(),
        }
    }
}

/// Per-node service times in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeProcessing {
    #[serde(default)]
    pub create_ms: f64,
    #[serde(default)]
    pub retrieve_ms: f64,
    #[serde(default)]
    pub update_ms: f64,
    #[serde(default)]
    pub delete_ms: f64,
    #[serde(default)]
    pub notify_ms: f64,
    /// Forwarding cost when the node relays a message it does not consume.
    #[serde(default)]
    pub relay_ms: f64,
}

impl NodeProcessing {
    pub fn profile(&self) -> ProcessingProfile {
        ProcessingProfile {
            create: SimDuration::from_millis_f64(self.create_ms),
            retrieve: SimDuration::from_millis_f64(self.retrieve_ms),
            update: SimDuration::from_millis_f64(self.update_ms),
            delete: SimDuration::from_millis_f64(self.delete_ms),
            notify: SimDuration::from_millis_f64(self.notify_ms),
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.create_ms,
            self.retrieve_ms,
            self.update_ms,
            self.delete_ms,
            self.notify_ms,
            self.relay_ms,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSettings {
    #[serde(default = "defaults::start_delay_ms")]
    pub start_delay_ms: f64,
    #[serde(default = "defaults::capacity")]
    pub memory_capacity_bytes: u64,
    #[serde(default = "defaults::quota_memory")]
    pub quota_memory_bytes: u64,
    #[serde(default = "defaults::quota_cpu")]
    pub quota_cpu_share: f64,
}

impl Default for WorkerSettings {
    fn default() -> Self {
        Self {
            start_delay_ms: defaults::start_delay_ms(),
            memory_capacity_bytes: defaults::capacity(),
            quota_memory_bytes: defaults::quota_memory(),
            quota_cpu_share: defaults::quota_cpu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySettings {
    /// Catalogue text; the default catalogue when absent.
    #[serde(default)]
    pub catalogue: Option<String>,
    #[serde(default = "defaults::pull_bandwidth")]
    pub pull_bandwidth_bytes_per_s: f64,
    /// Pre-install every catalogue image on every edge.
    #[serde(default = "defaults::yes")]
    pub preseed: bool,
    /// Functions whose images are left out of the pre-installed set.
    #[serde(default)]
    pub cold_functions: Vec<FunctionKind>,
}

impl Default for RegistrySettings {
    fn default() -> Self {
        Self {
            catalogue: None,
            pull_bandwidth_bytes_per_s: defaults::pull_bandwidth(),
            preseed: true,
            cold_functions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CseLabels {
    #[serde(default = "defaults::cloud_label")]
    pub cloud: String,
    #[serde(default = "defaults::edge_label")]
    pub edge: String,
}

impl Default for CseLabels {
    fn default() -> Self {
        Self {
            cloud: defaults::cloud_label(),
            edge: defaults::edge_label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    pub root: ResourcePath,
    pub owner: String,
}

/// Resources created before the scenario starts: every segment of `path`
/// becomes a container, then `instances` content instances go under the
/// last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub node: NodeId,
    pub path: ResourcePath,
    #[serde(default)]
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub id: String,
    pub device: NodeId,
    pub functions: Vec<FunctionKind>,
    #[serde(default = "defaults::latency_class")]
    pub latency_class: LatencyClass,
    #[serde(default = "defaults::sync_mode")]
    pub sync_mode: SyncMode,
    #[serde(default)]
    pub tasks: Vec<String>,
}

impl ServiceConfig {
    pub fn profile(&self) -> Result<SliceProfile, HarnessError> {
        SliceProfile::new(&self.id, self.functions.iter().copied(), self.latency_class)
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub operation: WorkloadOp,
    #[serde(default = "defaults::requests")]
    pub requests: usize,
    pub service: String,
    /// Cloud-side container the data-plane requests target.
    pub path: ResourcePath,
    #[serde(default = "defaults::modes")]
    pub modes: Vec<Mode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub messages: MessageSizes,
    #[serde(default)]
    pub processing: BTreeMap<NodeId, NodeProcessing>,
    #[serde(default)]
    pub worker: WorkerSettings,
    #[serde(default)]
    pub registry: RegistrySettings,
    #[serde(default)]
    pub cse: CseLabels,
    #[serde(default)]
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub seed_data: Vec<SeedConfig>,
    #[serde(default)]
    pub services: Vec<ServiceConfig>,
    #[serde(default)]
    pub workload: Option<WorkloadConfig>,
    /// Wall-clock pacing factor; never read from or written to files.
    #[serde(skip)]
    pub realtime: Option<f64>,
}

/// A file holding only nodes and links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

mod defaults {
    use super::*;

    pub fn header_bytes() -> u64 {
        200
    }
    pub fn control_bytes() -> u64 {
        512
    }
    pub fn payload_bytes() -> u64 {
        400
    }
    pub fn start_delay_ms() -> f64 {
        250.0
    }
    pub fn capacity() -> u64 {
        4_000_000_000
    }
    pub fn quota_memory() -> u64 {
        256_000_000
    }
    pub fn quota_cpu() -> f64 {
        0.25
    }
    pub fn pull_bandwidth() -> f64 {
        100_000_000.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn cloud_label() -> String {
        "IN-CSE".into()
    }
    pub fn edge_label() -> String {
        "MN-CSE".into()
    }
    pub fn latency_class() -> LatencyClass {
        LatencyClass::Normal
    }
    pub fn sync_mode() -> SyncMode {
        SyncMode::Eager
    }
    pub fn requests() -> usize {
        60
    }
    pub fn modes() -> Vec<Mode> {
        vec![Mode::Cloud, Mode::Edge]
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn paper_calibrated() -> Self {
        Self::parse(PAPER_CALIBRATED).expect("built-in scenario is valid")
    }

    pub fn road() -> Self {
        Self::parse(ROAD_SCENARIO).expect("built-in scenario is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces nodes and links with those of a topology file.
    pub fn with_topology(mut self, topology: TopologyFile) -> Result<Self, HarnessError> {
        self.nodes = topology.nodes;
        self.links = topology.links;
        self.validate()?;
        Ok(self)
    }

    pub fn with_topology_text(self, text: &str) -> Result<Self, HarnessError> {
        let topology: TopologyFile = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        self.with_topology(topology)
    }

    pub fn topology(&self) -> Result<Topology, HarnessError> {
        Topology::new(self.nodes.clone(), self.links.clone()).map_err(|e| invalid(e.to_string()))
    }

    pub fn catalogue(&self) -> Result<FunctionRegistry, HarnessError> {
        match &self.registry.catalogue {
            Some(text) => FunctionRegistry::parse(text).map_err(|e| invalid(e.to_string())),
            None => Ok(FunctionRegistry::default_catalogue()),
        }
    }

    pub fn quota(&self) -> Result<ResourceQuota, HarnessError> {
        ResourceQuota::new(self.worker.quota_memory_bytes, self.worker.quota_cpu_share)
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn cloud_node(&self) -> &NodeId {
        &self
            .nodes
            .iter()
            .find(|n| n.role == NodeRole::Cloud)
            .expect("validated: one cloud")
            .id
    }

    pub fn service(&self, id: &str) -> Option<&ServiceConfig> {
        self.services.iter().find(|s| s.id == id)
    }

    pub fn task(&self, id: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn processing_for(&self, node: &NodeId) -> NodeProcessing {
        self.processing.get(node).cloned().unwrap_or_default()
    }

    pub fn label_of(&self, node: &NodeId) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| &n.id == node)
            .and_then(|n| match n.role {
                NodeRole::Cloud => Some(self.cse.cloud.as_str()),
                NodeRole::EdgeWorker => Some(self.cse.edge.as_str()),
                NodeRole::Device => None,
            })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.topology()?;
        let clouds = self
            .nodes
            .iter()
            .filter(|n| n.role == NodeRole::Cloud)
            .count();
        if clouds != 1 {
            return Err(invalid(format!(
                "exactly one cloud node is required, found {clouds}"
            )));
        }
        if self.cse.cloud == self.cse.edge {
            return Err(invalid("cloud and edge CSE labels must differ"));
        }
        for (node, p) in &self.processing {
            if !self.nodes.iter().any(|n| &n.id == node) {
                return Err(invalid(format!("processing entry for unknown node {node}")));
            }
            if p.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid(format!("processing times of {node} must be >= 0")));
            }
        }
        if !(self.worker.start_delay_ms.is_finite() && self.worker.start_delay_ms >= 0.0) {
            return Err(invalid("start_delay_ms must be >= 0"));
        }
        self.quota()?;
        if !(self.registry.pull_bandwidth_bytes_per_s.is_finite()
            && self.registry.pull_bandwidth_bytes_per_s > 0.0)
        {
            return Err(invalid("pull bandwidth must be > 0"));
        }
        self.catalogue()?;
        for t in &self.tasks {
            if t.root.cse_label != self.cse.cloud
                || t.root.segments.is_empty()
                || t.root.is_latest()
            {
                return Err(invalid(format!(
                    "task {} root must be a path below {}",
                    t.id, self.cse.cloud
                )));
            }
            if self.tasks.iter().filter(|o| o.id == t.id).count() > 1 {
                return Err(invalid(format!("duplicate task {}", t.id)));
            }
        }
        for s in &self.seed_data {
            let label = self
                .label_of(&s.node)
                .ok_or_else(|| invalid(format!("seed node {} is not a CSE host", s.node)))?;
            if s.path.cse_label != label || s.path.is_latest() {
                return Err(invalid(format!(
                    "seed path {} does not belong to {}",
                    s.path, s.node
                )));
            }
        }
        for svc in &self.services {
            svc.profile()?;
            if self
                .nodes
                .iter()
                .find(|n| n.id == svc.device)
                .map(|n| n.role)
                != Some(NodeRole::Device)
            {
                return Err(invalid(format!(
                    "service {} device {} is not a device node",
                    svc.id, svc.device
                )));
            }
            for t in &svc.tasks {
                if self.task(t).is_none() {
                    return Err(invalid(format!(
                        "service {} names unknown task {t}",
                        svc.id
                    )));
                }
            }
        }
        if let Some(w) = &self.workload {
            let svc = self.service(&w.service).ok_or_else(|| {
                invalid(format!("workload service {} is not declared", w.service))
            })?;
            if w.requests == 0 {
                return Err(invalid("workload needs at least one request"));
            }
            if w.modes.is_empty() {
                return Err(invalid("workload needs at least one mode"));
            }
            if w.path.cse_label != self.cse.cloud || w.path.is_latest() {
                return Err(invalid(format!(
                    "workload path {} must be a cloud path",
                    w.path
                )));
            }
            let covered = svc
                .tasks
                .iter()
                .filter_map(|t| self.task(t))
                .any(|t| t.root.is_prefix_of(&w.path));
            if w.operation != WorkloadOp::Prepare && !covered {
                return Err(invalid(format!(
                    "workload path {} lies outside the tasks of service {}",
                    w.path, svc.id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_in_scenarios_parse() {
        let c = ScenarioConfig::paper_calibrated();
        assert_eq!(c.messages.header_bytes, 200);
        assert_eq!(c.workload.as_ref().unwrap().requests, 60);
        ScenarioConfig::road();
    }

    #[test]
    fn topology_file_replaces_links() {
        let text = r#"
            nodes = [
                { id = "device", role = "device" },
                { id = "edge", role = "edge" },
                { id = "cloud", role = "cloud" },
            ]
            links = [
                { a = "device", b = "edge", one_way_delay_ms = 2.0, bandwidth_bytes_per_s = 1e7 },
                { a = "edge", b = "cloud", one_way_delay_ms = 9.0, bandwidth_bytes_per_s = 1e7 },
            ]
        "#;
        let c = ScenarioConfig::paper_calibrated()
            .with_topology_text(text)
            .unwrap();
        assert_eq!(c.links[1].one_way_delay_ms, 9.0);
        assert!(ScenarioConfig::paper_calibrated()
            .with_topology_text("nodes = []\nlinks = []")
            .is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ScenarioConfig::paper_calibrated();
        let mut c = base.clone();
        c.links[0].bandwidth_bytes_per_s = 0.0;
        assert!(matches!(c.validate(), Err(HarnessError::ConfigInvalid(_))));
        let mut c = base.clone();
        c.services[0].functions.clear();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.workload.as_mut().unwrap().requests = 0;
        assert!(c.validate().is_err());
        assert!(ScenarioConfig::parse("name = 1").is_err());
        assert!(ScenarioConfig::parse(&format!("{}\nbogus = 1\n", PAPER_CALIBRATED)).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ScenarioConfig::paper_calibrated();
        assert_eq!(ScenarioConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
