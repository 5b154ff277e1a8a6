//! Slice orchestration: the cloud-side service that classifies service
//! requests, picks the edge, computes missing functions and keeps the slice
//! registry.
//!
//! Two views are kept. The registry holds what each slice actually runs.
//! The handler view is what the slicing handler has been told through
//! [`Orchestrator::record_slice_functions`]; decisions are made against it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::function::FunctionKind;
use crate::netsim::{NodeRole, Topology};
use crate::node::NodeId;
use crate::offload::{OffloadSync, SyncReport};
use crate::registry::{pull_image, FunctionRegistry, RegistryError, VersionSelector};
use crate::resource::{ResourcePath, ResourceTree};
use crate::time::{SimDuration, SimTime};
use crate::worker::{EdgeWorker, ResourceQuota, WorkerError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyClass {
    Normal,
    MissionCritical,
}

impl LatencyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LatencyClass::Normal => "normal",
            LatencyClass::MissionCritical => "mission_critical",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub service_id: String,
    pub required_functions: BTreeSet<FunctionKind>,
    pub latency_class: LatencyClass,
}

impl SliceProfile {
    pub fn new(
        service_id: &str,
        required_functions: impl IntoIterator<Item = FunctionKind>,
        latency_class: LatencyClass,
    ) -> Result<Self, OrchestratorError> {
        let p = Self {
            service_id: service_id.to_owned(),
            required_functions: required_functions.into_iter().collect(),
            latency_class,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.required_functions.is_empty() {
            return Err(OrchestratorError::InvalidProfile(format!(
                "service {} requires no functions",
                self.service_id
            )));
        }
        if self.service_id.is_empty() {
            return Err(OrchestratorError::InvalidProfile("empty service id".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceState {
    Instantiating,
    Active,
    Terminating,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceInstance {
    pub slice_id: String,
    pub edge_node: NodeId,
    pub latency_class: LatencyClass,
    /// Function to port.
    pub running_functions: BTreeMap<FunctionKind, u16>,
    pub state: SliceState,
    pub served_services: BTreeSet<String>,
    pub tasks: BTreeSet<String>,
}

impl SliceInstance {
    pub fn functions(&self) -> BTreeSet<FunctionKind> {
        self.running_functions.keys().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    FastPathOffloadOnly,
    InstantiateThenOffload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicingPlan {
    pub decision: Decision,
    pub target_slice: String,
    pub edge_node: NodeId,
    pub service_id: String,
    pub latency_class: LatencyClass,
    pub missing_functions: BTreeSet<FunctionKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub device: NodeId,
    pub service_id: String,
    pub profile: SliceProfile,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("no reachable edge worker for {0}")]
    NoEdgeAvailable(NodeId),
    #[error("device {0} is not in the topology")]
    UnknownDevice(NodeId),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("unknown slice {0}")]
    UnknownSlice(String),
    #[error("plan has nothing to instantiate")]
    NothingToInstantiate,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
}

/// Result of driving one instantiation on a worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Instantiation {
    pub slice: SliceInstance,
    pub started: BTreeSet<FunctionKind>,
    pub pull_time: SimDuration,
    pub start_time: SimDuration,
    /// Time at which every started function is running.
    pub active_at: SimTime,
}

impl Instantiation {
    pub fn elapsed(&self) -> SimDuration {
        self.pull_time + self.start_time
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartCall {
    pub edge: NodeId,
    pub function: FunctionKind,
    pub at: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationReport {
    pub slice_id: String,
    pub synced_resources: usize,
    pub tasks: Vec<SyncReport>,
}

pub fn slice_id_for(edge: &NodeId, class: LatencyClass) -> String {
    format!("slice-{edge}-{}", class.as_str())
}

#[derive(Clone, Debug)]
pub struct Orchestrator {
    topology: Topology,
    registry: FunctionRegistry,
    pull_bandwidth: f64,
    quota: ResourceQuota,
    slices: BTreeMap<String, SliceInstance>,
    handler_view: BTreeMap<String, BTreeSet<FunctionKind>>,
    start_calls: Vec<StartCall>,
    decisions: Vec<SlicingPlan>,
}

impl Orchestrator {
    pub fn new(topology: Topology, registry: FunctionRegistry, pull_bandwidth: f64) -> Self {
        Self {
            topology,
            registry,
            pull_bandwidth,
            quota: ResourceQuota::default(),
            slices: BTreeMap::new(),
            handler_view: BTreeMap::new(),
            start_calls: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn with_quota(mut self, quota: ResourceQuota) -> Self {
        self.quota = quota;
        self
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    pub fn slices(&self) -> impl Iterator<Item = &SliceInstance> {
        self.slices.values()
    }

    pub fn slice(&self, slice_id: &str) -> Option<&SliceInstance> {
        self.slices.get(slice_id)
    }

    pub fn handler_view(&self, slice_id: &str) -> Option<&BTreeSet<FunctionKind>> {
        self.handler_view.get(slice_id)
    }

    pub fn start_calls(&self) -> &[StartCall] {
        &self.start_calls
    }

    pub fn decisions(&self) -> &[SlicingPlan] {
        &self.decisions
    }

    /// Active slices hosted on `edge`.
    pub fn active_slices_on(&self, edge: &NodeId) -> usize {
        self.slices
            .values()
            .filter(|s| &s.edge_node == edge && s.state == SliceState::Active)
            .count()
    }

    /// Edge with minimal one-way delay from the device, then fewest active
    /// slices, then smallest id.
    pub fn select_edge_node(&self, device: &NodeId) -> Result<NodeId, OrchestratorError> {
        if self.topology.role(device).is_none() {
            return Err(OrchestratorError::UnknownDevice(device.clone()));
        }
        self.topology
            .nodes_with_role(NodeRole::EdgeWorker)
            .filter_map(|e| {
                let d = self.topology.path_delay(device, e)?;
                Some((d, self.active_slices_on(e), e.clone()))
            })
            .min()
            .map(|(_, _, e)| e)
            .ok_or_else(|| OrchestratorError::NoEdgeAvailable(device.clone()))
    }

    /// Pure decision; the registry is not touched. The decision is logged.
    pub fn handle_service_request(
        &mut self,
        req: &ServiceRequest,
    ) -> Result<SlicingPlan, OrchestratorError> {
        let plan = self.plan(req)?;
        self.decisions.push(plan.clone());
        Ok(plan)
    }

    pub fn plan(&self, req: &ServiceRequest) -> Result<SlicingPlan, OrchestratorError> {
        req.profile.validate()?;
        let edge = self.select_edge_node(&req.device)?;
        let slice_id = slice_id_for(&edge, req.profile.latency_class);
        let active = self
            .slices
            .get(&slice_id)
            .is_some_and(|s| s.state == SliceState::Active);
        let known = match (active, self.handler_view.get(&slice_id)) {
            (true, Some(set)) => set.clone(),
            _ => BTreeSet::new(),
        };
        let missing: BTreeSet<FunctionKind> = req
            .profile
            .required_functions
            .difference(&known)
            .copied()
            .collect();
        Ok(SlicingPlan {
            decision: if missing.is_empty() {
                Decision::FastPathOffloadOnly
            } else {
                Decision::InstantiateThenOffload
            },
            target_slice: slice_id,
            edge_node: edge,
            service_id: req.service_id.clone(),
            latency_class: req.profile.latency_class,
            missing_functions: missing,
        })
    }

    /// Pulls and starts every missing function sequentially on `worker`.
    /// Functions the worker already runs are skipped. On failure, functions
    /// started by this call are stopped again.
    pub fn instantiate_slice(
        &mut self,
        plan: &SlicingPlan,
        worker: &mut EdgeWorker,
        now: SimTime,
    ) -> Result<Instantiation, OrchestratorError> {
        if plan.decision != Decision::InstantiateThenOffload || plan.missing_functions.is_empty() {
            return Err(OrchestratorError::NothingToInstantiate);
        }
        let mut t = now;
        let mut started = BTreeSet::new();
        let mut pull_time = SimDuration::ZERO;
        let mut start_time = SimDuration::ZERO;
        let enabled = worker.enabled_functions();
        for f in &plan.missing_functions {
            if enabled.contains(f) {
                continue;
            }
            let step = (|| {
                let image = self
                    .registry
                    .lookup_image(*f, VersionSelector::Latest)?
                    .clone();
                let pull = pull_image(worker.cache_mut(), &image, self.pull_bandwidth);
                let inst = worker.start_function(&image, self.quota, t + pull)?;
                Ok::<_, OrchestratorError>((pull, inst))
            })();
            match step {
                Ok((pull, inst)) => {
                    self.start_calls.push(StartCall {
                        edge: worker.node().clone(),
                        function: *f,
                        at: inst.started_at,
                    });
                    let delay = inst.ready_at.since(inst.started_at);
                    pull_time += pull;
                    start_time += delay;
                    t = inst.ready_at;
                    started.insert(*f);
                }
                Err(e) => {
                    for s in &started {
                        let _ = worker.stop_function(*s, t);
                    }
                    return Err(e);
                }
            }
        }

        let running_now = worker.enabled_functions();
        let slice = self
            .slices
            .entry(plan.target_slice.clone())
            .or_insert_with(|| SliceInstance {
                slice_id: plan.target_slice.clone(),
                edge_node: plan.edge_node.clone(),
                latency_class: plan.latency_class,
                running_functions: BTreeMap::new(),
                state: SliceState::Instantiating,
                served_services: BTreeSet::new(),
                tasks: BTreeSet::new(),
            });
        for f in plan
            .missing_functions
            .iter()
            .filter(|f| running_now.contains(f))
        {
            slice.running_functions.insert(*f, f.port());
        }
        slice.served_services.insert(plan.service_id.clone());
        slice.state = SliceState::Active;
        Ok(Instantiation {
            slice: slice.clone(),
            started,
            pull_time,
            start_time,
            active_at: t,
        })
    }

    /// Tells the slicing handler which functions a slice now runs.
    pub fn record_slice_functions(
        &mut self,
        slice_id: &str,
        newly_started: &BTreeSet<FunctionKind>,
    ) -> Result<&BTreeSet<FunctionKind>, OrchestratorError> {
        if !self.slices.contains_key(slice_id) {
            return Err(OrchestratorError::UnknownSlice(slice_id.to_owned()));
        }
        let view = self.handler_view.entry(slice_id.to_owned()).or_default();
        view.extend(newly_started.iter().copied());
        Ok(view)
    }

    /// Adds a service to a slice that already covers it (fast path).
    pub fn attach_service(
        &mut self,
        slice_id: &str,
        service_id: &str,
    ) -> Result<(), OrchestratorError> {
        let slice = self
            .slices
            .get_mut(slice_id)
            .ok_or_else(|| OrchestratorError::UnknownSlice(slice_id.to_owned()))?;
        slice.served_services.insert(service_id.to_owned());
        Ok(())
    }

    pub fn bind_task(&mut self, slice_id: &str, task_id: &str) -> Result<(), OrchestratorError> {
        let slice = self
            .slices
            .get_mut(slice_id)
            .ok_or_else(|| OrchestratorError::UnknownSlice(slice_id.to_owned()))?;
        slice.tasks.insert(task_id.to_owned());
        Ok(())
    }

    /// Finalizes every bound task, removes the offloaded subtrees from the
    /// edge, stops the slice's functions and forgets the slice.
    pub fn terminate_slice(
        &mut self,
        slice_id: &str,
        worker: &mut EdgeWorker,
        sync: &mut OffloadSync,
        cloud: &mut ResourceTree,
        now: SimTime,
    ) -> Result<TerminationReport, OrchestratorError> {
        let slice = self
            .slices
            .get_mut(slice_id)
            .ok_or_else(|| OrchestratorError::UnknownSlice(slice_id.to_owned()))?;
        slice.state = SliceState::Terminating;
        let slice = slice.clone();
        let mut report = TerminationReport {
            slice_id: slice_id.to_owned(),
            ..Default::default()
        };
        for task in &slice.tasks {
            let edge_root: Option<ResourcePath> = sync.binding(task).map(|b| b.edge_root.clone());
            if let Ok((r, _)) = sync.finalize_on_terminate(task, cloud, worker.tree()) {
                report.synced_resources += r.synced_resources;
                report.tasks.push(r);
            }
            worker.sync_agent_mut().unwatch(task);
            if let Some(root) = edge_root {
                worker.tree_mut().advance_to(now);
                let _ = worker.tree_mut().delete(&root);
            }
        }
        for f in slice.running_functions.keys() {
            let _ = worker.stop_function(*f, now);
        }
        self.slices.remove(slice_id);
        self.handler_view.remove(slice_id);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LinkSpec, NodeSpec};
    use crate::worker::WorkerConfig;

    fn topo() -> Topology {
        Topology::new(
            vec![
                NodeSpec {
                    id: "device".into(),
                    role: NodeRole::Device,
                },
                NodeSpec {
                    id: "edge".into(),
                    role: NodeRole::EdgeWorker,
                },
                NodeSpec {
                    id: "cloud".into(),
                    role: NodeRole::Cloud,
                },
            ],
            vec![
                LinkSpec::new("device", "edge", 1.0, 0.0, 1e7),
                LinkSpec::new("edge", "cloud", 1.0, 0.0, 1e7),
            ],
        )
        .unwrap()
    }

    fn request(fs: &[FunctionKind]) -> ServiceRequest {
        ServiceRequest {
            device: "device".into(),
            service_id: "svc".into(),
            profile: SliceProfile::new("svc", fs.iter().copied(), LatencyClass::Normal).unwrap(),
        }
    }

    fn warm_worker() -> EdgeWorker {
        let mut w = EdgeWorker::new(WorkerConfig::new("edge", "MN-CSE"));
        for img in FunctionRegistry::default_catalogue().images() {
            w.cache_mut().preseed(&img.image_id);
        }
        w
    }

    use FunctionKind::*;

    #[test]
    fn first_then_repeat_request() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        let mut w = warm_worker();
        let req = request(&[Registration, Retrieve]);
        let plan = o.handle_service_request(&req).unwrap();
        assert_eq!(plan.decision, Decision::InstantiateThenOffload);
        assert_eq!(
            plan.missing_functions,
            BTreeSet::from([Registration, Retrieve])
        );
        let inst = o.instantiate_slice(&plan, &mut w, SimTime::ZERO).unwrap();
        assert_eq!(inst.elapsed(), SimDuration::from_millis_f64(500.0));
        assert_eq!(inst.slice.running_functions[&Registration], 62590);
        assert_eq!(inst.slice.running_functions[&Retrieve], 62591);
        o.record_slice_functions(&plan.target_slice, &inst.started)
            .unwrap();
        let again = o.handle_service_request(&req).unwrap();
        assert_eq!(again.decision, Decision::FastPathOffloadOnly);
        assert!(again.missing_functions.is_empty());
        assert_eq!(o.start_calls().len(), 2);
    }

    #[test]
    fn cold_pull_adds_transfer_time() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        let mut w = EdgeWorker::new(WorkerConfig::new("edge", "MN-CSE"));
        let plan = o.handle_service_request(&request(&[Subscription])).unwrap();
        let inst = o.instantiate_slice(&plan, &mut w, SimTime::ZERO).unwrap();
        assert_eq!(inst.pull_time, SimDuration::from_secs_f64(4.0));
        assert_eq!(inst.elapsed(), SimDuration::from_secs_f64(4.25));
    }

    #[test]
    fn failed_instantiation_rolls_back() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8)
            .with_quota(ResourceQuota::new(600_000_000, 0.5).unwrap());
        let mut config = WorkerConfig::new("edge", "MN-CSE");
        config.memory_capacity_bytes = 1_000_000_000;
        let mut w = EdgeWorker::new(config);
        let plan = o
            .handle_service_request(&request(&[Registration, Retrieve]))
            .unwrap();
        let err = o
            .instantiate_slice(&plan, &mut w, SimTime::ZERO)
            .unwrap_err();
        assert!(matches!(
            err,
            OrchestratorError::Worker(WorkerError::WorkerQuotaExceeded { .. })
        ));
        assert!(w.enabled_functions().is_empty());
        assert!(o.slice(&plan.target_slice).is_none());
    }

    #[test]
    fn fast_path_plan_cannot_instantiate() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        let mut w = warm_worker();
        let plan = SlicingPlan {
            decision: Decision::FastPathOffloadOnly,
            target_slice: "x".into(),
            edge_node: "edge".into(),
            service_id: "svc".into(),
            latency_class: LatencyClass::Normal,
            missing_functions: BTreeSet::new(),
        };
        assert_eq!(
            o.instantiate_slice(&plan, &mut w, SimTime::ZERO),
            Err(OrchestratorError::NothingToInstantiate)
        );
    }

    #[test]
    fn unknown_slice_errors() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        let mut w = warm_worker();
        let mut cloud = ResourceTree::new("IN-CSE");
        let mut sync = OffloadSync::new();
        assert!(matches!(
            o.terminate_slice("nope", &mut w, &mut sync, &mut cloud, SimTime::ZERO),
            Err(OrchestratorError::UnknownSlice(_))
        ));
        assert!(matches!(
            o.record_slice_functions("nope", &BTreeSet::new()),
            Err(OrchestratorError::UnknownSlice(_))
        ));
    }

    #[test]
    fn terminate_without_tasks_reports_zero() {
        let mut o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        let mut w = warm_worker();
        let plan = o.handle_service_request(&request(&[Retrieve])).unwrap();
        o.instantiate_slice(&plan, &mut w, SimTime::ZERO).unwrap();
        let mut cloud = ResourceTree::new("IN-CSE");
        let mut sync = OffloadSync::new();
        let t = SimTime::from_nanos(1_000_000_000);
        let r = o
            .terminate_slice(&plan.target_slice, &mut w, &mut sync, &mut cloud, t)
            .unwrap();
        assert_eq!(r.synced_resources, 0);
        assert!(!w.is_running(Retrieve, t));
        assert_eq!(o.slices().count(), 0);
    }

    #[test]
    fn unknown_device_and_no_edge() {
        let o = Orchestrator::new(topo(), FunctionRegistry::default_catalogue(), 1e8);
        assert!(matches!(
            o.select_edge_node(&"ghost".into()),
            Err(OrchestratorError::UnknownDevice(_))
        ));
        let lonely = Topology::new(
            vec![
                NodeSpec {
                    id: "device".into(),
                    role: NodeRole::Device,
                },
                NodeSpec {
                    id: "cloud".into(),
                    role: NodeRole::Cloud,
                },
            ],
            vec![LinkSpec::new("device", "cloud", 1.0, 0.0, 1.0)],
        )
        .unwrap();
        let o = Orchestrator::new(lonely, FunctionRegistry::default_catalogue(), 1e8);
        assert!(matches!(
            o.select_edge_node(&"device".into()),
            Err(OrchestratorError::NoEdgeAvailable(_))
        ));
    }
}
