//! Edge worker: hosts function instances on fixed ports, owns the MN-CSE
//! tree and gates each primitive on the function it maps to.
//!
//! The worker is a single FIFO server in virtual time. A request is gated
//! when it arrives and gated again when the server picks it up, so a crash
//! that lands while a request is queued still rejects it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::function::FunctionKind;
use crate::node::NodeId;
use crate::offload::EdgeSyncAgent;
use crate::registry::{FunctionImage, WorkerCache};
use crate::resource::{
    execute, match_subscriptions, ChangeEvent, NotifyPrimitive, Operation, RequestPrimitive,
    ResourceKind, ResourceTree, ResponsePrimitive, ResponseStatus,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::{ControlOp, ControlPrimitive};

pub const DEFAULT_START_DELAY: SimDuration = SimDuration::from_nanos(250_000_000);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceQuota {
    pub max_memory_bytes: u64,
    pub max_cpu_share: f64,
}

impl ResourceQuota {
    pub fn new(max_memory_bytes: u64, max_cpu_share: f64) -> Result<Self, WorkerError> {
        let q = Self {
            max_memory_bytes,
            max_cpu_share,
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<(), WorkerError> {
        if self.max_memory_bytes == 0 || !(self.max_cpu_share > 0.0 && self.max_cpu_share <= 1.0) {
            return Err(WorkerError::InvalidQuota(*self));
        }
        Ok(())
    }
}

impl Default for ResourceQuota {
    fn default() -> Self {
        Self {
            max_memory_bytes: 128_000_000,
            max_cpu_share: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionState {
    Starting,
    Running,
    Crashed,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionInstance {
    pub function: FunctionKind,
    pub port: u16,
    pub state: FunctionState,
    pub started_at: SimTime,
    pub ready_at: SimTime,
    pub quota: ResourceQuota,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkerError {
    #[error("image {0} is not cached on this worker")]
    ImageNotCached(String),
    #[error("{0} is already running")]
    AlreadyRunning(FunctionKind),
    #[error("{0} is not running")]
    NotRunning(FunctionKind),
    #[error("quota exceeded: {requested} bytes requested, {available} available")]
    WorkerQuotaExceeded { requested: u64, available: u64 },
    #[error("invalid quota {0:?}")]
    InvalidQuota(ResourceQuota),
}

/// Service time per primitive operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingProfile {
    pub create: SimDuration,
    pub retrieve: SimDuration,
    pub update: SimDuration,
    pub delete: SimDuration,
    pub notify: SimDuration,
}

impl ProcessingProfile {
    pub fn for_operation(&self, op: Operation) -> SimDuration {
        match op {
            Operation::Create => self.create,
            Operation::Retrieve => self.retrieve,
            Operation::Update => self.update,
            Operation::Delete => self.delete,
            Operation::Notify => self.notify,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerConfig {
    pub node: NodeId,
    pub cse_label: String,
    pub memory_capacity_bytes: u64,
    pub start_delay: SimDuration,
    pub processing: ProcessingProfile,
}

impl WorkerConfig {
    pub fn new(node: impl Into<NodeId>, cse_label: &str) -> Self {
        Self {
            node: node.into(),
            cse_label: cse_label.to_owned(),
            memory_capacity_bytes: 4_000_000_000,
            start_delay: DEFAULT_START_DELAY,
            processing: ProcessingProfile::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub at: SimTime,
    pub function: FunctionKind,
    pub state: FunctionState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub request_id: String,
    pub operation: Operation,
    pub function: FunctionKind,
    pub arrived_at: SimTime,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub status: ResponseStatus,
}

/// What one dispatched request produced.
#[derive(Clone, Debug)]
pub struct DispatchOutcome {
    pub response: ResponsePrimitive,
    pub function: FunctionKind,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub events: Vec<ChangeEvent>,
    /// Notifications to send, stamped at `completed_at`.
    pub notifications: Vec<NotifyPrimitive>,
    /// Notifications withheld because Notification was not running.
    pub suppressed: usize,
}

/// Function a primitive needs on this tree.
pub fn required_function(tree: &ResourceTree, req: &RequestPrimitive) -> FunctionKind {
    let target_kind = || tree.retrieve(&req.to).ok().map(|r| r.kind);
    match req.operation {
        Operation::Notify => FunctionKind::Notification,
        Operation::Create => match req.created_kind() {
            Some(ResourceKind::ContentInstance) => FunctionKind::DataManagement,
            Some(ResourceKind::Subscription) => FunctionKind::Subscription,
            _ => FunctionKind::Registration,
        },
        Operation::Retrieve => match target_kind() {
            Some(ResourceKind::Subscription) => FunctionKind::Subscription,
            _ => FunctionKind::Retrieve,
        },
        Operation::Update | Operation::Delete => match target_kind() {
            Some(ResourceKind::Subscription) => FunctionKind::Subscription,
            Some(ResourceKind::CseBase | ResourceKind::Ae) => FunctionKind::Registration,
            _ => FunctionKind::DataManagement,
        },
    }
}

#[derive(Clone, Debug)]
pub struct EdgeWorker {
    config: WorkerConfig,
    tree: ResourceTree,
    cache: WorkerCache,
    instances: BTreeMap<FunctionKind, FunctionInstance>,
    agent: EdgeSyncAgent,
    busy_until: SimTime,
    lifecycle: Vec<LifecycleEvent>,
    dispatch_log: Vec<DispatchRecord>,
    suppressed_total: u64,
}

impl EdgeWorker {
    pub fn new(config: WorkerConfig) -> Self {
        let tree = ResourceTree::new(&config.cse_label);
        let cache = WorkerCache::new(config.node.clone());
        Self {
            config,
            tree,
            cache,
            instances: BTreeMap::new(),
            agent: EdgeSyncAgent::default(),
            busy_until: SimTime::ZERO,
            lifecycle: Vec::new(),
            dispatch_log: Vec::new(),
            suppressed_total: 0,
        }
    }

    /// A worker with every function already running, as a monolithic
    /// cloud CSE would be.
    pub fn monolithic(config: WorkerConfig) -> Self {
        let mut w = Self::new(config);
        for f in FunctionKind::ALL {
            let inst = FunctionInstance {
                function: f,
                port: f.port(),
                state: FunctionState::Running,
                started_at: SimTime::ZERO,
                ready_at: SimTime::ZERO,
                quota: ResourceQuota {
                    max_memory_bytes: 1,
                    max_cpu_share: 1.0,
                },
                image_id: format!("builtin-{f}"),
            };
            w.log(SimTime::ZERO, f, FunctionState::Running);
            w.instances.insert(f, inst);
        }
        w
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn node(&self) -> &NodeId {
        &self.config.node
    }

    pub fn tree(&self) -> &ResourceTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut ResourceTree {
        &mut self.tree
    }

    pub fn cache(&self) -> &WorkerCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut WorkerCache {
        &mut self.cache
    }

    pub fn sync_agent(&self) -> &EdgeSyncAgent {
        &self.agent
    }

    pub fn sync_agent_mut(&mut self) -> &mut EdgeSyncAgent {
        &mut self.agent
    }

    pub fn lifecycle_log(&self) -> &[LifecycleEvent] {
        &self.lifecycle
    }

    pub fn dispatch_log(&self) -> &[DispatchRecord] {
        &self.dispatch_log
    }

    pub fn suppressed_notifications(&self) -> u64 {
        self.suppressed_total
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    fn log(&mut self, at: SimTime, function: FunctionKind, state: FunctionState) {
        self.lifecycle.push(LifecycleEvent {
            at,
            function,
            state,
        });
    }

    /// Promotes instances whose start delay has elapsed by `now`.
    fn refresh(&mut self, now: SimTime) {
        let ready: Vec<(FunctionKind, SimTime)> = self
            .instances
            .values()
            .filter(|i| i.state == FunctionState::Starting && i.ready_at <= now)
            .map(|i| (i.function, i.ready_at))
            .collect();
        for (f, at) in ready {
            self.instances.get_mut(&f).expect("listed").state = FunctionState::Running;
            self.log(at, f, FunctionState::Running);
        }
    }

    pub fn instance(&mut self, function: FunctionKind, now: SimTime) -> Option<&FunctionInstance> {
        self.refresh(now);
        self.instances.get(&function)
    }

    pub fn state_of(&mut self, function: FunctionKind, now: SimTime) -> Option<FunctionState> {
        self.instance(function, now).map(|i| i.state)
    }

    pub fn is_running(&mut self, function: FunctionKind, now: SimTime) -> bool {
        self.state_of(function, now) == Some(FunctionState::Running)
    }

    pub fn running_functions(&mut self, now: SimTime) -> BTreeSet<FunctionKind> {
        self.refresh(now);
        self.instances
            .values()
            .filter(|i| i.state == FunctionState::Running)
            .map(|i| i.function)
            .collect()
    }

    /// Functions that are running or will be once their start delay passes.
    pub fn enabled_functions(&self) -> BTreeSet<FunctionKind> {
        self.instances
            .values()
            .filter(|i| matches!(i.state, FunctionState::Running | FunctionState::Starting))
            .map(|i| i.function)
            .collect()
    }

    /// Memory reserved by every instance that is not stopped.
    pub fn reserved_memory(&self) -> u64 {
        self.instances
            .values()
            .filter(|i| i.state != FunctionState::Stopped)
            .map(|i| i.quota.max_memory_bytes)
            .sum()
    }

    pub fn start_function(
        &mut self,
        image: &FunctionImage,
        quota: ResourceQuota,
        now: SimTime,
    ) -> Result<FunctionInstance, WorkerError> {
        self.refresh(now);
        quota.validate()?;
        if !self.cache.contains(&image.image_id) {
            return Err(WorkerError::ImageNotCached(image.image_id.clone()));
        }
        let f = image.function;
        if self
            .instances
            .get(&f)
            .is_some_and(|i| i.state != FunctionState::Stopped)
        {
            return Err(WorkerError::AlreadyRunning(f));
        }
        let available = self
            .config
            .memory_capacity_bytes
            .saturating_sub(self.reserved_memory());
        if quota.max_memory_bytes > available {
            return Err(WorkerError::WorkerQuotaExceeded {
                requested: quota.max_memory_bytes,
                available,
            });
        }
        let inst = FunctionInstance {
            function: f,
            port: f.port(),
            state: FunctionState::Starting,
            started_at: now,
            ready_at: now + self.config.start_delay,
            quota,
            image_id: image.image_id.clone(),
        };
        self.log(now, f, FunctionState::Starting);
        self.instances.insert(f, inst.clone());
        self.refresh(now);
        Ok(inst)
    }

    pub fn stop_function(
        &mut self,
        function: FunctionKind,
        now: SimTime,
    ) -> Result<(), WorkerError> {
        self.refresh(now);
        match self.instances.get_mut(&function) {
            Some(i) if i.state != FunctionState::Stopped => {
                i.state = FunctionState::Stopped;
                self.log(now, function, FunctionState::Stopped);
                Ok(())
            }
            _ => Err(WorkerError::NotRunning(function)),
        }
    }

    /// Crashes a running function and immediately begins its restart.
    /// Returns how long the function stays unavailable.
    pub fn crash_and_respawn(
        &mut self,
        function: FunctionKind,
        now: SimTime,
    ) -> Result<SimDuration, WorkerError> {
        self.refresh(now);
        let delay = self.config.start_delay;
        match self.instances.get_mut(&function) {
            Some(i) if i.state == FunctionState::Running => {
                i.state = FunctionState::Starting;
                i.started_at = now;
                i.ready_at = now + delay;
            }
            _ => return Err(WorkerError::NotRunning(function)),
        }
        self.log(now, function, FunctionState::Crashed);
        self.log(now, function, FunctionState::Starting);
        self.refresh(now);
        Ok(delay)
    }

    /// Books the server for `service` starting no earlier than `arrival`.
    /// Returns the start and completion instants.
    pub fn occupy(&mut self, arrival: SimTime, service: SimDuration) -> (SimTime, SimTime) {
        let start = arrival.max(self.busy_until);
        self.busy_until = start + service;
        (start, self.busy_until)
    }

    pub fn processing_time(&self, req: &RequestPrimitive) -> SimDuration {
        self.config.processing.for_operation(req.operation)
    }

    /// Serves one request that arrived at `arrival`.
    pub fn dispatch(&mut self, req: &RequestPrimitive, arrival: SimTime) -> DispatchOutcome {
        let function = required_function(&self.tree, req);
        if !self.is_running(function, arrival) {
            return self.reject(req, function, arrival, arrival);
        }
        let start = arrival.max(self.busy_until);
        if !self.is_running(function, start) {
            return self.reject(req, function, arrival, start);
        }
        let completed_at = start + self.processing_time(req);
        self.busy_until = completed_at;
        self.tree.advance_to(start);
        let (response, mut events) = execute(&mut self.tree, req);
        let mut maintenance = Vec::new();
        for ev in &events {
            maintenance.extend(self.agent.observe(&mut self.tree, ev));
        }
        events.extend(maintenance);

        let notifications: Vec<NotifyPrimitive> = events
            .iter()
            .flat_map(|ev| match_subscriptions(&self.tree, ev))
            .collect();
        let (notifications, suppressed) =
            if self.is_running(FunctionKind::Notification, completed_at) {
                (notifications, 0)
            } else {
                let n = notifications.len();
                (Vec::new(), n)
            };
        self.suppressed_total += suppressed as u64;
        self.dispatch_log.push(DispatchRecord {
            request_id: req.request_id.clone(),
            operation: req.operation,
            function,
            arrived_at: arrival,
            started_at: start,
            completed_at,
            status: response.status,
        });
        DispatchOutcome {
            response,
            function,
            started_at: start,
            completed_at,
            events,
            notifications,
            suppressed,
        }
    }

    fn reject(
        &mut self,
        req: &RequestPrimitive,
        function: FunctionKind,
        arrival: SimTime,
        at: SimTime,
    ) -> DispatchOutcome {
        let response = ResponsePrimitive::function_not_enabled(&req.request_id, function.as_str());
        self.dispatch_log.push(DispatchRecord {
            request_id: req.request_id.clone(),
            operation: req.operation,
            function,
            arrived_at: arrival,
            started_at: at,
            completed_at: at,
            status: response.status,
        });
        DispatchOutcome {
            response,
            function,
            started_at: at,
            completed_at: at,
            events: Vec::new(),
            notifications: Vec::new(),
            suppressed: 0,
        }
    }

    /// Handles admin ops 20-22. The reply reuses the request's op and id.
    pub fn handle_admin(&mut self, ctl: &ControlPrimitive, now: SimTime) -> ControlPrimitive {
        let result = match ctl.op {
            ControlOp::StartFunction => ctl
                .json::<StartFunction>()
                .map_err(|e| e.to_string())
                .and_then(|s| {
                    self.start_function(&s.image, s.quota, now)
                        .map(|i| AdminReply::ok(Some(i.ready_at)))
                        .map_err(|e| e.to_string())
                }),
            ControlOp::StopFunction => ctl
                .json::<FunctionKind>()
                .map_err(|e| e.to_string())
                .and_then(|f| {
                    self.stop_function(f, now)
                        .map(|_| AdminReply::ok(None))
                        .map_err(|e| e.to_string())
                }),
            ControlOp::Crash => ctl
                .json::<FunctionKind>()
                .map_err(|e| e.to_string())
                .and_then(|f| {
                    self.crash_and_respawn(f, now)
                        .map(|d| AdminReply::ok(Some(now + d)))
                        .map_err(|e| e.to_string())
                }),
            other => Err(format!("op {} is not an admin op", other.code())),
        };
        let reply = result.unwrap_or_else(|detail| AdminReply {
            ok: false,
            ready_at: None,
            detail,
        });
        ControlPrimitive::new(
            ctl.op,
            &ctl.from,
            self.config.node.as_str(),
            &ctl.request_id,
        )
        .with_json(&reply)
    }
}

/// Payload of a StartFunction admin request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartFunction {
    pub image: FunctionImage,
    pub quota: ResourceQuota,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminReply {
    pub ok: bool,
    pub ready_at: Option<SimTime>,
    pub detail: String,
}

impl AdminReply {
    fn ok(ready_at: Option<SimTime>) -> Self {
        Self {
            ok: true,
            ready_at,
            detail: String::new(),
        }
    }
}
