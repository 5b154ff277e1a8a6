//! A simulated deployment: devices, edge workers and the cloud, exchanging
//! wire-encoded primitives over the network model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::HarnessError;
use crate::function::FunctionKind;
use crate::netsim::{Network, NodeRole, Simulator, TraceRecord};
use crate::node::NodeId;
use crate::offload::{
    import_task, OffloadBundle, OffloadSync, SyncError, SyncMode, SyncRoot, Task,
};
use crate::orchestrator::{Decision, Orchestrator, ServiceRequest, SlicingPlan, TerminationReport};
use crate::resource::{
    NewResource, NotifyPrimitive, Operation, RequestContent, RequestPrimitive, ResourcePath,
    ResourceTree, ResponseContent, ResponsePrimitive, ResponseStatus,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::{self, ControlOp, ControlPrimitive};
use crate::worker::{EdgeWorker, WorkerConfig};

/// Backoff before each notification retry.
const RETRY_BACKOFF_MS: [f64; 3] = [100.0, 200.0, 400.0];

#[derive(Clone, Debug)]
enum Body {
    Request(String),
    Response(String),
    Control(String),
    ControlReply(String),
}

#[derive(Clone, Debug)]
struct Message {
    from: NodeId,
    to: NodeId,
    body: Body,
    size: u64,
}

#[derive(Debug)]
enum Event {
    Send(Message),
    Deliver(Message),
    Retry {
        from: NodeId,
        to: NodeId,
        attempt: usize,
    },
    Tick(u64),
}

/// A data-plane request answered at a device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completed {
    pub request_id: String,
    pub device: NodeId,
    pub target: NodeId,
    pub sent_at: SimTime,
    pub received_at: SimTime,
    pub response: ResponsePrimitive,
    /// The response exactly as it arrived on the wire.
    pub wire: String,
}

impl Completed {
    pub fn rtt(&self) -> SimDuration {
        self.received_at.since(self.sent_at)
    }
}

/// How a service request ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceOutcome {
    pub request_id: String,
    pub service_id: String,
    pub ok: bool,
    pub decision: Option<Decision>,
    pub slice_id: Option<String>,
    pub edge: Option<NodeId>,
    pub detail: String,
    pub started_functions: BTreeSet<FunctionKind>,
    pub emitted_at: SimTime,
    /// Arrival of the request at the first edge.
    pub prep_started: Option<SimTime>,
    /// Import and sync setup finished on the edge.
    pub prep_finished: Option<SimTime>,
    pub ready_at: SimTime,
}

impl ServiceOutcome {
    pub fn preparation_time(&self) -> Option<SimDuration> {
        Some(self.prep_finished?.since(self.prep_started?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestbedStats {
    pub messages_delivered: u64,
    pub messages_undeliverable: u64,
    pub notifications_sent: u64,
    pub notifications_retried: u64,
    pub notifications_dropped: u64,
    pub notifications_applied: u64,
    pub notify_errors: u64,
    pub redirects: u64,
    pub conflicts: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogLine {
    pub at: SimTime,
    pub text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ServiceReady {
    ok: bool,
    service_id: String,
    decision: Option<Decision>,
    slice_id: Option<String>,
    edge: Option<NodeId>,
    started: BTreeSet<FunctionKind>,
    detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SliceReady {
    slice_id: String,
    covered: BTreeSet<FunctionKind>,
    started: BTreeSet<FunctionKind>,
    error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleTransfer {
    slice_id: String,
    mode: SyncMode,
    bundles: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OffloadDone {
    imported: Vec<(String, ResourcePath)>,
    failed: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
struct Flow {
    request: ServiceRequest,
    plan: Option<SlicingPlan>,
    covered: BTreeSet<FunctionKind>,
    started: BTreeSet<FunctionKind>,
    mode: SyncMode,
    tasks: Vec<Task>,
}

pub struct Testbed {
    config: ScenarioConfig,
    sim: Simulator<Event>,
    net: Network,
    cloud_id: NodeId,
    cloud: EdgeWorker,
    orchestrator: Orchestrator,
    sync: OffloadSync,
    edges: BTreeMap<NodeId, EdgeWorker>,
    next_rqi: u64,
    outstanding: BTreeMap<String, (NodeId, NodeId, SimTime)>,
    completed: BTreeMap<String, Completed>,
    redirects: BTreeMap<String, NodeId>,
    outbox: BTreeMap<(NodeId, NodeId), VecDeque<Message>>,
    flows: BTreeMap<String, Flow>,
    control_queue: VecDeque<(NodeId, ControlPrimitive)>,
    control_busy: Option<String>,
    service_emitted: BTreeMap<String, SimTime>,
    prep_started: BTreeMap<String, SimTime>,
    prep_finished: BTreeMap<String, SimTime>,
    outcomes: BTreeMap<String, ServiceOutcome>,
    stats: TestbedStats,
    log: Vec<LogLine>,
    pacing: Option<(Instant, f64)>,
    ticks: u64,
    last_tick: u64,
}

fn pad_payload(seed: &str, size: u64) -> Vec<u8> {
    let mut bytes = seed.as_bytes().to_vec();
    bytes.resize(size as usize, b'.');
    bytes
}

impl Testbed {
    pub fn new(config: &ScenarioConfig) -> Result<Self, HarnessError> {
        Self::with_seed(config, config.seed)
    }

    pub fn with_seed(config: &ScenarioConfig, seed: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let topology = config.topology()?;
        let catalogue = config.catalogue()?;
        let mut net = Network::new(topology.clone(), seed);
        for n in &config.nodes {
            let relay = SimDuration::from_millis_f64(config.processing_for(&n.id).relay_ms);
            net.set_relay(&n.id, relay);
        }
        let cloud_id = config.cloud_node().clone();
        let worker_config = |id: &NodeId, label: &str| WorkerConfig {
            node: id.clone(),
            cse_label: label.to_owned(),
            memory_capacity_bytes: config.worker.memory_capacity_bytes,
            start_delay: SimDuration::from_millis_f64(config.worker.start_delay_ms),
            processing: config.processing_for(id).profile(),
        };
        let cloud = EdgeWorker::monolithic(worker_config(&cloud_id, &config.cse.cloud));
        let mut edges = BTreeMap::new();
        for id in topology.nodes_with_role(NodeRole::EdgeWorker) {
            let mut w = EdgeWorker::new(worker_config(id, &config.cse.edge));
            if config.registry.preseed {
                for img in catalogue.images() {
                    if !config.registry.cold_functions.contains(&img.function) {
                        w.cache_mut().preseed(&img.image_id);
                    }
                }
            }
            edges.insert(id.clone(), w);
        }
        let orchestrator = Orchestrator::new(
            topology,
            catalogue,
            config.registry.pull_bandwidth_bytes_per_s,
        )
        .with_quota(config.quota()?);
        let mut tb = Self {
            config: config.clone(),
            sim: Simulator::new(),
            net,
            cloud_id,
            cloud,
            orchestrator,
            sync: OffloadSync::new(),
            edges,
            next_rqi: 0,
            outstanding: BTreeMap::new(),
            completed: BTreeMap::new(),
            redirects: BTreeMap::new(),
            outbox: BTreeMap::new(),
            flows: BTreeMap::new(),
            control_queue: VecDeque::new(),
            control_busy: None,
            service_emitted: BTreeMap::new(),
            prep_started: BTreeMap::new(),
            prep_finished: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            stats: TestbedStats::default(),
            log: Vec::new(),
            pacing: config.realtime.map(|f| (Instant::now(), f)),
            ticks: 0,
            last_tick: 0,
        };
        tb.seed_data()?;
        Ok(tb)
    }

    fn seed_data(&mut self) -> Result<(), HarnessError> {
        let payload = self.config.messages.payload_bytes;
        for seed in self.config.seed_data.clone() {
            let tree = self.tree_of_mut(&seed.node).ok_or_else(|| {
                HarnessError::ConfigInvalid(format!("seed node {} hosts no CSE", seed.node))
            })?;
            let mut at = ResourcePath::root(tree.cse_label());
            for seg in &seed.path.segments {
                let next = at.child(seg);
                if tree.resolve_id(&next).is_err() {
                    tree.create(&at, NewResource::container(seg)).map_err(|e| {
                        HarnessError::ConfigInvalid(format!("seed {}: {e}", seed.path))
                    })?;
                }
                at = next;
            }
            for i in 0..seed.instances {
                let content = pad_payload(&format!("{}#{i}", seed.path), payload);
                tree.create(&at, NewResource::content_instance(content))
                    .map_err(|e| HarnessError::ConfigInvalid(format!("seed {}: {e}", seed.path)))?;
            }
        }
        Ok(())
    }

    fn tree_of_mut(&mut self, node: &NodeId) -> Option<&mut ResourceTree> {
        if node == &self.cloud_id {
            Some(self.cloud.tree_mut())
        } else {
            self.edges.get_mut(node).map(EdgeWorker::tree_mut)
        }
    }

    /// Sleeps so that virtual time advances no faster than `factor` times
    /// wall-clock time.
    pub fn set_realtime(&mut self, factor: Option<f64>) {
        self.pacing = factor.map(|f| (Instant::now(), f));
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn cloud_node(&self) -> &NodeId {
        &self.cloud_id
    }

    pub fn cloud(&self) -> &EdgeWorker {
        &self.cloud
    }

    pub fn cloud_mut(&mut self) -> &mut EdgeWorker {
        &mut self.cloud
    }

    pub fn edge(&self, id: &NodeId) -> Option<&EdgeWorker> {
        self.edges.get(id)
    }

    pub fn edge_mut(&mut self, id: &NodeId) -> Option<&mut EdgeWorker> {
        self.edges.get_mut(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&NodeId, &EdgeWorker)> {
        self.edges.iter()
    }

    pub fn sync(&self) -> &OffloadSync {
        &self.sync
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn stats(&self) -> &TestbedStats {
        &self.stats
    }

    pub fn log(&self) -> &[LogLine] {
        &self.log
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.sim.trace()
    }

    pub fn set_link_up(&mut self, a: &NodeId, b: &NodeId, up: bool) {
        self.net.set_link_up(a, b, up);
        self.note(format!("link {a}-{b} {}", if up { "up" } else { "down" }));
    }

    fn note(&mut self, text: String) {
        self.log.push(LogLine {
            at: self.sim.now(),
            text,
        });
    }

    pub fn next_request_id(&mut self, origin: &NodeId) -> String {
        self.next_rqi += 1;
        format!("{origin}-{:06}", self.next_rqi)
    }

    /// Edge that a device reaches first on its way to the cloud.
    pub fn gateway_of(&self, device: &NodeId) -> Option<NodeId> {
        let topo = self.net.topology();
        let on_route = self.net.route(device, &self.cloud_id).and_then(|hops| {
            hops.iter()
                .find(|h| topo.role(h) == Some(NodeRole::EdgeWorker))
                .cloned()
        });
        on_route.or_else(|| {
            topo.nodes_with_role(NodeRole::EdgeWorker)
                .filter_map(|e| Some((topo.path_delay(device, e)?, e.clone())))
                .min()
                .map(|(_, e)| e)
        })
    }

    fn request_size(&self, req: &RequestPrimitive) -> u64 {
        let header = self.config.messages.header_bytes;
        let content = match &req.content {
            Some(RequestContent::Resource(spec)) => spec.content.as_ref().map_or(0, Vec::len),
            Some(RequestContent::Notification(body)) => {
                body.resource.content.as_ref().map_or(0, Vec::len)
            }
            _ => 0,
        };
        header + content as u64
    }

    fn response_size(&self, resp: &ResponsePrimitive) -> u64 {
        let content = resp
            .resource()
            .and_then(|r| r.content.as_ref())
            .map_or(0, Vec::len);
        self.config.messages.header_bytes + content as u64
    }

    fn send_at(&mut self, at: SimTime, from: &NodeId, to: &NodeId, body: Body, size: u64) {
        self.sim.schedule(
            at,
            Event::Send(Message {
                from: from.clone(),
                to: to.clone(),
                body,
                size,
            }),
        );
    }

    fn send_request_at(&mut self, at: SimTime, from: &NodeId, to: &NodeId, req: &RequestPrimitive) {
        let size = self.request_size(req);
        self.send_at(at, from, to, Body::Request(wire::encode_request(req)), size);
    }

    fn send_response_at(
        &mut self,
        at: SimTime,
        from: &NodeId,
        to: &NodeId,
        resp: &ResponsePrimitive,
    ) {
        let size = self.response_size(resp);
        self.send_at(
            at,
            from,
            to,
            Body::Response(wire::encode_response(resp)),
            size,
        );
    }

    fn send_control_at(
        &mut self,
        at: SimTime,
        ctl: ControlPrimitive,
        reply: bool,
        extra_bytes: u64,
    ) {
        let from = NodeId::from(ctl.from.as_str());
        let to = NodeId::from(ctl.to.as_str());
        let text = wire::encode_control(&ctl);
        let body = if reply {
            Body::ControlReply(text)
        } else {
            Body::Control(text)
        };
        let size = self.config.messages.control_bytes + extra_bytes;
        self.send_at(at, &from, &to, body, size);
    }

    /// Emits a data-plane request from `device` to `target` now.
    pub fn submit(
        &mut self,
        device: &NodeId,
        target: &NodeId,
        mut req: RequestPrimitive,
    ) -> String {
        if req.request_id.is_empty() {
            req.request_id = self.next_request_id(device);
        }
        let now = self.sim.now();
        self.outstanding.insert(
            req.request_id.clone(),
            (device.clone(), target.clone(), now),
        );
        self.send_request_at(now, device, target, &req);
        req.request_id
    }

    /// Submits a request and runs the simulation until its response reaches
    /// the device.
    pub fn request(
        &mut self,
        device: &NodeId,
        target: &NodeId,
        req: RequestPrimitive,
    ) -> Result<Completed, HarnessError> {
        let rqi = self.submit(device, target, req);
        self.run_until(|tb| tb.completed.contains_key(&rqi));
        self.completed
            .remove(&rqi)
            .ok_or_else(|| HarnessError::Scenario(format!("request {rqi} never completed")))
    }

    /// Sends the configured service's request from its device and waits for
    /// the service-ready reply.
    pub fn service_request(&mut self, service_id: &str) -> Result<ServiceOutcome, HarnessError> {
        let svc = self
            .config
            .service(service_id)
            .ok_or_else(|| HarnessError::ConfigInvalid(format!("unknown service {service_id}")))?
            .clone();
        let gateway = self.gateway_of(&svc.device).ok_or_else(|| {
            HarnessError::Scenario(format!("no edge reachable from {}", svc.device))
        })?;
        let request = ServiceRequest {
            device: svc.device.clone(),
            service_id: svc.id.clone(),
            profile: svc.profile()?,
        };
        let rqi = self.next_request_id(&svc.device);
        let ctl = ControlPrimitive::new(
            ControlOp::ServiceRequest,
            gateway.as_str(),
            svc.device.as_str(),
            &rqi,
        )
        .with_json(&request);
        self.service_emitted.insert(rqi.clone(), self.sim.now());
        self.note(format!("{} requests service {}", svc.device, svc.id));
        self.send_control_at(self.sim.now(), ctl, false, 0);
        self.run_until(|tb| tb.outcomes.contains_key(&rqi));
        self.outcomes
            .remove(&rqi)
            .ok_or_else(|| HarnessError::Scenario(format!("service request {rqi} never completed")))
    }

    /// Drains in-flight traffic, then terminates the slice and merges every
    /// bound task back into the cloud.
    pub fn terminate_slice(&mut self, slice_id: &str) -> Result<TerminationReport, HarnessError> {
        self.run_until_idle();
        let edge = self
            .orchestrator
            .slice(slice_id)
            .map(|s| s.edge_node.clone())
            .ok_or_else(|| HarnessError::Scenario(format!("unknown slice {slice_id}")))?;
        let now = self.sim.now();
        let worker = self.edges.get_mut(&edge).expect("slice edge exists");
        self.cloud.tree_mut().advance_to(now);
        let report = self
            .orchestrator
            .terminate_slice(slice_id, worker, &mut self.sync, self.cloud.tree_mut(), now)
            .map_err(|e| HarnessError::Scenario(e.to_string()))?;
        self.note(format!(
            "slice {slice_id} terminated, {} resources synchronized",
            report.synced_resources
        ));
        Ok(report)
    }

    pub fn crash(
        &mut self,
        edge: &NodeId,
        function: FunctionKind,
    ) -> Result<SimDuration, HarnessError> {
        let now = self.sim.now();
        let w = self
            .edges
            .get_mut(edge)
            .ok_or_else(|| HarnessError::Scenario(format!("unknown edge {edge}")))?;
        let d = w
            .crash_and_respawn(function, now)
            .map_err(|e| HarnessError::Scenario(e.to_string()))?;
        self.note(format!("{function} crashed on {edge}, back in {d}"));
        Ok(d)
    }

    /// Lets virtual time pass, processing whatever falls due.
    pub fn advance(&mut self, d: SimDuration) {
        self.ticks += 1;
        let tick = self.ticks;
        self.sim.schedule_in(d, Event::Tick(tick));
        self.run_until(|tb| tb.last_tick >= tick);
    }

    pub fn run_until_idle(&mut self) {
        self.run_until(|_| false);
    }

    fn run_until(&mut self, mut done: impl FnMut(&Self) -> bool) {
        while !done(self) {
            let Some(fired) = self.sim.pop() else {
                break;
            };
            if let Some((start, factor)) = self.pacing {
                let target = Duration::from_secs_f64(fired.at.as_nanos() as f64 / 1e9 / factor);
                if let Some(wait) = target.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            self.handle(fired.event);
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Tick(n) => self.last_tick = self.last_tick.max(n),
            Event::Send(msg) => self.transmit(msg),
            Event::Retry { from, to, attempt } => self.retry(from, to, attempt),
            Event::Deliver(msg) => {
                self.stats.messages_delivered += 1;
                if msg.to == self.cloud_id {
                    self.at_cloud(msg);
                } else if self.edges.contains_key(&msg.to) {
                    self.at_edge(msg);
                } else {
                    self.at_device(msg);
                }
            }
        }
    }

    fn is_notify(msg: &Message) -> bool {
        matches!(&msg.body, Body::Request(text) if text.starts_with("op=5\n"))
    }

    fn transmit(&mut self, msg: Message) {
        let key = (msg.from.clone(), msg.to.clone());
        let notify = Self::is_notify(&msg);
        if notify {
            if let Some(queue) = self.outbox.get_mut(&key) {
                queue.push_back(msg);
                return;
            }
        }
        let now = self.sim.now();
        match self.net.send(&msg.from, &msg.to, msg.size, now) {
            Ok(d) => {
                self.sim.schedule(d.arrive_at, Event::Deliver(msg));
            }
            Err(e) if notify => {
                self.note(format!("notify {}->{} blocked: {e}", msg.from, msg.to));
                self.outbox.entry(key).or_default().push_back(msg.clone());
                self.schedule_retry(&msg.from, &msg.to, 0);
            }
            Err(e) => {
                self.stats.messages_undeliverable += 1;
                self.note(format!("message {}->{} dropped: {e}", msg.from, msg.to));
            }
        }
    }

    fn schedule_retry(&mut self, from: &NodeId, to: &NodeId, attempt: usize) {
        let backoff = SimDuration::from_millis_f64(RETRY_BACKOFF_MS[attempt]);
        self.sim.schedule_in(
            backoff,
            Event::Retry {
                from: from.clone(),
                to: to.clone(),
                attempt,
            },
        );
    }

    /// Retries the head of a blocked notification channel. Once it gets
    /// through, the rest of the queue follows in order.
    fn retry(&mut self, from: NodeId, to: NodeId, attempt: usize) {
        self.stats.notifications_retried += 1;
        let key = (from.clone(), to.clone());
        let now = self.sim.now();
        loop {
            let Some(head) = self.outbox.get(&key).and_then(|q| q.front()).cloned() else {
                self.outbox.remove(&key);
                return;
            };
            match self.net.send(&from, &to, head.size, now) {
                Ok(d) => {
                    self.outbox.get_mut(&key).expect("queue").pop_front();
                    self.sim.schedule(d.arrive_at, Event::Deliver(head));
                    continue;
                }
                Err(_) if attempt + 1 < RETRY_BACKOFF_MS.len() => {
                    self.schedule_retry(&from, &to, attempt + 1);
                    return;
                }
                Err(e) => {
                    self.outbox.get_mut(&key).expect("queue").pop_front();
                    self.stats.notifications_dropped += 1;
                    if let Body::Request(text) = &head.body {
                        if let Ok(req) = wire::decode_request(text) {
                            self.sync.record_dropped(&req.to);
                        }
                    }
                    self.note(format!("notify {from}->{to} dropped after retries: {e}"));
                    if self.outbox.get(&key).is_some_and(|q| !q.is_empty()) {
                        self.schedule_retry(&from, &to, 0);
                    } else {
                        self.outbox.remove(&key);
                    }
                    return;
                }
            }
        }
    }

    fn at_device(&mut self, msg: Message) {
        let now = self.sim.now();
        match msg.body {
            Body::Response(text) => {
                let Ok(resp) = wire::decode_response(&text) else {
                    return;
                };
                if let Some((device, target, sent_at)) = self.outstanding.remove(&resp.request_id) {
                    self.completed.insert(
                        resp.request_id.clone(),
                        Completed {
                            request_id: resp.request_id.clone(),
                            device,
                            target,
                            sent_at,
                            received_at: now,
                            response: resp,
                            wire: text,
                        },
                    );
                }
            }
            Body::ControlReply(text) => {
                let Ok(ctl) = wire::decode_control(&text) else {
                    return;
                };
                if ctl.op != ControlOp::ServiceRequest {
                    return;
                }
                let Ok(ready) = ctl.json::<ServiceReady>() else {
                    return;
                };
                let rqi = ctl.request_id.clone();
                let outcome = ServiceOutcome {
                    request_id: rqi.clone(),
                    service_id: ready.service_id,
                    ok: ready.ok,
                    decision: ready.decision,
                    slice_id: ready.slice_id,
                    edge: ready.edge,
                    detail: ready.detail,
                    started_functions: ready.started,
                    emitted_at: self.service_emitted.remove(&rqi).unwrap_or(now),
                    prep_started: self.prep_started.remove(&rqi),
                    prep_finished: self.prep_finished.remove(&rqi),
                    ready_at: now,
                };
                self.outcomes.insert(rqi, outcome);
            }
            Body::Request(_) | Body::Control(_) => {}
        }
    }

    fn at_edge(&mut self, msg: Message) {
        let now = self.sim.now();
        let edge_id = msg.to.clone();
        match msg.body {
            Body::Request(text) => {
                let Ok(req) = wire::decode_request(&text) else {
                    self.stats.messages_undeliverable += 1;
                    return;
                };
                let worker = self.edges.get_mut(&edge_id).expect("edge");
                let out = worker.dispatch(&req, now);
                self.send_response_at(out.completed_at, &edge_id, &msg.from, &out.response);
                for n in out.notifications {
                    self.emit_notification(out.completed_at, &edge_id, n);
                }
            }
            Body::Response(_) => {}
            Body::Control(text) => {
                let Ok(ctl) = wire::decode_control(&text) else {
                    return;
                };
                match ctl.op {
                    ControlOp::ServiceRequest => {
                        self.prep_started.insert(ctl.request_id.clone(), now);
                        let fwd = ControlPrimitive {
                            to: self.cloud_id.as_str().to_owned(),
                            from: edge_id.as_str().to_owned(),
                            ..ctl
                        };
                        self.send_control_at(now, fwd, false, 0);
                    }
                    ControlOp::SliceInstantiate => self.edge_instantiate(&edge_id, ctl),
                    ControlOp::BundleTransfer => self.edge_import(&edge_id, ctl),
                    ControlOp::StartFunction | ControlOp::StopFunction | ControlOp::Crash => {
                        let worker = self.edges.get_mut(&edge_id).expect("edge");
                        let reply = worker.handle_admin(&ctl, now);
                        self.send_control_at(now, reply, true, 0);
                    }
                    _ => {}
                }
            }
            Body::ControlReply(_) => {}
        }
    }

    fn emit_notification(&mut self, at: SimTime, from: &NodeId, n: NotifyPrimitive) {
        self.stats.notifications_sent += 1;
        if let Some(task) = self
            .sync
            .task_for_cloud_path(&n.target.path)
            .map(str::to_owned)
        {
            self.sync.record_sent(&task);
        }
        let req = n.to_request();
        let to = n.target.node.clone();
        self.send_request_at(at, from, &to, &req);
    }

    fn edge_instantiate(&mut self, edge_id: &NodeId, ctl: ControlPrimitive) {
        let now = self.sim.now();
        let reply = |ready: SliceReady| {
            ControlPrimitive::new(
                ControlOp::SliceInstantiate,
                ctl.from.as_str(),
                edge_id.as_str(),
                &ctl.request_id,
            )
            .with_json(&ready)
        };
        let plan: SlicingPlan = match ctl.json() {
            Ok(p) => p,
            Err(e) => {
                let r = reply(SliceReady {
                    slice_id: String::new(),
                    covered: BTreeSet::new(),
                    started: BTreeSet::new(),
                    error: Some(e.to_string()),
                });
                self.send_control_at(now, r, true, 0);
                return;
            }
        };
        let worker = self.edges.get_mut(edge_id).expect("edge");
        match self.orchestrator.instantiate_slice(&plan, worker, now) {
            Ok(inst) => {
                self.note(format!(
                    "{} active on {edge_id} after {} (pull {}, start {})",
                    plan.target_slice,
                    inst.elapsed(),
                    inst.pull_time,
                    inst.start_time
                ));
                let r = reply(SliceReady {
                    slice_id: plan.target_slice.clone(),
                    covered: inst.slice.functions(),
                    started: inst.started.clone(),
                    error: None,
                });
                self.send_control_at(inst.active_at, r, true, 0);
            }
            Err(e) => {
                self.note(format!("{} failed on {edge_id}: {e}", plan.target_slice));
                let r = reply(SliceReady {
                    slice_id: plan.target_slice.clone(),
                    covered: BTreeSet::new(),
                    started: BTreeSet::new(),
                    error: Some(e.to_string()),
                });
                self.send_control_at(now, r, true, 0);
            }
        }
    }

    fn edge_import(&mut self, edge_id: &NodeId, ctl: ControlPrimitive) {
        let now = self.sim.now();
        let mut done = OffloadDone {
            imported: Vec::new(),
            failed: Vec::new(),
        };
        match ctl.json::<BundleTransfer>() {
            Ok(transfer) => {
                for text in &transfer.bundles {
                    match self.import_one(edge_id, text, transfer.mode) {
                        Ok((task, root)) => done.imported.push((task, root)),
                        Err((task, e)) => done.failed.push((task, e)),
                    }
                }
            }
            Err(e) => done.failed.push((String::new(), e.to_string())),
        }
        self.prep_finished.insert(ctl.request_id.clone(), now);
        let reply = ControlPrimitive::new(
            ControlOp::BundleTransfer,
            ctl.from.as_str(),
            edge_id.as_str(),
            &ctl.request_id,
        )
        .with_json(&done);
        self.send_control_at(now, reply, true, 0);
    }

    fn import_one(
        &mut self,
        edge_id: &NodeId,
        text: &str,
        mode: SyncMode,
    ) -> Result<(String, ResourcePath), (String, String)> {
        let now = self.sim.now();
        let bundle = OffloadBundle::decode(text).map_err(|e| (String::new(), e.to_string()))?;
        let task_id = bundle.task_id.clone();
        let fail = |e: SyncError| (task_id.clone(), e.to_string());
        let worker = self.edges.get_mut(edge_id).expect("edge");
        worker.tree_mut().advance_to(now);
        let root = import_task(worker.tree_mut(), &bundle).map_err(fail)?;
        self.sync
            .confirm_import(&task_id, edge_id, root.clone())
            .map_err(fail)?;
        if mode == SyncMode::Eager {
            let binding = self
                .sync
                .setup_eager_sync(worker.tree_mut(), &task_id, &self.cloud_id)
                .map_err(fail)?;
            worker.sync_agent_mut().watch(SyncRoot {
                task_id: task_id.clone(),
                edge_root: binding.edge_root.clone(),
                cloud_root: binding.cloud_mirror_root.clone(),
                cloud_node: self.cloud_id.clone(),
            });
        }
        self.note(format!(
            "task {task_id} imported at {root} ({} resources)",
            bundle.len()
        ));
        Ok((task_id, root))
    }

    fn at_cloud(&mut self, msg: Message) {
        let now = self.sim.now();
        let cloud_id = self.cloud_id.clone();
        match msg.body {
            Body::Request(text) => {
                let Ok(req) = wire::decode_request(&text) else {
                    self.stats.messages_undeliverable += 1;
                    return;
                };
                self.cloud_request(&msg.from, req);
            }
            Body::Response(text) => {
                let Ok(resp) = wire::decode_response(&text) else {
                    return;
                };
                if let Some(origin) = self.redirects.remove(&resp.request_id) {
                    self.send_at(now, &cloud_id, &origin, Body::Response(text), msg.size);
                }
            }
            Body::Control(text) => {
                let Ok(ctl) = wire::decode_control(&text) else {
                    return;
                };
                if ctl.op == ControlOp::ServiceRequest {
                    self.control_queue.push_back((msg.from.clone(), ctl));
                    self.pump_control();
                }
            }
            Body::ControlReply(text) => {
                let Ok(ctl) = wire::decode_control(&text) else {
                    return;
                };
                match ctl.op {
                    ControlOp::SliceInstantiate => self.cloud_slice_ready(ctl),
                    ControlOp::BundleTransfer => self.cloud_offload_done(ctl),
                    _ => {}
                }
            }
        }
    }

    fn cloud_request(&mut self, from: &NodeId, req: RequestPrimitive) {
        let now = self.sim.now();
        let cloud_id = self.cloud_id.clone();
        let processing = self.cloud.processing_time(&req);
        match req.operation {
            Operation::Notify => {
                let (start, end) = self.cloud.occupy(now, processing);
                self.cloud.tree_mut().advance_to(start);
                let resp = match NotifyPrimitive::from_request(&req, &cloud_id) {
                    Some(n) => match self.sync.apply_notification(self.cloud.tree_mut(), &n) {
                        Ok(_) => {
                            self.stats.notifications_applied += 1;
                            ResponsePrimitive::new(&req.request_id, ResponseStatus::Ok, None)
                        }
                        Err(e) => {
                            self.stats.notify_errors += 1;
                            let status = match e {
                                SyncError::UnknownBinding(_)
                                | SyncError::StaleNotify(_)
                                | SyncError::NotFound(_) => ResponseStatus::NotFound,
                                SyncError::Conflict(_) => ResponseStatus::Conflict,
                                _ => ResponseStatus::BadRequest,
                            };
                            ResponsePrimitive::new(
                                &req.request_id,
                                status,
                                Some(ResponseContent::Message(e.to_string())),
                            )
                        }
                    },
                    None => {
                        ResponsePrimitive::new(&req.request_id, ResponseStatus::BadRequest, None)
                    }
                };
                self.send_response_at(end, &cloud_id, from, &resp);
            }
            Operation::Retrieve => {
                if let Some((edge, edge_path)) = self.sync.redirect_for(&req.to) {
                    self.stats.redirects += 1;
                    self.redirects.insert(req.request_id.clone(), from.clone());
                    let fwd = RequestPrimitive {
                        to: edge_path,
                        ..req
                    };
                    self.send_request_at(now, &cloud_id, &edge, &fwd);
                    return;
                }
                self.cloud_dispatch(from, &req);
            }
            Operation::Create | Operation::Update | Operation::Delete => {
                if let Err(e) = self
                    .sync
                    .guard_cloud_write(&req.to, req.operation == Operation::Create)
                {
                    self.stats.conflicts += 1;
                    let (_, end) = self.cloud.occupy(now, processing);
                    let resp = ResponsePrimitive::new(
                        &req.request_id,
                        ResponseStatus::Conflict,
                        Some(ResponseContent::Message(e.to_string())),
                    );
                    self.send_response_at(end, &cloud_id, from, &resp);
                    return;
                }
                self.cloud_dispatch(from, &req);
            }
        }
    }

    fn cloud_dispatch(&mut self, from: &NodeId, req: &RequestPrimitive) {
        let now = self.sim.now();
        let cloud_id = self.cloud_id.clone();
        let out = self.cloud.dispatch(req, now);
        self.send_response_at(out.completed_at, &cloud_id, from, &out.response);
        for n in out.notifications {
            self.emit_notification(out.completed_at, &cloud_id, n);
        }
    }

    fn pump_control(&mut self) {
        if self.control_busy.is_some() {
            return;
        }
        let Some((_, ctl)) = self.control_queue.pop_front() else {
            return;
        };
        self.control_busy = Some(ctl.request_id.clone());
        let rqi = ctl.request_id.clone();
        let request: ServiceRequest = match ctl.json() {
            Ok(r) => r,
            Err(e) => {
                self.finish_flow_with_error(&rqi, None, &e.to_string());
                return;
            }
        };
        let Some(svc) = self.config.service(&request.service_id).cloned() else {
            let flow = Flow {
                request: request.clone(),
                plan: None,
                covered: BTreeSet::new(),
                started: BTreeSet::new(),
                mode: SyncMode::Eager,
                tasks: Vec::new(),
            };
            self.flows.insert(rqi.clone(), flow);
            self.finish_flow_with_error(
                &rqi,
                None,
                &format!("unknown service {}", request.service_id),
            );
            return;
        };
        let tasks: Vec<Task> = svc
            .tasks
            .iter()
            .filter_map(|t| self.config.task(t))
            .map(|t| Task {
                task_id: t.id.clone(),
                root_path: t.root.clone(),
                owner_service: t.owner.clone(),
            })
            .collect();
        self.flows.insert(
            rqi.clone(),
            Flow {
                request: request.clone(),
                plan: None,
                covered: BTreeSet::new(),
                started: BTreeSet::new(),
                mode: svc.sync_mode,
                tasks,
            },
        );
        let plan = match self.orchestrator.handle_service_request(&request) {
            Ok(p) => p,
            Err(e) => {
                self.finish_flow_with_error(&rqi, None, &e.to_string());
                return;
            }
        };
        self.note(format!(
            "decision for {}: {:?} on {} missing {:?}",
            request.service_id, plan.decision, plan.edge_node, plan.missing_functions
        ));
        self.flows.get_mut(&rqi).expect("flow").plan = Some(plan.clone());
        match plan.decision {
            Decision::InstantiateThenOffload => {
                let ctl = ControlPrimitive::new(
                    ControlOp::SliceInstantiate,
                    plan.edge_node.as_str(),
                    self.cloud_id.as_str(),
                    &rqi,
                )
                .with_json(&plan);
                self.send_control_at(self.sim.now(), ctl, false, 0);
            }
            Decision::FastPathOffloadOnly => {
                let _ = self
                    .orchestrator
                    .attach_service(&plan.target_slice, &plan.service_id);
                self.offload_tasks(&rqi);
            }
        }
    }

    fn cloud_slice_ready(&mut self, ctl: ControlPrimitive) {
        let rqi = ctl.request_id.clone();
        let ready: SliceReady = match ctl.json() {
            Ok(r) => r,
            Err(e) => return self.finish_flow_with_error(&rqi, None, &e.to_string()),
        };
        if let Some(err) = ready.error {
            let plan = self.flows.get(&rqi).and_then(|f| f.plan.clone());
            return self.finish_flow_with_error(&rqi, plan.as_ref(), &err);
        }
        if let Some(flow) = self.flows.get_mut(&rqi) {
            flow.covered = ready.covered;
            flow.started = ready.started;
        }
        self.offload_tasks(&rqi);
    }

    /// Exports every task of the flow that is not yet on an edge and ships
    /// the bundles in one transfer.
    fn offload_tasks(&mut self, rqi: &str) {
        let Some(flow) = self.flows.get(rqi).cloned() else {
            return;
        };
        let plan = flow.plan.clone().expect("planned flow");
        let mut bundles = Vec::new();
        let mut content = 0;
        for task in &flow.tasks {
            match self.sync.export_task(self.cloud.tree(), task) {
                Ok(b) => {
                    content += b.content_bytes();
                    bundles.push(b.encode());
                }
                Err(SyncError::AlreadyOffloaded(_)) => {}
                Err(e) => {
                    self.note(format!("export of {} failed: {e}", task.task_id));
                }
            }
        }
        if bundles.is_empty() {
            self.record_and_finish(rqi);
            return;
        }
        let transfer = BundleTransfer {
            slice_id: plan.target_slice.clone(),
            mode: flow.mode,
            bundles,
        };
        let ctl = ControlPrimitive::new(
            ControlOp::BundleTransfer,
            plan.edge_node.as_str(),
            self.cloud_id.as_str(),
            rqi,
        )
        .with_json(&transfer);
        self.send_control_at(self.sim.now(), ctl, false, content);
    }

    fn cloud_offload_done(&mut self, ctl: ControlPrimitive) {
        let rqi = ctl.request_id.clone();
        let Some(flow) = self.flows.get(&rqi).cloned() else {
            return;
        };
        let plan = flow.plan.clone().expect("planned flow");
        let done: OffloadDone = match ctl.json() {
            Ok(d) => d,
            Err(e) => return self.finish_flow_with_error(&rqi, Some(&plan), &e.to_string()),
        };
        for (task, _) in &done.imported {
            let _ = self.orchestrator.bind_task(&plan.target_slice, task);
            if flow.mode == SyncMode::Lazy {
                if let Err(e) = self.sync.register_redirect(task) {
                    self.note(format!("redirect for {task} failed: {e}"));
                }
            }
        }
        for (task, reason) in &done.failed {
            self.sync.abort_export(task);
            self.note(format!("import of {task} failed: {reason}"));
        }
        self.record_and_finish(&rqi);
    }

    fn record_and_finish(&mut self, rqi: &str) {
        let Some(flow) = self.flows.remove(rqi) else {
            return;
        };
        let plan = flow.plan.clone().expect("planned flow");
        if !flow.covered.is_empty() {
            let _ = self
                .orchestrator
                .record_slice_functions(&plan.target_slice, &flow.covered);
        }
        let ready = ServiceReady {
            ok: true,
            service_id: flow.request.service_id.clone(),
            decision: Some(plan.decision),
            slice_id: Some(plan.target_slice.clone()),
            edge: Some(plan.edge_node.clone()),
            started: flow.started.clone(),
            detail: String::new(),
        };
        self.reply_service(rqi, &flow.request.device, &ready);
    }

    fn finish_flow_with_error(&mut self, rqi: &str, plan: Option<&SlicingPlan>, detail: &str) {
        let flow = self.flows.remove(rqi);
        let device = flow
            .as_ref()
            .map(|f| f.request.device.clone())
            .unwrap_or_else(|| NodeId::from(rqi.rsplit_once('-').map_or(rqi, |(d, _)| d)));
        self.note(format!("service request {rqi} failed: {detail}"));
        let ready = ServiceReady {
            ok: false,
            service_id: flow.map(|f| f.request.service_id).unwrap_or_default(),
            decision: plan.map(|p| p.decision),
            slice_id: plan.map(|p| p.target_slice.clone()),
            edge: plan.map(|p| p.edge_node.clone()),
            started: BTreeSet::new(),
            detail: detail.to_owned(),
        };
        self.reply_service(rqi, &device, &ready);
    }

    fn reply_service(&mut self, rqi: &str, device: &NodeId, ready: &ServiceReady) {
        let ctl = ControlPrimitive::new(
            ControlOp::ServiceRequest,
            device.as_str(),
            self.cloud_id.as_str(),
            rqi,
        )
        .with_json(ready);
        self.send_control_at(self.sim.now(), ctl, true, 0);
        self.control_busy = None;
        self.pump_control();
    }

    /// Starts a function on an edge through the admin protocol, bypassing
    /// the orchestrator.
    pub fn admin(
        &mut self,
        edge: &NodeId,
        ctl: ControlPrimitive,
    ) -> Result<ControlPrimitive, HarnessError> {
        let now = self.sim.now();
        let w = self
            .edges
            .get_mut(edge)
            .ok_or_else(|| HarnessError::Scenario(format!("unknown edge {edge}")))?;
        Ok(w.handle_admin(&ctl, now))
    }
}
