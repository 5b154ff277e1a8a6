//! Checks shared by the topic test files and the acceptance run. Each one
//! returns a short description on success and the reason on failure.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use edgeslice::harness::{
    closed_form_preparation, run_benchmark, run_preparation_timing, run_retrieval_comparison,
    run_road_scenario, Mode, NodeProcessing, ScenarioConfig, Testbed, WorkloadOp, PAPER_CALIBRATED,
};
use edgeslice::netsim::{LinkSpec, NodeRole, NodeSpec};
use edgeslice::offload::SyncMode;
use edgeslice::orchestrator::Decision;
use edgeslice::resource::{
    execute, ChangeKind, NewResource, NotificationBody, NotificationTarget, Operation,
    RequestContent, RequestPrimitive, ResourceId, ResourceKind, ResourcePatch, ResourcePath,
    ResourceTree, ResponseStatus,
};
use edgeslice::wire;
use edgeslice::{FunctionKind, NodeId, SimDuration};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn p(text: &str) -> ResourcePath {
    text.parse().expect("valid path")
}

pub fn device() -> NodeId {
    NodeId::from("device")
}

pub fn edge() -> NodeId {
    NodeId::from("edge")
}

pub fn cloud() -> NodeId {
    NodeId::from("cloud")
}

pub fn calibrated() -> ScenarioConfig {
    ScenarioConfig::paper_calibrated()
}

pub fn without_jitter(mut c: ScenarioConfig) -> ScenarioConfig {
    for l in &mut c.links {
        l.jitter_ms = 0.0;
    }
    c
}

pub fn with_sync_mode(mut c: ScenarioConfig, mode: SyncMode) -> ScenarioConfig {
    c.services[0].sync_mode = mode;
    c
}

/// Structural copy of a subtree without subscriptions, children sorted by
/// name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub name: String,
    pub kind: ResourceKind,
    pub creation_ns: u64,
    pub labels: Vec<String>,
    pub content: Option<Vec<u8>>,
    pub children: Vec<Snapshot>,
}

fn snapshot_id(tree: &ResourceTree, id: &ResourceId) -> Snapshot {
    let r = tree.get(id).expect("live id");
    let mut children: Vec<Snapshot> = tree
        .children(id)
        .iter()
        .filter(|c| tree.get(c).map(|r| r.kind) != Some(ResourceKind::Subscription))
        .map(|c| snapshot_id(tree, c))
        .collect();
    children.sort_by(|a, b| a.name.cmp(&b.name));
    Snapshot {
        name: r.name.clone(),
        kind: r.kind,
        creation_ns: r.creation_time.as_nanos(),
        labels: r.labels.clone(),
        content: r.content.clone(),
        children,
    }
}

pub fn snapshot(tree: &ResourceTree, path: &ResourcePath) -> Option<Snapshot> {
    tree.resolve_id(path).ok().map(|id| snapshot_id(tree, &id))
}

pub fn count(s: &Snapshot) -> usize {
    1 + s.children.iter().map(count).sum::<usize>()
}

/// Paths of every non-subscription resource at or below `root`.
pub fn paths_below(tree: &ResourceTree, root: &ResourcePath) -> Vec<(ResourcePath, ResourceKind)> {
    let Ok(id) = tree.resolve_id(root) else {
        return Vec::new();
    };
    tree.subtree(&id)
        .into_iter()
        .filter_map(|i| {
            let r = tree.get(&i)?;
            (r.kind != ResourceKind::Subscription)
                .then(|| (tree.path_of(&i).expect("live"), r.kind))
        })
        .collect()
}

// ---------------------------------------------------------------- fast path

pub fn check_fast_path() -> Check {
    let mut tb = Testbed::new(&calibrated()).map_err(|e| e.to_string())?;
    let first = tb
        .service_request("car-location")
        .map_err(|e| e.to_string())?;
    let starts_after_first = tb.orchestrator().start_calls().len();
    let lifecycle_after_first = tb.edge(&edge()).unwrap().lifecycle_log().len();
    let second = tb
        .service_request("car-location")
        .map_err(|e| e.to_string())?;
    ensure!(
        first.ok && second.ok,
        "service requests failed: {} / {}",
        first.detail,
        second.detail
    );
    ensure!(
        first.decision == Some(Decision::InstantiateThenOffload),
        "first decision {:?}",
        first.decision
    );
    ensure!(
        second.decision == Some(Decision::FastPathOffloadOnly),
        "second decision {:?}",
        second.decision
    );
    let instantiations = tb
        .orchestrator()
        .decisions()
        .iter()
        .filter(|d| d.decision == Decision::InstantiateThenOffload)
        .count();
    ensure!(instantiations == 1, "{instantiations} instantiation phases");
    ensure!(
        starts_after_first == 5,
        "first request started {starts_after_first} functions"
    );
    ensure!(
        tb.orchestrator().start_calls().len() == starts_after_first,
        "second request started functions"
    );
    ensure!(
        tb.edge(&edge()).unwrap().lifecycle_log().len() == lifecycle_after_first,
        "second request changed function lifecycles"
    );
    ensure!(
        second.started_functions.is_empty(),
        "second reported started functions"
    );
    Ok(format!(
        "1 instantiation, second request fast path with 0 starts ({} log lines)",
        tb.log().len()
    ))
}

// ---------------------------------------------------------------- remapping

pub fn check_offload_remapping() -> Check {
    let road = ScenarioConfig::road();
    let report = run_road_scenario(&road).map_err(|e| e.to_string())?;
    let failed: Vec<String> = report
        .failures()
        .map(|a| format!("{}: {}", a.name, a.detail))
        .collect();
    ensure!(failed.is_empty(), "road assertions failed: {failed:?}");

    let mut tb = Testbed::new(&road).map_err(|e| e.to_string())?;
    let car_src =
        snapshot(tb.cloud().tree(), &p("IN-CSE/Cars/CarA")).ok_or("cloud CarA missing")?;
    let cit_src = snapshot(tb.cloud().tree(), &p("IN-CSE/Pedestrians/CitizenA"))
        .ok_or("cloud CitizenA missing")?;
    let b_before = snapshot(
        tb.edge(&edge()).unwrap().tree(),
        &p("MN-CSE/Pedestrians/CitizenB"),
    );
    ensure!(
        tb.edge(&edge())
            .unwrap()
            .tree()
            .retrieve(&p("MN-CSE/Pedestrians/CitizenB/location"))
            .is_ok(),
        "CitizenB location not on the edge before offload"
    );
    for svc in ["pedestrian-warning", "car-safety"] {
        let o = tb.service_request(svc).map_err(|e| e.to_string())?;
        ensure!(o.ok, "{svc}: {}", o.detail);
    }
    let et = tb.edge(&edge()).unwrap().tree();
    let car = snapshot(et, &p("MN-CSE/Cars/CarA")).ok_or("edge CarA missing")?;
    let cit = snapshot(et, &p("MN-CSE/Pedestrians/CitizenA")).ok_or("edge CitizenA missing")?;
    ensure!(car == car_src, "CarA differs from its cloud source");
    ensure!(cit == cit_src, "CitizenA differs from its cloud source");
    ensure!(
        snapshot(et, &p("MN-CSE/Pedestrians/CitizenB")) == b_before,
        "CitizenB changed during offload"
    );
    ensure!(
        count(&car) >= 3 && count(&cit) >= 3,
        "imported subtrees are trivially small"
    );
    Ok(format!(
        "Cars/CarA ({} resources) and Pedestrians/CitizenA ({} resources) isomorphic; {} road assertions pass",
        count(&car),
        count(&cit),
        report.assertions.len()
    ))
}

// ---------------------------------------------------------------- edge writes

/// A random data-plane write against the edge copy of a task subtree.
pub fn random_edge_write(
    rng: &mut StdRng,
    tree: &ResourceTree,
    root: &ResourcePath,
    n: usize,
) -> RequestPrimitive {
    let all = paths_below(tree, root);
    let containers: Vec<&ResourcePath> = all
        .iter()
        .filter(|(_, k)| *k == ResourceKind::Container)
        .map(|(p, _)| p)
        .collect();
    let others: Vec<&ResourcePath> = all.iter().map(|(p, _)| p).filter(|p| *p != root).collect();
    let from = "device";
    let pick = |rng: &mut StdRng, v: &[&ResourcePath]| v[rng.gen_range(0..v.len())].clone();
    let roll = rng.gen_range(0..100);
    if roll < 40 || others.is_empty() {
        let len = rng.gen_range(1..48);
        let content: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect();
        RequestPrimitive::create(
            pick(rng, &containers),
            from,
            "",
            NewResource::content_instance(content),
        )
    } else if roll < 55 {
        let name = format!("c{}", rng.gen_range(0..12));
        RequestPrimitive::create(
            pick(rng, &containers),
            from,
            "",
            NewResource::container(&name),
        )
    } else if roll < 70 {
        let labels: Vec<String> = (0..rng.gen_range(0..3))
            .map(|i| format!("l{i}-{n}"))
            .collect();
        RequestPrimitive::update(pick(rng, &others), from, "", ResourcePatch::labels(labels))
    } else if roll < 78 {
        let movable: Vec<&ResourcePath> =
            containers.iter().copied().filter(|p| *p != root).collect();
        if movable.is_empty() {
            return RequestPrimitive::retrieve(root.clone(), from, "");
        }
        let patch = ResourcePatch {
            name: Some(format!("r{}", rng.gen_range(0..12))),
            ..Default::default()
        };
        RequestPrimitive::update(pick(rng, &movable), from, "", patch)
    } else if roll < 95 {
        RequestPrimitive::delete(pick(rng, &others), from, "")
    } else {
        RequestPrimitive::retrieve(pick(rng, &others), from, "")
    }
}

// ---------------------------------------------------------------- eager sync

pub fn eager_trial(seed: u64, ops: usize) -> Result<(usize, usize), String> {
    let mut c = with_sync_mode(calibrated(), SyncMode::Eager);
    c.seed = seed;
    let mut tb = Testbed::new(&c).map_err(|e| e.to_string())?;
    let o = tb
        .service_request("car-location")
        .map_err(|e| e.to_string())?;
    ensure!(o.ok, "service request failed: {}", o.detail);
    let root = tb
        .sync()
        .edge_root("CarA")
        .ok_or("CarA not offloaded")?
        .clone();
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..ops {
        let req = random_edge_write(&mut rng, tb.edge(&edge()).unwrap().tree(), &root, i);
        tb.submit(&device(), &edge(), req);
        if rng.gen_bool(0.7) {
            tb.advance(SimDuration::from_nanos(rng.gen_range(0..3_000_000)));
        }
    }
    tb.run_until_idle();
    let edge_side =
        snapshot(tb.edge(&edge()).unwrap().tree(), &root).ok_or("edge root vanished")?;
    let mirror =
        snapshot(tb.cloud().tree(), &p("IN-CSE/Cars/CarA")).ok_or("cloud mirror vanished")?;
    ensure!(
        edge_side == mirror,
        "seed {seed}: mirror diverged\nedge: {edge_side:#?}\ncloud: {mirror:#?}"
    );
    Ok((count(&edge_side), tb.stats().notifications_applied as usize))
}

pub fn check_eager_convergence(trials: u64) -> Check {
    let mut resources = 0;
    let mut applied = 0;
    for seed in 0..trials {
        let ops = 1 + (seed as usize * 37) % 200;
        let (r, a) = eager_trial(seed, ops)?;
        resources += r;
        applied += a;
    }
    ensure!(applied > 0, "no notification was ever applied");
    Ok(format!(
        "{trials}/{trials} trials converged ({applied} notifications applied, {resources} resources compared)"
    ))
}

// ---------------------------------------------------------------- lazy sync

pub fn check_lazy_redirect(retrieves: usize, seed: u64) -> Check {
    let mut c = with_sync_mode(calibrated(), SyncMode::Lazy);
    c.seed = seed;
    let mut tb = Testbed::new(&c).map_err(|e| e.to_string())?;
    let o = tb
        .service_request("car-location")
        .map_err(|e| e.to_string())?;
    ensure!(o.ok, "service request failed: {}", o.detail);
    let cloud_root = p("IN-CSE/Cars/CarA");
    let cloud_before = snapshot(tb.cloud().tree(), &cloud_root);
    let edge_root = tb
        .sync()
        .edge_root("CarA")
        .ok_or("CarA not offloaded")?
        .clone();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut redirected = 0;
    for i in 0..retrieves {
        if i % 7 == 3 {
            for j in 0..3 {
                let req = random_edge_write(
                    &mut rng,
                    tb.edge(&edge()).unwrap().tree(),
                    &edge_root,
                    i * 3 + j,
                );
                tb.request(&device(), &edge(), req)
                    .map_err(|e| e.to_string())?;
            }
        }
        let candidates = paths_below(tb.edge(&edge()).unwrap().tree(), &edge_root);
        let (edge_path, kind) = candidates[rng.gen_range(0..candidates.len())].clone();
        let edge_path = match rng.gen_range(0..4) {
            0 if kind == ResourceKind::Container => edge_path.latest(),
            1 => edge_path.child("absent"),
            _ => edge_path,
        };
        let cloud_path = edge_path.with_cse_label("IN-CSE");
        let before = tb.stats().redirects;
        let via_cloud = tb
            .request(
                &device(),
                &cloud(),
                RequestPrimitive::retrieve(cloud_path.clone(), "device", ""),
            )
            .map_err(|e| e.to_string())?;
        ensure!(
            tb.stats().redirects == before + 1,
            "{cloud_path} was not redirected"
        );
        redirected += 1;
        let direct = tb
            .request(
                &device(),
                &edge(),
                RequestPrimitive::retrieve(edge_path.clone(), "device", &via_cloud.request_id),
            )
            .map_err(|e| e.to_string())?;
        ensure!(
            via_cloud.wire == direct.wire,
            "response for {edge_path} differs:\n{}\nvs\n{}",
            via_cloud.wire,
            direct.wire
        );
    }
    ensure!(
        snapshot(tb.cloud().tree(), &cloud_root) == cloud_before,
        "cloud source changed during the lazy binding"
    );
    tb.run_until_idle();
    let edge_final =
        snapshot(tb.edge(&edge()).unwrap().tree(), &edge_root).ok_or("edge root vanished")?;
    let slice = o.slice_id.clone().ok_or("no slice id")?;
    let report = tb.terminate_slice(&slice).map_err(|e| e.to_string())?;
    let merged = snapshot(tb.cloud().tree(), &cloud_root).ok_or("cloud root vanished")?;
    ensure!(merged == edge_final, "finalize left the trees different");
    ensure!(
        tb.edge(&edge())
            .unwrap()
            .tree()
            .retrieve(&edge_root)
            .is_err(),
        "edge copy survived termination"
    );
    Ok(format!(
        "{redirected} redirected retrieves byte-equal; finalize synced {} resources into a deep-equal tree",
        report.synced_resources
    ))
}

// ---------------------------------------------------------------- latency

pub const TOLERANCE: f64 = 0.05;

pub fn within(actual: f64, expected: f64) -> bool {
    (actual - expected).abs() <= TOLERANCE * expected
}

pub fn check_latency_reproduction() -> Check {
    let c = calibrated();
    let create = run_benchmark(&c, WorkloadOp::Create, &[Mode::Cloud, Mode::Edge])
        .map_err(|e| e.to_string())?;
    ensure!(
        create.samples.len() == 120,
        "{} create samples",
        create.samples.len()
    );
    let cc = create.summary(Mode::Cloud).unwrap().mean_ms;
    let ce = create.summary(Mode::Edge).unwrap().mean_ms;
    let ret = run_retrieval_comparison(&c).map_err(|e| e.to_string())?;
    let rc = ret.cloud.mean_ms;
    let re = ret.edge.mean_ms;
    let line = format!(
        "create cloud {cc:.3} / edge {ce:.3} ms, retrieve cloud {rc:.3} / edge {re:.3} ms, ratio {:.3}",
        ret.ratio
    );
    ensure!(within(cc, 8.5), "cloud create mean off: {line}");
    ensure!(within(ce, 6.1), "edge create mean off: {line}");
    ensure!(within(rc, 67.42), "cloud retrieve mean off: {line}");
    ensure!(within(re, 37.32), "edge retrieve mean off: {line}");
    ensure!(
        (1.6..=2.0).contains(&ret.ratio),
        "ratio out of range: {line}"
    );
    Ok(line)
}

// ---------------------------------------------------------------- gating

pub fn notify_request(
    to: ResourcePath,
    tree: &ResourceTree,
    about: &ResourcePath,
) -> RequestPrimitive {
    let resource = tree.retrieve(about).expect("existing resource").clone();
    RequestPrimitive {
        operation: Operation::Notify,
        to,
        from: "IN-CSE".into(),
        request_id: String::new(),
        resource_kind: None,
        content: Some(RequestContent::Notification(NotificationBody {
            event: ChangeKind::Updated,
            subscription: p("IN-CSE/Cars/CarA/location/s"),
            resource,
            prior_name: None,
        })),
    }
}

pub fn check_function_gating() -> Check {
    let mut c = with_sync_mode(calibrated(), SyncMode::Lazy);
    c.services[0].functions = vec![FunctionKind::Registration, FunctionKind::Retrieve];
    let mut tb = Testbed::new(&c).map_err(|e| e.to_string())?;
    let o = tb
        .service_request("car-location")
        .map_err(|e| e.to_string())?;
    ensure!(o.ok, "service request failed: {}", o.detail);
    let now = tb.now();
    let running = tb.edge_mut(&edge()).unwrap().running_functions(now);
    let expected: BTreeSet<_> = [FunctionKind::Registration, FunctionKind::Retrieve].into();
    ensure!(running == expected, "edge runs {running:?}");

    let location = p("MN-CSE/Cars/CarA/location");
    let sub = RequestPrimitive::create(
        location.clone(),
        "device",
        "",
        NewResource::subscription(
            "watch",
            NotificationTarget {
                node: device(),
                path: p("device/inbox"),
            },
        ),
    );
    let sub_rsp = tb
        .request(&device(), &edge(), sub)
        .map_err(|e| e.to_string())?;
    let notify = notify_request(
        location.clone(),
        tb.edge(&edge()).unwrap().tree(),
        &location,
    );
    let notify_rsp = tb
        .request(&device(), &edge(), notify)
        .map_err(|e| e.to_string())?;
    let retrieve = tb
        .request(
            &device(),
            &edge(),
            RequestPrimitive::retrieve(location.latest(), "device", ""),
        )
        .map_err(|e| e.to_string())?;
    ensure!(
        sub_rsp.response.status.code() == 4005,
        "subscription create answered {:?}",
        sub_rsp.response.status
    );
    ensure!(
        notify_rsp.response.status.code() == 4005,
        "notify answered {:?}",
        notify_rsp.response.status
    );
    ensure!(
        retrieve.response.status == ResponseStatus::Ok && retrieve.response.resource().is_some(),
        "retrieve answered {:?}",
        retrieve.response.status
    );
    ensure!(
        !sub_rsp.wire.is_empty() && sub_rsp.wire.contains("4005"),
        "wire form lacks rsc 4005: {}",
        sub_rsp.wire
    );
    Ok("subscription create and notify -> 4005, retrieve -> 2000".into())
}

// ---------------------------------------------------------------- determinism

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_edgeslice"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn check_determinism(dir: &Path) -> Check {
    let scenario = dir.join("scenario.toml");
    std::fs::write(&scenario, PAPER_CALIBRATED).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, seed) in [("a", "42"), ("b", "42"), ("c", "43")] {
        let out = dir.join(run);
        let o = run_cli(&[
            "run",
            scenario.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure!(
            o.status.success(),
            "run {run} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let samples = std::fs::read(out.join("samples.csv")).map_err(|e| e.to_string())?;
        let summary = std::fs::read(out.join("summary.txt")).map_err(|e| e.to_string())?;
        outputs.push((samples, summary));
    }
    ensure!(
        outputs[0].0 == outputs[1].0,
        "samples.csv differs between runs"
    );
    ensure!(
        outputs[0].1 == outputs[1].1,
        "summary.txt differs between runs"
    );
    ensure!(
        outputs[0].0 != outputs[2].0,
        "the seed has no effect on samples"
    );
    let lines = outputs[0].0.iter().filter(|&&b| b == b'\n').count();
    Ok(format!(
        "two --seed 42 runs byte-identical ({lines} csv lines, {} summary bytes)",
        outputs[0].1.len()
    ))
}

// ---------------------------------------------------------------- analytic RTT

pub fn ns_of_ms(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

pub fn transfer_ns(size: u64, bw: f64) -> u64 {
    (size as f64 / bw * 1e9).round() as u64
}

/// Random zero-jitter chain device - edge [- relay edge] - cloud.
pub fn random_config(rng: &mut StdRng) -> ScenarioConfig {
    let mut c = calibrated();
    let relay_hop = rng.gen_bool(0.4);
    let mut nodes = vec![
        NodeSpec {
            id: device(),
            role: NodeRole::Device,
        },
        NodeSpec {
            id: edge(),
            role: NodeRole::EdgeWorker,
        },
        NodeSpec {
            id: cloud(),
            role: NodeRole::Cloud,
        },
    ];
    let mut chain = vec!["device", "edge"];
    if relay_hop {
        nodes.push(NodeSpec {
            id: "edge2".into(),
            role: NodeRole::EdgeWorker,
        });
        chain.push("edge2");
    }
    chain.push("cloud");
    c.links = chain
        .windows(2)
        .map(|w| {
            LinkSpec::new(
                w[0],
                w[1],
                rng.gen_range(0.0..20.0),
                0.0,
                rng.gen_range(1e5..1e9),
            )
        })
        .collect();
    c.nodes = nodes;
    c.messages.header_bytes = rng.gen_range(0..400);
    c.messages.payload_bytes = rng.gen_range(1..2000);
    c.messages.control_bytes = rng.gen_range(1..1000);
    c.processing.clear();
    for id in &chain[1..] {
        let proc = NodeProcessing {
            create_ms: rng.gen_range(0.0..10.0),
            retrieve_ms: rng.gen_range(0.0..80.0),
            update_ms: rng.gen_range(0.0..5.0),
            delete_ms: rng.gen_range(0.0..5.0),
            notify_ms: rng.gen_range(0.0..2.0),
            relay_ms: rng.gen_range(0.0..1.0),
        };
        c.processing.insert(NodeId::from(*id), proc);
    }
    c.workload.as_mut().unwrap().requests = 6;
    c
}

/// Expected one-way time along the fixed chain between two of its nodes.
pub fn chain_one_way(c: &ScenarioConfig, from: &str, to: &str, size: u64) -> u64 {
    let order: Vec<&str> = {
        let mut v = vec!["device", "edge"];
        if c.nodes.iter().any(|n| n.id.as_str() == "edge2") {
            v.push("edge2");
        }
        v.push("cloud");
        v
    };
    let i = order.iter().position(|n| *n == from).unwrap();
    let j = order.iter().position(|n| *n == to).unwrap();
    let (lo, hi) = (i.min(j), i.max(j));
    let mut total = 0;
    for k in lo..hi {
        let link = c
            .links
            .iter()
            .find(|l| {
                let (a, b) = (l.a.as_str(), l.b.as_str());
                (a == order[k] && b == order[k + 1]) || (b == order[k] && a == order[k + 1])
            })
            .unwrap();
        total += ns_of_ms(link.one_way_delay_ms) + transfer_ns(size, link.bandwidth_bytes_per_s);
        if k > lo {
            total += ns_of_ms(c.processing[&NodeId::from(order[k])].relay_ms);
        }
    }
    total
}

pub fn expected_rtt(c: &ScenarioConfig, mode: Mode, op: WorkloadOp) -> u64 {
    let h = c.messages.header_bytes;
    let payload = c.messages.payload_bytes;
    let server = match mode {
        Mode::Cloud => "cloud",
        Mode::Edge => "edge",
    };
    let proc = &c.processing[&NodeId::from(server)];
    let (req, rsp, work) = match op {
        WorkloadOp::Create => (h + payload, h + payload, proc.create_ms),
        _ => (h, h + payload, proc.retrieve_ms),
    };
    chain_one_way(c, "device", server, req)
        + ns_of_ms(work)
        + chain_one_way(c, server, "device", rsp)
}

pub fn check_analytic_rtt(topologies: u64) -> Check {
    let mut rng = StdRng::seed_from_u64(0xA11CE);
    let mut samples = 0;
    for t in 0..topologies {
        let c = random_config(&mut rng);
        for op in [WorkloadOp::Create, WorkloadOp::Retrieve] {
            let run = run_benchmark(&c, op, &[Mode::Cloud, Mode::Edge])
                .map_err(|e| format!("topology {t}: {e}"))?;
            for s in &run.samples {
                let expected = expected_rtt(&c, s.mode, op);
                ensure!(
                    s.rtt.as_nanos() == expected,
                    "topology {t} {:?} {:?} #{}: measured {} ns, closed form {} ns",
                    s.mode,
                    op,
                    s.request_index,
                    s.rtt.as_nanos(),
                    expected
                );
                let two_way = 2 * chain_one_way(
                    &c,
                    "device",
                    if s.mode == Mode::Cloud {
                        "cloud"
                    } else {
                        "edge"
                    },
                    0,
                );
                ensure!(
                    s.rtt.as_nanos() >= two_way,
                    "topology {t}: below the propagation bound"
                );
                samples += 1;
            }
        }
    }
    Ok(format!(
        "{samples} samples over {topologies} topologies equal the closed form exactly"
    ))
}

// ---------------------------------------------------------------- resource model

fn may_contain(parent: ResourceKind, child: ResourceKind) -> bool {
    use ResourceKind::*;
    match parent {
        CseBase => [Ae, Container, Subscription].contains(&child),
        Ae => [Container, Subscription].contains(&child),
        Container => [Container, ContentInstance, Subscription].contains(&child),
        ContentInstance | Subscription => false,
    }
}

/// Independent validation of the tree's structural guarantees.
pub fn verify_tree(tree: &ResourceTree) -> Result<(), String> {
    let all: Vec<_> = tree.resources().collect();
    let roots: Vec<_> = all.iter().filter(|r| r.parent_id.is_none()).collect();
    ensure!(roots.len() == 1, "{} roots", roots.len());
    ensure!(
        roots[0].kind == ResourceKind::CseBase,
        "root is {:?}",
        roots[0].kind
    );
    ensure!(
        all.iter()
            .filter(|r| r.kind == ResourceKind::CseBase)
            .count()
            == 1,
        "more than one CSEBase"
    );
    let mut reachable = 0;
    let mut stack = vec![roots[0].id.clone()];
    while let Some(id) = stack.pop() {
        reachable += 1;
        let parent = tree.get(&id).ok_or("dangling child id")?;
        let mut names = BTreeSet::new();
        let mut latest: Option<(u64, ResourceId)> = None;
        for c in tree.children(&id) {
            let child = tree.get(c).ok_or("dangling child id")?;
            ensure!(
                child.parent_id.as_ref() == Some(&id),
                "{} has a wrong parent link",
                child.id.as_str()
            );
            ensure!(
                may_contain(parent.kind, child.kind),
                "{:?} under {:?}",
                child.kind,
                parent.kind
            );
            ensure!(
                names.insert(child.name.clone()),
                "duplicate sibling name {}",
                child.name
            );
            ensure!(
                !child.name.contains('/') && !child.name.is_empty(),
                "bad name {:?}",
                child.name
            );
            ensure!(
                child.last_modified_time >= child.creation_time,
                "{} modified before creation",
                child.name
            );
            if child.kind == ResourceKind::ContentInstance {
                let ct = child.creation_time.as_nanos();
                if latest.as_ref().is_none_or(|(best, _)| ct >= *best) {
                    latest = Some((ct, child.id.clone()));
                }
            }
            stack.push(c.clone());
        }
        if parent.kind == ResourceKind::Container {
            let path = tree.path_of(&id).ok_or("unaddressable container")?;
            let got = tree.retrieve(&path.latest()).ok().map(|r| r.id.clone());
            ensure!(
                got == latest.as_ref().map(|(_, id)| id.clone()),
                "latest of {path} is {got:?}, brute force {latest:?}"
            );
        }
    }
    ensure!(
        reachable == all.len(),
        "{} of {} resources reachable",
        reachable,
        all.len()
    );
    Ok(())
}

pub fn random_primitive(rng: &mut StdRng, tree: &ResourceTree, i: usize) -> RequestPrimitive {
    let ids: Vec<ResourceId> = tree.resources().map(|r| r.id.clone()).collect();
    let target = tree
        .path_of(&ids[rng.gen_range(0..ids.len())])
        .expect("live");
    let hosts: Vec<&ResourceId> = ids
        .iter()
        .filter(|id| {
            let k = tree.get(id).expect("live").kind;
            matches!(
                k,
                ResourceKind::CseBase | ResourceKind::Ae | ResourceKind::Container
            )
        })
        .collect();
    let host = tree
        .path_of(hosts[rng.gen_range(0..hosts.len())])
        .expect("live");
    let name = |rng: &mut StdRng| -> Option<String> {
        match rng.gen_range(0..10) {
            0 => None,
            1 => Some("bad/name".into()),
            _ => Some(format!("n{}", rng.gen_range(0..20))),
        }
    };
    let rqi = format!("r{i}");
    match rng.gen_range(0..100) {
        0..=59 => {
            let kind = ResourceKind::ALL[rng.gen_range(0..5)];
            let mut spec = NewResource::new(kind);
            spec.name = name(rng);
            if kind == ResourceKind::ContentInstance || rng.gen_bool(0.1) {
                spec.content = Some(vec![rng.gen(); rng.gen_range(0..16)]);
            }
            if kind == ResourceKind::Subscription {
                spec.notification_target = Some(NotificationTarget {
                    node: device(),
                    path: p("device/inbox"),
                });
            }
            if rng.gen_bool(0.2) {
                spec.labels = vec![format!("t{}", rng.gen_range(0..3))];
            }
            let parent = match rng.gen_range(0..20) {
                0 => target.child("missing"),
                1..=4 => target,
                _ => host,
            };
            RequestPrimitive::create(parent, "device", &rqi, spec)
        }
        60..=74 => {
            let t = if rng.gen_bool(0.5) {
                target.latest()
            } else {
                target
            };
            RequestPrimitive::retrieve(t, "device", &rqi)
        }
        75..=94 => {
            let mut patch = ResourcePatch::default();
            match rng.gen_range(0..4) {
                0 => patch.name = name(rng),
                1 => patch.labels = Some(vec![format!("u{i}")]),
                2 => patch.content = Some(vec![1, 2, 3]),
                _ => patch.kind = Some(ResourceKind::ALL[rng.gen_range(0..5)]),
            }
            RequestPrimitive::update(target, "device", &rqi, patch)
        }
        _ => RequestPrimitive::delete(target, "device", &rqi),
    }
}

pub fn check_resource_invariants(ops: usize, seed: u64) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tree = ResourceTree::new("IN-CSE");
    let mut outcomes = [0usize; 2];
    let mut round_trips = 0;
    let mut largest = 0;
    for i in 0..ops {
        if rng.gen_bool(0.6) {
            let now = tree.now();
            tree.advance_to(now + SimDuration::from_nanos(rng.gen_range(0..3)));
        }
        let req = random_primitive(&mut rng, &tree, i);
        ensure!(
            wire::decode_request(&wire::encode_request(&req)).as_ref() == Ok(&req),
            "request wire round trip failed at op {i}"
        );
        let (rsp, _) = execute(&mut tree, &req);
        ensure!(
            wire::decode_response(&wire::encode_response(&rsp)).as_ref() == Ok(&rsp),
            "response wire round trip failed at op {i}"
        );
        outcomes[usize::from(rsp.status.is_success())] += 1;
        largest = largest.max(tree.len());
        verify_tree(&tree)
            .map_err(|e| format!("after op {i} ({:?} {}): {e}", req.operation, req.to))?;
        if i % 500 == 499 {
            let copy = ResourceTree::from_json(&tree.to_json()).map_err(|e| e.to_string())?;
            ensure!(copy == tree, "json round trip differs at op {i}");
            round_trips += 1;
        }
    }
    ensure!(
        outcomes[0] > 0 && outcomes[1] > 0,
        "operations never succeeded or never failed"
    );
    Ok(format!(
        "{ops} ops ({} ok, {} rejected), up to {largest} resources, {round_trips} round trips deep-equal",
        outcomes[1],
        outcomes[0]
    ))
}

// ---------------------------------------------------------------- preparation

/// The control-plane schedule written out for the one-hop edge-cloud
/// link: four control legs, functions started one after the other, and
/// the bundle carrying every seeded instance.
pub fn expected_preparation_ns(c: &ScenarioConfig) -> u64 {
    let link = c.links.iter().find(|l| l.joins(&edge(), &cloud())).unwrap();
    let d = ns_of_ms(link.one_way_delay_ms);
    let bw = link.bandwidth_bytes_per_s;
    let ctrl = c.messages.control_bytes;
    let content: u64 = c
        .seed_data
        .iter()
        .filter(|s| s.node == cloud())
        .map(|s| s.instances as u64 * c.messages.payload_bytes)
        .sum();
    let functions = c.services[0].functions.len() as u64;
    4 * d
        + 3 * transfer_ns(ctrl, bw)
        + transfer_ns(ctrl + content, bw)
        + functions * ns_of_ms(c.worker.start_delay_ms)
}

pub fn check_preparation_timing() -> Check {
    let warm_cfg = without_jitter(calibrated());
    let warm = run_preparation_timing(&warm_cfg, 10).map_err(|e| e.to_string())?;
    ensure!(
        warm.samples.len() == 10,
        "{} repetitions",
        warm.samples.len()
    );
    let schedule = expected_preparation_ns(&warm_cfg);
    ensure!(
        warm.mean.as_nanos() == schedule,
        "warm mean {} ns, schedule {} ns",
        warm.mean.as_nanos(),
        schedule
    );
    let library = closed_form_preparation(&warm_cfg).map_err(|e| e.to_string())?;
    ensure!(
        library.as_nanos() == schedule,
        "library schedule {} ns",
        library.as_nanos()
    );

    let mut one_cold = warm_cfg.clone();
    one_cold.registry.cold_functions = vec![FunctionKind::Registration];
    let one = run_preparation_timing(&one_cold, 10).map_err(|e| e.to_string())?;
    let image = 400_000_000f64 / one_cold.registry.pull_bandwidth_bytes_per_s;
    ensure!(
        one.mean.as_nanos() - warm.mean.as_nanos() == (image * 1e9).round() as u64,
        "one cold image added {} ns",
        one.mean.as_nanos() - warm.mean.as_nanos()
    );

    let mut all_cold = warm_cfg.clone();
    all_cold.registry.preseed = false;
    let cold = run_preparation_timing(&all_cold, 10).map_err(|e| e.to_string())?;
    let missing = all_cold.services[0].functions.len() as u64;
    ensure!(
        cold.mean.as_nanos() - warm.mean.as_nanos() == missing * (image * 1e9).round() as u64,
        "cold cache added {} ns for {missing} images",
        cold.mean.as_nanos() - warm.mean.as_nanos()
    );
    Ok(format!(
        "warm mean {:.6} ms equals the schedule; +{:.1} s for one cold image; +{:.1} s for {missing}",
        warm.mean_ms(),
        (one.mean_ms() - warm.mean_ms()) / 1e3,
        (cold.mean_ms() - warm.mean_ms()) / 1e3
    ))
}
