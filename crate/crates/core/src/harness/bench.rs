//! Benchmark drivers: closed-loop request series, retrieval comparison and
//! slice preparation timing.

use super::config::{Mode, ScenarioConfig, WorkloadConfig, WorkloadOp};
use super::report::{summarize, LatencySample, Summary};
use super::testbed::{ServiceOutcome, Testbed};
use super::HarnessError;
use crate::netsim::Topology;
use crate::node::NodeId;
use crate::registry::VersionSelector;
use crate::resource::{NewResource, RequestPrimitive, ResourcePath};
use crate::time::SimDuration;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRun {
    pub samples: Vec<LatencySample>,
    pub summaries: Vec<Summary>,
}

impl BenchmarkRun {
    pub fn summary(&self, mode: Mode) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalComparison {
    pub run: BenchmarkRun,
    pub cloud: Summary,
    pub edge: Summary,
    /// Cloud mean over edge mean.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparationRun {
    pub samples: Vec<LatencySample>,
    pub outcomes: Vec<ServiceOutcome>,
    pub mean: SimDuration,
}

impl PreparationRun {
    pub fn mean_ms(&self) -> f64 {
        self.mean.as_millis_f64()
    }
}

fn workload(config: &ScenarioConfig) -> Result<&WorkloadConfig, HarnessError> {
    config.workload.as_ref().ok_or_else(|| {
        HarnessError::ConfigInvalid(format!("scenario {} declares no workload", config.name))
    })
}

/// Where the data-plane requests of a mode go: the cloud path itself, or
/// its imported counterpart on the serving edge.
fn target_for(
    tb: &Testbed,
    mode: Mode,
    path: &ResourcePath,
    outcome: Option<&ServiceOutcome>,
) -> Result<(NodeId, ResourcePath), HarnessError> {
    match mode {
        Mode::Cloud => Ok((tb.cloud_node().clone(), path.clone())),
        Mode::Edge => {
            let outcome = outcome.expect("edge mode has a service outcome");
            let edge = outcome
                .edge
                .clone()
                .ok_or_else(|| HarnessError::Scenario("service request named no edge".into()))?;
            let rebased = tb
                .sync()
                .bindings()
                .filter(|b| b.edge == edge)
                .find_map(|b| path.rebase(&b.cloud_mirror_root, &b.edge_root));
            let label = tb
                .edge(&edge)
                .map(|w| w.tree().cse_label().to_owned())
                .unwrap_or_default();
            Ok((edge, rebased.unwrap_or_else(|| path.with_cse_label(&label))))
        }
    }
}

/// Runs the configured request series once per mode on a fresh testbed.
/// Each request is emitted when the previous response arrives.
pub fn run_benchmark(
    config: &ScenarioConfig,
    op: WorkloadOp,
    modes: &[Mode],
) -> Result<BenchmarkRun, HarnessError> {
    config.validate()?;
    if op == WorkloadOp::Prepare {
        let w = workload(config)?;
        let prep = run_preparation_timing(config, w.requests)?;
        let summaries = summarize(&prep.samples);
        return Ok(BenchmarkRun {
            samples: prep.samples,
            summaries,
        });
    }
    let w = workload(config)?.clone();
    let svc = config
        .service(&w.service)
        .ok_or_else(|| HarnessError::ConfigInvalid(format!("unknown service {}", w.service)))?
        .clone();
    let payload_len = config.messages.payload_bytes as usize;
    let mut samples = Vec::new();
    for &mode in modes {
        let mut tb = Testbed::new(config)?;
        let outcome = match mode {
            Mode::Edge => {
                let o = tb.service_request(&svc.id)?;
                if !o.ok {
                    return Err(HarnessError::Scenario(format!(
                        "service request failed: {}",
                        o.detail
                    )));
                }
                Some(o)
            }
            Mode::Cloud => None,
        };
        let (target, path) = target_for(&tb, mode, &w.path, outcome.as_ref())?;
        for i in 0..w.requests {
            let req = match op {
                WorkloadOp::Create => {
                    let mut content = format!("{}-{i}", mode.as_str()).into_bytes();
                    content.resize(payload_len, b' ');
                    RequestPrimitive::create(
                        path.clone(),
                        svc.device.as_str(),
                        "",
                        NewResource::content_instance(content),
                    )
                }
                _ => RequestPrimitive::retrieve(path.latest(), svc.device.as_str(), ""),
            };
            let done = tb.request(&svc.device, &target, req)?;
            if !done.response.status.is_success() {
                return Err(HarnessError::Scenario(format!(
                    "{} request {i} to {target} failed with {:?}",
                    op.as_str(),
                    done.response.status
                )));
            }
            samples.push(LatencySample {
                scenario: config.name.clone(),
                mode,
                operation: op,
                request_index: i,
                rtt: done.rtt(),
            });
        }
    }
    let summaries = summarize(&samples);
    Ok(BenchmarkRun { samples, summaries })
}

/// Latest-instance retrieval in both modes.
pub fn run_retrieval_comparison(
    config: &ScenarioConfig,
) -> Result<RetrievalComparison, HarnessError> {
    let run = run_benchmark(config, WorkloadOp::Retrieve, &[Mode::Cloud, Mode::Edge])?;
    let cloud = run.summary(Mode::Cloud).expect("cloud samples").clone();
    let edge = run.summary(Mode::Edge).expect("edge samples").clone();
    let ratio = cloud.mean_ms / edge.mean_ms;
    Ok(RetrievalComparison {
        run,
        cloud,
        edge,
        ratio,
    })
}

/// Times the service request of the workload's service, once per
/// repetition, each on a fresh testbed seeded with `seed + rep`.
pub fn run_preparation_timing(
    config: &ScenarioConfig,
    repetitions: usize,
) -> Result<PreparationRun, HarnessError> {
    config.validate()?;
    if repetitions == 0 {
        return Err(HarnessError::ConfigInvalid(
            "at least one repetition is required".into(),
        ));
    }
    let service = prepared_service(config)?;
    let mut samples = Vec::new();
    let mut outcomes = Vec::new();
    let mut total: u128 = 0;
    for rep in 0..repetitions {
        let mut tb = Testbed::with_seed(config, config.seed.wrapping_add(rep as u64))?;
        let o = tb.service_request(&service)?;
        if !o.ok {
            return Err(HarnessError::Scenario(format!(
                "service request failed: {}",
                o.detail
            )));
        }
        let prep = o.preparation_time().ok_or_else(|| {
            HarnessError::Scenario("preparation did not include an offload".into())
        })?;
        total += prep.as_nanos() as u128;
        samples.push(LatencySample {
            scenario: config.name.clone(),
            mode: Mode::Edge,
            operation: WorkloadOp::Prepare,
            request_index: rep,
            rtt: prep,
        });
        outcomes.push(o);
    }
    let mean = SimDuration::from_nanos((total / repetitions as u128) as u64);
    Ok(PreparationRun {
        samples,
        outcomes,
        mean,
    })
}

fn prepared_service(config: &ScenarioConfig) -> Result<String, HarnessError> {
    config
        .workload
        .as_ref()
        .map(|w| w.service.clone())
        .or_else(|| config.services.first().map(|s| s.id.clone()))
        .ok_or_else(|| HarnessError::ConfigInvalid("no service to prepare".into()))
}

/// Zero-jitter one-way time of a message along the routed path.
fn one_way(
    topology: &Topology,
    config: &ScenarioConfig,
    from: &NodeId,
    to: &NodeId,
    size: u64,
) -> Result<SimDuration, HarnessError> {
    let hops = topology
        .shortest_path(from, to)
        .ok_or_else(|| HarnessError::ConfigInvalid(format!("no route {from} -> {to}")))?;
    let mut total = SimDuration::ZERO;
    for (i, w) in hops.windows(2).enumerate() {
        if i > 0 {
            total += SimDuration::from_millis_f64(config.processing_for(&w[0]).relay_ms);
        }
        let link = topology.link(&w[0], &w[1]).expect("route uses links");
        total += link.delay() + SimDuration::transfer(size, link.bandwidth_bytes_per_s);
    }
    Ok(total)
}

/// Preparation time predicted by the control-plane schedule on a fresh
/// deployment with zero jitter: the service request forwarded to the
/// cloud, the instantiate order, image pulls and starts, the ready reply
/// and the task bundle transfer.
pub fn closed_form_preparation(config: &ScenarioConfig) -> Result<SimDuration, HarnessError> {
    config.validate()?;
    let service_id = prepared_service(config)?;
    let svc = config.service(&service_id).expect("validated service");
    let topology = config.topology()?;
    let tb = Testbed::new(config)?;
    let gateway = tb.gateway_of(&svc.device).ok_or_else(|| {
        HarnessError::ConfigInvalid(format!("no edge reachable from {}", svc.device))
    })?;
    let edge = tb
        .orchestrator()
        .select_edge_node(&svc.device)
        .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
    let cloud = config.cloud_node().clone();
    let ctrl = config.messages.control_bytes;

    let content: u64 = svc
        .tasks
        .iter()
        .filter_map(|t| config.task(t))
        .map(|t| {
            config
                .seed_data
                .iter()
                .filter(|s| s.node == cloud && t.root.is_prefix_of(&s.path))
                .map(|s| s.instances as u64 * config.messages.payload_bytes)
                .sum::<u64>()
        })
        .sum();

    let catalogue = config.catalogue()?;
    let start_delay = SimDuration::from_millis_f64(config.worker.start_delay_ms);
    let mut lifecycle = SimDuration::ZERO;
    for f in &svc.functions {
        let image = catalogue
            .lookup_image(*f, VersionSelector::Latest)
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let warm = config.registry.preseed && !config.registry.cold_functions.contains(f);
        if !warm {
            lifecycle += SimDuration::from_secs_f64(
                image.size_bytes as f64 / config.registry.pull_bandwidth_bytes_per_s,
            );
        }
        lifecycle += start_delay;
    }

    Ok(one_way(&topology, config, &gateway, &cloud, ctrl)?
        + one_way(&topology, config, &cloud, &edge, ctrl)?
        + lifecycle
        + one_way(&topology, config, &edge, &cloud, ctrl)?
        + one_way(&topology, config, &cloud, &edge, ctrl + content)?)
}

/// Runs whatever workload a scenario file declares over its configured
/// modes.
pub fn run_scenario(config: &ScenarioConfig) -> Result<BenchmarkRun, HarnessError> {
    let w = workload(config)?;
    run_benchmark(config, w.operation, &w.modes.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_create_means_are_close() {
        let run = run_benchmark(
            &ScenarioConfig::paper_calibrated(),
            WorkloadOp::Create,
            &[Mode::Cloud, Mode::Edge],
        )
        .unwrap();
        assert_eq!(run.samples.len(), 120);
        let cloud = run.summary(Mode::Cloud).unwrap().mean_ms;
        let edge = run.summary(Mode::Edge).unwrap().mean_ms;
        assert!((cloud - 8.5).abs() < 0.425, "cloud {cloud}");
        assert!((edge - 6.1).abs() < 0.305, "edge {edge}");
    }

    #[test]
    fn zero_everything_gives_zero_rtt() {
        let mut c = ScenarioConfig::paper_calibrated();
        for l in &mut c.links {
            l.one_way_delay_ms = 0.0;
            l.jitter_ms = 0.0;
            l.bandwidth_bytes_per_s = 1e30;
        }
        for p in c.processing.values_mut() {
            *p = Default::default();
        }
        let run = run_benchmark(&c, WorkloadOp::Create, &[Mode::Cloud, Mode::Edge]).unwrap();
        assert!(run.samples.iter().all(|s| s.rtt == SimDuration::ZERO));
    }

    #[test]
    fn warm_preparation_matches_schedule() {
        let mut c = ScenarioConfig::paper_calibrated();
        for l in &mut c.links {
            l.jitter_ms = 0.0;
        }
        let prep = run_preparation_timing(&c, 3).unwrap();
        let expected = closed_form_preparation(&c).unwrap();
        assert!(prep.samples.iter().all(|s| s.rtt == expected));
    }
}
