//! The road-safety walkthrough: a pedestrian-warning service and a
//! car-safety service share one edge slice near a crosswalk.

use super::config::ScenarioConfig;
use super::report::format_ms;
use super::testbed::Testbed;
use super::HarnessError;
use crate::node::NodeId;
use crate::offload::{subtree_shape, SubtreeShape};
use crate::orchestrator::Decision;
use crate::resource::{NewResource, RequestPrimitive, ResourcePath, ResourceTree};

const RETRIEVES: usize = 5;
const PEDESTRIAN_UPDATES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoadReport {
    pub trace: Vec<String>,
    pub assertions: Vec<Assertion>,
    /// Edge paths after both services were prepared.
    pub edge_paths: Vec<String>,
}

impl RoadReport {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.passed)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

struct Checks(Vec<Assertion>);

impl Checks {
    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(Assertion {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        });
    }
}

fn path(text: &str) -> ResourcePath {
    text.parse().expect("literal path")
}

fn shape(tree: &ResourceTree, p: &ResourcePath) -> Option<SubtreeShape> {
    subtree_shape(tree, p)
}

fn all_paths(tree: &ResourceTree) -> Vec<String> {
    let mut out: Vec<String> = tree
        .resources()
        .filter_map(|r| tree.path_of(&r.id))
        .map(|p| p.to_string())
        .collect();
    out.sort();
    out
}

/// Runs the walkthrough on the given scenario. Failed expectations are
/// reported in the returned assertions; only broken configurations are
/// errors.
pub fn run_road_scenario(config: &ScenarioConfig) -> Result<RoadReport, HarnessError> {
    let mut tb = Testbed::new(config)?;
    let mut checks = Checks(Vec::new());
    let cloud_label = config.cse.cloud.clone();
    let edge_label = config.cse.edge.clone();
    let on_cloud = |rest: &str| path(&format!("{cloud_label}/{rest}"));
    let on_edge = |rest: &str| path(&format!("{edge_label}/{rest}"));

    let pedestrian = config
        .service("pedestrian-warning")
        .ok_or_else(|| {
            HarnessError::ConfigInvalid("road scenario needs service pedestrian-warning".into())
        })?
        .clone();
    let car = config
        .service("car-safety")
        .ok_or_else(|| {
            HarnessError::ConfigInvalid("road scenario needs service car-safety".into())
        })?
        .clone();
    let edge_id: NodeId = tb
        .gateway_of(&car.device)
        .ok_or_else(|| HarnessError::ConfigInvalid("car device reaches no edge".into()))?;

    let edge_tree = tb.edge(&edge_id).expect("gateway edge").tree();
    let citizen_b = on_edge("Pedestrians/CitizenB/location");
    checks.check(
        "citizen_b_before_offload",
        edge_tree.retrieve(&citizen_b).is_ok(),
        format!("{citizen_b} present on the edge"),
    );
    checks.check(
        "car_a_absent_before_offload",
        edge_tree.retrieve(&on_edge("Cars/CarA")).is_err(),
        "edge holds no Cars/CarA yet",
    );
    let cloud_citizen_a = shape(tb.cloud().tree(), &on_cloud("Pedestrians/CitizenA"));
    let cloud_car_a = shape(tb.cloud().tree(), &on_cloud("Cars/CarA"));

    let first = tb.service_request(&pedestrian.id)?;
    checks.check(
        "pedestrian_service_instantiates",
        first.ok && first.decision == Some(Decision::InstantiateThenOffload),
        format!("{:?} {}", first.decision, first.detail),
    );
    let starts_after_first = tb.orchestrator().start_calls().len();

    let second = tb.service_request(&car.id)?;
    checks.check(
        "car_service_fast_path",
        second.ok
            && second.decision == Some(Decision::FastPathOffloadOnly)
            && tb.orchestrator().start_calls().len() == starts_after_first,
        format!(
            "{:?}, {} new function starts",
            second.decision,
            tb.orchestrator().start_calls().len() - starts_after_first
        ),
    );

    let edge_tree = tb.edge(&edge_id).expect("gateway edge").tree();
    let edge_paths = all_paths(edge_tree);
    for rest in ["Cars/CarA", "Pedestrians/CitizenA", "Pedestrians/CitizenB"] {
        let p = on_edge(rest);
        checks.check(
            &format!("edge_has_{}", rest.replace('/', "_")),
            edge_tree.retrieve(&p).is_ok(),
            p.to_string(),
        );
    }
    checks.check(
        "citizen_a_isomorphic",
        cloud_citizen_a.is_some()
            && shape(edge_tree, &on_edge("Pedestrians/CitizenA")) == cloud_citizen_a,
        "edge Pedestrians/CitizenA matches its cloud source",
    );
    checks.check(
        "car_a_isomorphic",
        cloud_car_a.is_some() && shape(edge_tree, &on_edge("Cars/CarA")) == cloud_car_a,
        "edge Cars/CarA matches its cloud source",
    );

    let cloud_id = tb.cloud_node().clone();
    let mut slower = Vec::new();
    let mut mismatched = Vec::new();
    for i in 0..RETRIEVES {
        let via_cloud = tb.request(
            &car.device,
            &cloud_id,
            RequestPrimitive::retrieve(
                on_cloud("Cars/CarA/location").latest(),
                car.device.as_str(),
                "",
            ),
        )?;
        let direct = tb.request(
            &car.device,
            &edge_id,
            RequestPrimitive::retrieve(
                on_edge("Cars/CarA/location").latest(),
                car.device.as_str(),
                "",
            ),
        )?;
        if direct.rtt() >= via_cloud.rtt() {
            slower.push(format!(
                "#{i}: edge {} vs cloud {}",
                format_ms(direct.rtt()),
                format_ms(via_cloud.rtt())
            ));
        }
        if direct.response.content != via_cloud.response.content
            || !direct.response.status.is_success()
        {
            mismatched.push(i);
        }
    }
    checks.check(
        "edge_retrieve_faster_every_index",
        slower.is_empty(),
        if slower.is_empty() {
            format!("{RETRIEVES} retrieves")
        } else {
            slower.join("; ")
        },
    );
    checks.check(
        "redirected_retrieve_matches_edge",
        mismatched.is_empty(),
        format!("mismatched indices {mismatched:?}"),
    );

    for i in 0..PEDESTRIAN_UPDATES {
        tb.request(
            &pedestrian.device,
            &edge_id,
            RequestPrimitive::create(
                on_edge("Pedestrians/CitizenA/location"),
                pedestrian.device.as_str(),
                "",
                NewResource::content_instance(format!("crosswalk position {i}")),
            ),
        )?;
    }
    for i in 0..2 {
        tb.request(
            &car.device,
            &edge_id,
            RequestPrimitive::create(
                on_edge("Cars/CarA/location"),
                car.device.as_str(),
                "",
                NewResource::content_instance(format!("lane position {i}")),
            ),
        )?;
    }
    tb.run_until_idle();
    let edge_tree = tb.edge(&edge_id).expect("gateway edge").tree();
    let edge_citizen_a = shape(edge_tree, &on_edge("Pedestrians/CitizenA"));
    let edge_car_a = shape(edge_tree, &on_edge("Cars/CarA"));
    checks.check(
        "eager_mirror_converged",
        edge_citizen_a.is_some()
            && shape(tb.cloud().tree(), &on_cloud("Pedestrians/CitizenA")) == edge_citizen_a,
        "cloud Pedestrians/CitizenA equals the edge after quiescence",
    );
    checks.check(
        "lazy_source_untouched_before_finalize",
        shape(tb.cloud().tree(), &on_cloud("Cars/CarA")) == cloud_car_a,
        "cloud Cars/CarA unchanged while lazily bound",
    );

    let slice = second
        .slice_id
        .clone()
        .ok_or_else(|| HarnessError::Scenario("no slice id".into()))?;
    let report = tb.terminate_slice(&slice)?;
    checks.check(
        "lazy_finalize_converged",
        edge_car_a.is_some() && shape(tb.cloud().tree(), &on_cloud("Cars/CarA")) == edge_car_a,
        format!("{} resources synchronized", report.synced_resources),
    );
    checks.check(
        "eager_finalize_noop",
        shape(tb.cloud().tree(), &on_cloud("Pedestrians/CitizenA")) == edge_citizen_a,
        "cloud Pedestrians/CitizenA still equals the final edge state",
    );

    let trace = tb
        .log()
        .iter()
        .map(|l| {
            format!(
                "{:>12} {}",
                format_ms(l.at.since(Default::default())),
                l.text
            )
        })
        .collect();
    Ok(RoadReport {
        trace,
        assertions: checks.0,
        edge_paths,
    })
}
