mod common;

use common::{calibrated, cloud, device, edge, p, snapshot, with_sync_mode};
use edgeslice::harness::Testbed;
use edgeslice::offload::SyncMode;
use edgeslice::resource::{NewResource, RequestPrimitive};
use edgeslice::SimDuration;

#[test]
fn eager_mirror_converges_in_all_seeded_trials() {
    println!("{}", common::check_eager_convergence(100).unwrap());
}

#[test]
fn lazy_redirects_match_direct_reads_and_finalize_converges() {
    for seed in [1, 2, 3] {
        println!("{}", common::check_lazy_redirect(60, seed).unwrap());
    }
}

fn create_ci(tb: &mut Testbed, text: &str) {
    let req = RequestPrimitive::create(
        p("MN-CSE/Cars/CarA/location"),
        "device",
        "",
        NewResource::content_instance(text),
    );
    let done = tb.request(&device(), &edge(), req).unwrap();
    assert!(done.response.status.is_success());
}

#[test]
fn short_outage_is_bridged_by_retries_in_order() {
    let mut tb = Testbed::new(&calibrated()).unwrap();
    assert!(tb.service_request("car-location").unwrap().ok);
    tb.set_link_up(&edge(), &cloud(), false);
    for i in 0..5 {
        create_ci(&mut tb, &format!("during outage {i}"));
    }
    tb.advance(SimDuration::from_millis_f64(150.0));
    tb.set_link_up(&edge(), &cloud(), true);
    tb.run_until_idle();
    assert!(tb.stats().notifications_retried > 0);
    assert_eq!(tb.stats().notifications_dropped, 0);
    let edge_side = snapshot(tb.edge(&edge()).unwrap().tree(), &p("MN-CSE/Cars/CarA"));
    assert_eq!(
        edge_side,
        snapshot(tb.cloud().tree(), &p("IN-CSE/Cars/CarA"))
    );
}

#[test]
fn long_outage_drops_notifications_and_finalize_repairs_the_mirror() {
    let mut tb = Testbed::new(&calibrated()).unwrap();
    let o = tb.service_request("car-location").unwrap();
    tb.set_link_up(&edge(), &cloud(), false);
    for i in 0..3 {
        create_ci(&mut tb, &format!("lost {i}"));
    }
    tb.advance(SimDuration::from_millis_f64(5_000.0));
    tb.set_link_up(&edge(), &cloud(), true);
    tb.run_until_idle();
    assert_eq!(tb.stats().notifications_dropped, 3);
    assert_eq!(tb.sync().binding("CarA").unwrap().stats.dropped, 3);
    let edge_side = snapshot(tb.edge(&edge()).unwrap().tree(), &p("MN-CSE/Cars/CarA"));
    assert_ne!(
        edge_side,
        snapshot(tb.cloud().tree(), &p("IN-CSE/Cars/CarA"))
    );
    let report = tb.terminate_slice(&o.slice_id.unwrap()).unwrap();
    assert_eq!(report.synced_resources, 3);
    assert_eq!(
        edge_side,
        snapshot(tb.cloud().tree(), &p("IN-CSE/Cars/CarA"))
    );
}

#[test]
fn cloud_writes_into_an_offloaded_subtree_conflict() {
    let mut tb = Testbed::new(&with_sync_mode(calibrated(), SyncMode::Lazy)).unwrap();
    assert!(tb.service_request("car-location").unwrap().ok);
    let req = RequestPrimitive::create(
        p("IN-CSE/Cars/CarA/location"),
        "device",
        "",
        NewResource::content_instance("stale writer"),
    );
    let done = tb.request(&device(), &cloud(), req).unwrap();
    assert_eq!(done.response.status.code(), 4009);
    let outside =
        RequestPrimitive::create(p("IN-CSE"), "device", "", NewResource::container("Bikes"));
    assert!(tb
        .request(&device(), &cloud(), outside)
        .unwrap()
        .response
        .status
        .is_success());
}
