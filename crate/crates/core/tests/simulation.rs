use rsu_orchsim::analytics::decompose;
use rsu_orchsim::channel::NodeId;
use rsu_orchsim::scenario::ScenarioConfig;
use rsu_orchsim::sim::{first_cpm_latency, run_scenario, EventKind, EventLog, LogError};
use rsu_orchsim::v2x::{decode_cam, decode_cpm, StationId};

const SITE: &str = r#"
[[rsus]]
id = "srisu1"
station_id = 101
position = [50.787, 6.046]
hosts_v2x = true

[[rsus]]
id = "srisu2"
station_id = 102
position = [50.7872, 6.0462]
"#;

const PLAN: &str = r#"
[plan]
manager_processing_s = 1.5
sink_service = "det"

[[plan.services]]
name = "drv"
node = "srisu2"
stages = [{ label = "pod", duration_s = 4.0 }, { label = "packets", duration_s = 0.5 }]

[[plan.services]]
name = "det"
node = "srisu1"
requires = ["drv"]
stages = [{ label = "pod", duration_s = 3.0 }, { label = "first-list", duration_s = 1.0 }]
"#;

fn scenario(head: &str, vehicles: &str) -> ScenarioConfig {
    let text = format!("{head}\n[rule]\nkind = \"first_cam\"\n{PLAN}{SITE}{vehicles}");
    ScenarioConfig::from_toml_str(&text).unwrap()
}

fn approach(station: u32, start_m: f64) -> String {
    format!(
        "\n[[vehicles]]\nstation_id = {station}\nroute = {{ kind = \"approach\", bearing_deg = 0, start_distance_m = {start_m}, speed_kmh = 50, target = [50.787, 6.046] }}\n"
    )
}

fn sid(v: u32) -> StationId {
    StationId::new(v).unwrap()
}

#[test]
fn no_vehicles_no_events() {
    let cfg = scenario("end_time_s = 120", "");
    let log = run_scenario(&cfg, 1).unwrap();
    assert!(log.is_empty());
}

#[test]
fn cpm_is_causally_downstream_of_a_cam() {
    let cfg = scenario("end_time_s = 60", &approach(7, 500.0));
    let log = run_scenario(&cfg, 5).unwrap();
    assert!(log.count(EventKind::CpmDelivered) > 0);
    for ev in log.of_kind(EventKind::CpmDelivered) {
        let kinds: Vec<EventKind> = log.causal_chain(ev.seq).iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            [
                EventKind::CpmDelivered,
                EventKind::CpmBroadcast,
                EventKind::FusionDone,
                EventKind::ObjectListDelivered,
                EventKind::ObjectListSent,
                EventKind::PipelineReady,
                EventKind::ManagerDone,
                EventKind::RequestIssued,
                EventKind::CamDelivered,
                EventKind::CamGenerated,
            ]
        );
        let chain = log.causal_chain(ev.seq);
        assert!(chain.windows(2).all(|w| w[0].time_true >= w[1].time_true));
    }
    // the log is time-ordered and seq-indexed
    for (i, w) in log.events().windows(2).enumerate() {
        assert!(w[0].time_true <= w[1].time_true);
        assert_eq!(w[0].seq, i as u64);
    }
}

#[test]
fn two_lists_per_fusion_and_cpm_lists_nearby_vehicle() {
    let cfg = scenario("end_time_s = 60", &approach(7, 500.0));
    let log = run_scenario(&cfg, 5).unwrap();
    let lists = log.count(EventKind::ObjectListDelivered);
    let fusions = log.count(EventKind::FusionDone);
    assert!(fusions > 0);
    assert!(lists >= 2 * fusions && lists <= 2 * fusions + 2);
    let with_vehicle = log
        .of_kind(EventKind::CpmBroadcast)
        .filter_map(|e| decode_cpm(e.payload.as_ref().unwrap()).ok())
        .filter(|c| !c.objects().is_empty())
        .count();
    assert!(with_vehicle > 0);
}

#[test]
fn ten_km_approach_first_delivery_at_radio_range() {
    // host sits on the target, so distance to it is the remaining distance
    let mut cfg = scenario(
        "end_time_s = 700\nzero_variance = true",
        &approach(3, 10_000.0),
    );
    cfg.rsus[1].position = cfg.rsus[0].position;
    let log = run_scenario(&cfg, 1).unwrap();
    let (generated, _) = log.first_delivered_cam(sid(3)).unwrap();
    let t = generated.time_true.as_secs();
    let oracle: f64 = (10_000.0 - 800.0) / (50.0 / 3.6);
    assert!((oracle - 662.4).abs() < 1e-3);
    // CAMs go out every 100 ms, so the first one inside range is within one period
    assert!(t >= oracle - 1e-6 && t < oracle + 0.1 + 1e-6, "{t}");
    let cam = decode_cam(generated.payload.as_ref().unwrap()).unwrap();
    assert_eq!(cam.station_id, sid(3));
}

#[test]
fn never_in_range_has_no_delivered_cam() {
    let cfg = scenario("end_time_s = 60", &approach(3, 5_000.0));
    let log = run_scenario(&cfg, 1).unwrap();
    assert_eq!(log.count(EventKind::CamDelivered), 0);
    assert!(log.count(EventKind::CamGenerated) > 0);
    assert!(matches!(
        first_cpm_latency(&log, sid(3)),
        Err(LogError::NoCamDelivered(_))
    ));
    assert_eq!(log.count(EventKind::PodCreated), 0);
}

#[test]
fn all_zero_latencies_give_zero_end_to_end() {
    let zero = "{ mean_ms = 0, std_ms = 0, min_ms = 0, max_ms = 0 }";
    let head = format!(
        "end_time_s = 5\nuplink_latency_ms = 0\n[channel]\ncam_latency = {zero}\ncpm_latency = {zero}\n\
         [other_latencies]\nevent_detection_ms = 0\nobject_list_uplink_ms = 0\nfusion_processing_ms = 0\n\
         cpm_generation_ms = 0\ncpm_downlink_ms = 0\n[clocks]\nrandomize_missing = false\n"
    );
    let mut cfg = scenario(&head, &approach(4, 100.0));
    cfg.plan.manager_processing_s = 0.0;
    for svc in &mut cfg.plan.services {
        for st in &mut svc.stages {
            st.duration_s = 0.0;
        }
    }
    let log = run_scenario(&cfg, 1).unwrap();
    assert_eq!(first_cpm_latency(&log, sid(4)).unwrap(), 0.0);
    let b = decompose(&log).unwrap();
    assert_eq!(
        (
            b.end_to_end_s,
            b.manager_processing_s,
            b.deployment_s,
            b.other_s
        ),
        (0.0, 0.0, 0.0, 0.0)
    );
}

#[test]
fn deterministic_per_seed() {
    let cfg = scenario("end_time_s = 60", &approach(7, 600.0));
    let a = run_scenario(&cfg, 42).unwrap().to_jsonl_string();
    let b = run_scenario(&cfg, 42).unwrap().to_jsonl_string();
    assert_eq!(a, b);
    let c = run_scenario(&cfg, 43).unwrap().to_jsonl_string();
    assert_ne!(a, c);
    let back = EventLog::read_jsonl(a.as_bytes()).unwrap();
    assert_eq!(back.to_jsonl_string(), a);
}

#[test]
fn randomized_clocks_stay_within_skew_and_cancel_for_vehicle() {
    let cfg = scenario("end_time_s = 60\nzero_variance = true", &approach(7, 500.0));
    let clocks = cfg.resolve_clocks(9);
    let server = clocks.offsets_ms[&NodeId::server()];
    for rsu in ["srisu1", "srisu2"] {
        assert!((clocks.offsets_ms[&NodeId::new(rsu)] - server).abs() <= 20.0);
    }
    let host = clocks.offsets_ms[&NodeId::new("srisu1")];
    assert!((clocks.offsets_ms[&NodeId::vehicle(7)] - host).abs() <= 2.0);

    let mut synced = cfg.clone();
    synced.clocks.randomize_missing = false;
    let skewed = first_cpm_latency(&run_scenario(&cfg, 9).unwrap(), sid(7)).unwrap();
    let exact = first_cpm_latency(&run_scenario(&synced, 9).unwrap(), sid(7)).unwrap();
    assert!((skewed - exact).abs() < 1e-9);
}

#[test]
fn object_lists_only_while_deployed_and_redeploy_after_teardown() {
    // one vehicle passes the site and leaves; a second one arrives much later
    let vehicles = r#"
[[vehicles]]
station_id = 21
route = { kind = "waypoints", points = [
  { t_s = 0, at = [50.7880, 6.0460] },
  { t_s = 20, at = [50.7860, 6.0460] },
] }

[[vehicles]]
station_id = 22
route = { kind = "waypoints", points = [
  { t_s = 100, at = [50.7880, 6.0460] },
  { t_s = 120, at = [50.7860, 6.0460] },
] }
"#;
    let cfg = scenario("end_time_s = 200\nidle_timeout_s = 15", vehicles);
    let log = run_scenario(&cfg, 2).unwrap();
    assert_eq!(log.count(EventKind::PipelineReady), 2);
    assert_eq!(log.count(EventKind::Teardown), 2);

    let mut deployed = false;
    for ev in log.events() {
        match ev.kind {
            EventKind::PipelineReady => deployed = true,
            EventKind::Teardown => deployed = false,
            EventKind::ObjectListSent | EventKind::ObjectListDelivered | EventKind::FusionDone => {
                assert!(deployed, "{:?} at {}", ev.kind, ev.time_true)
            }
            _ => {}
        }
    }
    // teardown happens once the idle timeout has elapsed after the last CAM
    let last_cam_1 = log
        .of_kind(EventKind::CamDelivered)
        .filter(|e| decode_cam(e.payload.as_ref().unwrap()).unwrap().station_id == sid(21))
        .last()
        .unwrap()
        .time_true
        .as_secs();
    let first_teardown = log
        .of_kind(EventKind::Teardown)
        .next()
        .unwrap()
        .time_true
        .as_secs();
    assert!(first_teardown > last_cam_1 + 15.0);
    assert!(first_teardown < last_cam_1 + 15.5);
}

#[test]
fn request_during_deployment_is_absorbed() {
    let cfg = scenario(
        "end_time_s = 30",
        &format!("{}{}", approach(7, 300.0), approach(8, 350.0)),
    );
    let log = run_scenario(&cfg, 4).unwrap();
    assert_eq!(log.count(EventKind::ManagerDone), 1);
    assert_eq!(log.count(EventKind::PipelineReady), 1);
    // one pod per service
    assert_eq!(log.count(EventKind::PodCreated), 2);
    assert!(first_cpm_latency(&log, sid(8)).is_ok());
}
