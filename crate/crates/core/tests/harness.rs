use std::collections::BTreeMap;

use sdqkd::document::to_document;
use sdqkd::harness::{
    load_scenario, madrid_scenario, run, Action, LogEvent, MetricsReport, RelayMode, Scenario, Simulation,
    WorkloadItem, VIRTUAL_LINK_ID,
};
use sdqkd::model::LinkKind;

fn no_workload() -> Scenario {
    Scenario {
        workload: vec![],
        ..madrid_scenario()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn madrid_without_workload_generates_rate_times_duty_times_time() {
    let report = run(&no_workload()).unwrap();
    for (id, want) in [("almagro-norte", 350_000.0), ("almagro-concepcion", 100_000.0)] {
        let m = report.link(id).unwrap();
        assert!(rel(m.generated_bits as f64, want) < 0.01, "{id}: {}", m.generated_bits);
        assert_eq!(m.active_time_s, 10.0);
        let observed = m.observed_rate_bps.unwrap();
        assert!(rel(observed, m.generated_bits as f64 / m.active_time_s) < 0.01);
        for c in m.endpoints_counters.values() {
            assert!(c.is_conserved());
            assert_eq!(c.available_bits, c.generated_bits);
        }
    }
    assert_eq!(report.classical_links.len(), 1);
    assert!((report.classical_links[0].loss_db - 7.0).abs() < 1e-9);
}

#[test]
fn zero_duration_reports_nothing() {
    let s = Scenario {
        duration_s: 0.0,
        seed: 11,
        ..madrid_scenario()
    };
    assert_eq!(run(&s).unwrap(), MetricsReport::empty(11));
}

#[test]
fn madrid_document_round_trips_through_the_loader() {
    let s = madrid_scenario();
    let text = to_document(&s);
    assert_eq!(load_scenario(&text).unwrap(), s);
}

#[test]
fn loader_names_unknown_fields_and_bad_references() {
    let mut doc: serde_json::Value = serde_json::from_str(&to_document(&madrid_scenario())).unwrap();
    doc["links"][0]["colour"] = "blue".into();
    let e = load_scenario(&doc.to_string()).unwrap_err();
    assert_eq!(e.code(), "schema_violation");
    let msg = e.to_string();
    assert!(msg.contains("colour") && msg.contains("links[0]"), "{msg}");

    let mut s = madrid_scenario();
    s.links[1].b.node_id = "retiro".into();
    let e = load_scenario(&to_document(&s)).unwrap_err();
    assert_eq!(e.code(), "invalid_scenario");
    assert!(e.to_string().contains("links[1].b.node_id"), "{e}");
}

#[test]
fn counters_are_rederivable_from_the_log() {
    let mut sim = Simulation::new(madrid_scenario()).unwrap();
    let report = sim.run().unwrap();
    let log = sim.network().log();

    let mut ingested: BTreeMap<&str, u64> = BTreeMap::new();
    let mut relayed_into: BTreeMap<&str, u64> = BTreeMap::new();
    let mut hop_spend: BTreeMap<&str, u64> = BTreeMap::new();
    let mut drawn: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    let mut session_link: BTreeMap<&str, &str> = BTreeMap::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for e in log {
        *counts.entry(e.event.name().to_string()).or_default() += 1;
        match &e.event {
            LogEvent::Ingest { link_id, bits, .. } => *ingested.entry(link_id).or_default() += bits,
            LogEvent::Relay {
                link_id,
                bits,
                per_hop_consumed_bits,
            } => {
                *relayed_into.entry(link_id).or_default() += bits;
                for (hop, b) in per_hop_consumed_bits {
                    *hop_spend.entry(hop).or_default() += b;
                }
            }
            LogEvent::SessionOpened { session_id, link_id } => {
                session_link.insert(session_id, link_id);
            }
            LogEvent::KeysDelivered {
                session_id,
                node_id,
                bits,
                ..
            } => *drawn.entry((session_link[session_id.as_str()], node_id)).or_default() += bits,
            _ => {}
        }
    }
    assert_eq!(counts, report.events);

    for m in &report.links {
        let id = m.link_id.as_str();
        match m.kind {
            LinkKind::Physical => {
                assert_eq!(m.generated_bits, ingested[id], "{id}");
                for c in m.endpoints_counters.values() {
                    assert_eq!(c.consumed_bits, hop_spend.get(id).copied().unwrap_or(0), "{id}");
                }
            }
            LinkKind::Virtual => {
                assert_eq!(m.generated_bits, relayed_into[id], "{id}");
                for (node, c) in &m.endpoints_counters {
                    assert_eq!(c.consumed_bits, drawn[&(id, node.as_str())], "{id}@{node}");
                }
            }
        }
    }
    assert_eq!(report.relays.len() as u64, counts["relay"]);
}

#[test]
fn causes_precede_effects_in_the_log() {
    let mut sim = Simulation::new(madrid_scenario()).unwrap();
    sim.run().unwrap();
    let log = sim.network().log();
    assert!(log.windows(2).all(|w| w[0].time_us <= w[1].time_us));
    let at = |pred: &dyn Fn(&LogEvent) -> bool| log.iter().position(|e| pred(&e.event));
    for (i, e) in log.iter().enumerate() {
        if let LogEvent::Response { directive_id, .. } = &e.event {
            let d = at(&|ev| matches!(ev, LogEvent::Directive { directive_id: d, .. } if d == directive_id)).unwrap();
            assert!(d < i, "{directive_id} answered before it was sent");
        }
    }
    let last_ack = log.iter().rposition(|e| matches!(e.event, LogEvent::Response { ack: true, .. } if e.time_us == 0)).unwrap();
    let first_ingest = at(&|ev| matches!(ev, LogEvent::Ingest { .. })).unwrap();
    assert!(last_ack < first_ingest);
    let relay = at(&|ev| matches!(ev, LogEvent::Relay { .. })).unwrap();
    let opened = at(&|ev| matches!(ev, LogEvent::SessionOpened { .. })).unwrap();
    assert!(relay < opened);
}

#[test]
fn workload_errors_are_logged_and_the_run_continues() {
    let mut s = madrid_scenario();
    s.workload.insert(
        0,
        WorkloadItem {
            at_s: 0.2,
            action: Action::RelayKey {
                link_id: "nowhere".into(),
                bits: 256,
            },
        },
    );
    let mut sim = Simulation::new(s).unwrap();
    let report = sim.run().unwrap();
    let errors: Vec<_> = sim
        .network()
        .log()
        .iter()
        .filter_map(|e| match &e.event {
            LogEvent::Error { context, code, .. } => Some((e.time_us, context.clone(), code.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(errors, vec![(200_000, "relay_key".to_string(), "unknown_link".to_string())]);
    assert_eq!(report.relays.len(), 1);
}

#[test]
fn get_key_on_a_virtual_link_relays_on_demand() {
    let mut s = madrid_scenario();
    s.workload.retain(|w| !matches!(w.action, Action::RelayKey { .. }));
    assert_eq!(s.relay_mode, RelayMode::OnDemand);
    let report = run(&s).unwrap();
    assert_eq!(report.relays.len(), 1);
    assert_eq!(report.relays[0].delivered_bits, 256);
    let vl = report.link(VIRTUAL_LINK_ID).unwrap();
    assert_eq!(vl.generated_bits, 256);
    assert!(vl.endpoints_counters.values().all(|c| c.consumed_bits == 256));
}

#[test]
fn pre_provisioning_keeps_the_virtual_link_stocked() {
    let mut s = madrid_scenario();
    s.relay_mode = RelayMode::PreProvision { target_bits: 2048 };
    s.workload.retain(|w| !matches!(w.action, Action::RelayKey { .. } | Action::GetKey { .. }));
    let report = run(&s).unwrap();
    let vl = report.link(VIRTUAL_LINK_ID).unwrap();
    for c in vl.endpoints_counters.values() {
        assert_eq!(c.available_bits, 2048);
    }
    let spent: u64 = report.relays.iter().map(|r| r.per_hop_consumed_bits["almagro-norte"]).sum();
    assert_eq!(spent, 2048);
}

#[test]
fn seeds_fix_the_key_bytes() {
    let key_bytes = |seed: u64| {
        let mut sim = Simulation::new(Scenario {
            seed,
            ..madrid_scenario()
        })
        .unwrap();
        sim.run().unwrap();
        let norte = sim.network().agent("norte").unwrap().lkms();
        norte.delivered().map(|k| k.bytes.clone()).collect::<Vec<_>>()
    };
    assert_eq!(key_bytes(3), key_bytes(3));
    assert_ne!(key_bytes(3), key_bytes(4));
    assert_eq!(key_bytes(3).len(), 1);
}
