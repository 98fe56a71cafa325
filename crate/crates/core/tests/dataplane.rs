use std::net::Ipv4Addr;
use std::sync::Arc;

use proptest::prelude::*;

use flatproxy::config::{minimal_config, ListenerConfig, MeshConfig};
use flatproxy::dataplane::{Completion, Dataplane};
use flatproxy::http;
use flatproxy::l7::{FilterDecision, FilterRule};
use flatproxy::model::{DropReason, FlowKey, Proto, TrafficUnit, Verdict};
use flatproxy::vq::{LocalTransport, RingConfig, StubHandler, Transport};
use flatproxy::wire::FrameBuilder;

const DIP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

fn allow_all() -> FilterRule {
    FilterRule {
        method: None,
        host: None,
        path_prefix: None,
        source: None,
        decision: FilterDecision::Allow,
    }
}

fn config() -> MeshConfig {
    let mut cfg = minimal_config(DIP, 8080, (Ipv4Addr::new(10, 1, 0, 1), 9000));
    cfg.filters = vec![
        FilterRule {
            method: Some("DELETE".into()),
            ..allow_all()
        },
        allow_all(),
    ];
    cfg.filters[0].decision = FilterDecision::Deny;
    cfg.listeners.push(ListenerConfig {
        name: "raw".into(),
        dip: DIP,
        dport: 9090,
        l4_cluster: Some("svc".into()),
    });
    cfg
}

/// Echoes the request bytes back as the response body.
fn dataplane(cfg: MeshConfig) -> Dataplane {
    let echo: StubHandler = Arc::new(|_, req| http::write_response(200, &[], req));
    let t: Arc<dyn Transport> = Arc::new(LocalTransport::new(Some(echo), RingConfig::default()));
    Dataplane::new(cfg, t, 2).unwrap()
}

fn flow(sport: u16, dport: u16) -> FlowKey {
    FlowKey::new(Ipv4Addr::new(172, 16, 0, 9), sport, DIP, dport, Proto::Tcp)
}

fn send(dp: &mut Dataplane, bytes: Vec<u8>) -> Completion {
    let mut out = dp.ingress(TrafficUnit::frame(bytes));
    assert_eq!(out.len(), 1, "{out:?}");
    out.pop().unwrap()
}

fn reply_body(c: &Completion) -> Vec<u8> {
    http::parse_response(c.reply.as_ref().expect("a reply")).unwrap().body
}

fn assert_conserved(dp: &Dataplane) {
    let (i, o) = dp.conservation();
    assert_eq!(i, o, "{}", dp.stats_snapshot());
}

#[test]
fn one_slow_path_call_per_connection() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let fb = FrameBuilder::new(flow(40000, 8080), cfg.local_mac());
    let syn = send(&mut dp, fb.syn(100));
    assert_eq!(syn.verdict, Verdict::Held);
    assert_eq!(syn.slow_path_calls, 1);

    let r1 = http::simple_request("GET", "/", "mesh.local", b"");
    let c1 = send(&mut dp, fb.tcp(101, false, false, &r1));
    assert_eq!(c1.verdict, Verdict::Deliver);
    assert_eq!(c1.slow_path_calls, 0);
    assert_eq!(reply_body(&c1), r1);

    let r2 = http::simple_request("POST", "/", "mesh.local", b"second");
    let c2 = send(&mut dp, fb.tcp(101 + r1.len() as u32, false, false, &r2));
    assert_eq!(c2.verdict, Verdict::Deliver);
    assert_eq!(reply_body(&c2), r2);
    assert_eq!(c1.endpoint, c2.endpoint);

    assert_eq!(dp.slow.calls(), 1);
    assert_conserved(&dp);
}

#[test]
fn three_segments_out_of_order() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let fb = FrameBuilder::new(flow(40001, 8080), cfg.local_mac());
    send(&mut dp, fb.syn(0));
    let req = http::simple_request("POST", "/", "mesh.local", &[b'z'; 300]);
    let cut = [0, 100, 250, req.len()];
    let seg = |i: usize| fb.tcp(1 + cut[i] as u32, false, false, &req[cut[i]..cut[i + 1]]);
    assert_eq!(send(&mut dp, seg(2)).verdict, Verdict::Held);
    assert_eq!(send(&mut dp, seg(0)).verdict, Verdict::Held);
    let c = send(&mut dp, seg(1));
    assert_eq!(c.verdict, Verdict::Deliver);
    assert_eq!(reply_body(&c), req);
    assert_conserved(&dp);
}

#[test]
fn l4_listener_skips_l7() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let l7 = dp.l7_ids();
    let fb = FrameBuilder::new(flow(40002, 9090), cfg.local_mac());
    send(&mut dp, fb.syn(7));
    let c = send(&mut dp, fb.tcp(8, false, false, b"opaque bytes"));
    assert_eq!(c.verdict, Verdict::Deliver, "{c:?}");
    assert!(!c.reached_l7(&l7), "{:?}", c.trace);
    assert_conserved(&dp);
}

#[test]
fn foreign_mac_never_reaches_l7() {
    let cfg = config();
    let mut dp = dataplane(cfg);
    let l7 = dp.l7_ids();
    let fb = FrameBuilder::new(flow(40003, 8080), [2, 9, 9, 9, 9, 9]);
    let c = send(&mut dp, fb.syn(1));
    assert_eq!(c.disposition.as_deref(), Some("drop:not_local"));
    assert!(!c.reached_l7(&l7));
    assert_eq!(c.trace, ["vswitch"]);
    assert_conserved(&dp);
}

#[test]
fn denied_and_unrouted_requests() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let fb = FrameBuilder::new(flow(40004, 8080), cfg.local_mac());
    send(&mut dp, fb.syn(0));
    let del = http::simple_request("DELETE", "/", "mesh.local", b"");
    let c = send(&mut dp, fb.tcp(1, false, false, &del));
    assert_eq!(c.verdict, Verdict::Drop(DropReason::Filtered));
    assert!(c.reply.is_none());

    let lost = http::simple_request("GET", "/missing", "mesh.local", b"");
    let c = send(&mut dp, fb.tcp(1 + del.len() as u32, false, false, &lost));
    assert_eq!(c.status, Some(404));
    assert_eq!(c.disposition.as_deref(), Some("respond:404"));
    assert_conserved(&dp);
}

#[test]
fn data_before_syn_goes_nowhere() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let fb = FrameBuilder::new(flow(40005, 8080), cfg.local_mac());
    let req = http::simple_request("GET", "/", "mesh.local", b"");
    let c = send(&mut dp, fb.tcp(1, false, false, &req));
    assert_ne!(c.verdict, Verdict::Deliver);
    assert!(c.reply.is_none());
    assert_conserved(&dp);
}

#[test]
fn reload_keeps_serving() {
    let cfg = config();
    let mut dp = dataplane(cfg.clone());
    let before = dp.tables.rule_epoch();
    let mut next = cfg.clone();
    next.routes[0].path_matchers[0].pattern = "/v2".into();
    dp.reload(next);
    assert!(dp.tables.rule_epoch() > before);
    let fb = FrameBuilder::new(flow(40006, 8080), cfg.local_mac());
    send(&mut dp, fb.syn(0));
    let old = http::simple_request("GET", "/", "mesh.local", b"");
    assert_eq!(send(&mut dp, fb.tcp(1, false, false, &old)).status, Some(404));
    let new = http::simple_request("GET", "/v2", "mesh.local", b"");
    let c = send(&mut dp, fb.tcp(1 + old.len() as u32, false, false, &new));
    assert_eq!(c.verdict, Verdict::Deliver);
}

#[derive(Clone, Debug)]
enum Op {
    Syn(u8),
    Data(u8, u8),
    Fin(u8),
    Junk(Vec<u8>),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..6).prop_map(Op::Syn),
        (0u8..6, 0u8..4).prop_map(|(f, p)| Op::Data(f, p)),
        (0u8..6).prop_map(Op::Fin),
        prop::collection::vec(any::<u8>(), 0..80).prop_map(Op::Junk),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every unit that enters leaves exactly once.
    #[test]
    fn units_are_conserved(ops in prop::collection::vec(op(), 1..60)) {
        let cfg = config();
        let mut dp = dataplane(cfg.clone());
        let mut seq = [1u32; 6];
        let paths = ["/", "/missing", "/", "/"];
        for o in ops {
            let frame = match o {
                Op::Syn(f) => {
                    seq[f as usize] = 1;
                    FrameBuilder::new(flow(41000 + f as u16, [8080, 9090][f as usize % 2]), cfg.local_mac()).syn(0)
                }
                Op::Data(f, p) => {
                    let req = http::simple_request(if p == 3 { "DELETE" } else { "GET" }, paths[p as usize], "h", b"");
                    let fb = FrameBuilder::new(flow(41000 + f as u16, [8080, 9090][f as usize % 2]), cfg.local_mac());
                    let b = fb.tcp(seq[f as usize], false, false, &req);
                    seq[f as usize] += req.len() as u32;
                    b
                }
                Op::Fin(f) => FrameBuilder::new(flow(41000 + f as u16, [8080, 9090][f as usize % 2]), cfg.local_mac())
                    .tcp(seq[f as usize], false, true, &[]),
                Op::Junk(b) => b,
            };
            dp.ingress(TrafficUnit::frame(frame));
            let (i, o) = dp.conservation();
            prop_assert_eq!(i, o);
        }
    }
}

#[test]
fn snapshot_lists_endpoint_health() {
    let mut cfg = config();
    cfg.clusters[0].endpoints[0].healthy = false;
    let dp = dataplane(cfg);
    let eps = &dp.stats_snapshot()["endpoints"]["svc"];
    let flags: Vec<bool> = eps.as_object().unwrap().values().map(|v| v.as_bool().unwrap()).collect();
    assert_eq!(flags, [false]);
}
