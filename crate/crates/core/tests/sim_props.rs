use std::net::Ipv4Addr;

use proptest::prelude::*;

use flatproxy::config::{minimal_config, EndpointConfig};
use flatproxy::sim::{
    cost_model, open_loop_arrivals, run_functional, run_sim, work_conservation_violation, CostModel, FunctionalSpec,
    Jitter, Mode, Placement, SimLayer, Stage, Topology, TraceKind, Workload,
};

fn any_mode() -> impl Strategy<Value = Mode> {
    prop::sample::select(Mode::ALL.to_vec())
}

fn any_layer() -> impl Strategy<Value = SimLayer> {
    prop::sample::select(vec![SimLayer::L4, SimLayer::L7])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stations_never_idle_with_waiting_work(
        mode in any_mode(),
        layer in any_layer(),
        rate in 1_000.0f64..400_000.0,
        conns in 1usize..40,
        cores in 1usize..3,
        hops in 1usize..3,
        jitter in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let topo = Topology {
            cores,
            hops,
            jitter: jitter.then(Jitter::default),
            record_trace: true,
            ..Topology::default()
        };
        let wl = Workload::open(rate, conns, 2_000_000, seed);
        let r = run_sim(mode, &cost_model(mode, layer), &wl, &topo);
        prop_assert_eq!(work_conservation_violation(&r), None);
        // Every enqueued job either starts or is dropped, and every start finishes.
        let count = |k: TraceKind| r.trace.iter().filter(|e| e.kind == k).count();
        prop_assert_eq!(count(TraceKind::Enqueue), count(TraceKind::Start) + count(TraceKind::Drop));
        prop_assert_eq!(count(TraceKind::Start), count(TraceKind::Finish));
        prop_assert!(r.trace.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn same_seed_same_metrics(
        mode in any_mode(),
        layer in any_layer(),
        rate in 1_000.0f64..300_000.0,
        seed in any::<u64>(),
    ) {
        let topo = Topology { jitter: Some(Jitter::default()), hops: 2, ..Topology::default() };
        let wl = Workload::open(rate, 16, 2_000_000, seed);
        let model = cost_model(mode, layer);
        let a = run_sim(mode, &model, &wl, &topo);
        let b = run_sim(mode, &model, &wl, &topo);
        prop_assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn histogram_and_percentiles(
        mode in any_mode(),
        layer in any_layer(),
        rate in 1_000.0f64..400_000.0,
        seed in any::<u64>(),
    ) {
        let wl = Workload::open(rate, 16, 2_000_000, seed);
        let m = run_sim(mode, &cost_model(mode, layer), &wl, &Topology::default()).metrics;
        prop_assert_eq!(m.histogram.count(), m.delivered);
        prop_assert!(m.p50_ns <= m.p99_ns);
        prop_assert_eq!(m.offered, m.delivered + m.loss);
        if m.delivered > 0 {
            // Nothing beats the unloaded stage sum.
            prop_assert!(m.p50_ns >= cost_model(mode, layer).total_ns);
        }
    }

    #[test]
    fn arrivals_are_reproducible(rate in 10.0f64..1e6, seed in any::<u64>(), conns in 1usize..64) {
        let wl = Workload::open(rate, conns, 1_000_000, seed);
        let a = open_loop_arrivals(&wl);
        prop_assert_eq!(&a, &open_loop_arrivals(&wl));
        prop_assert_eq!(a[0].0, 0);
        prop_assert!(a.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert!(a.iter().all(|x| x.1 < conns));
    }
}

#[test]
fn closed_loop_obeys_littles_law() {
    for mode in Mode::ALL {
        for layer in [SimLayer::L4, SimLayer::L7] {
            for concurrency in [1usize, 4, 32] {
                let wl = Workload::closed(concurrency, 16, 20_000_000, 11);
                let m = run_sim(mode, &cost_model(mode, layer), &wl, &Topology::default()).metrics;
                assert_eq!(m.loss, 0);
                let little = m.responses_per_s * m.mean_ns / 1e9;
                let err = (little - concurrency as f64).abs() / concurrency as f64;
                assert!(err < 0.05, "{mode}/{layer:?} c={concurrency}: X*W = {little:.3}");
            }
        }
    }
}

#[test]
fn single_station_matches_md1_formula() {
    // Poisson arrivals into one deterministic server: W = S + rho*S / (2(1 - rho)).
    let s = 1_000u64;
    let model = CostModel::new(
        Mode::Flatproxy,
        SimLayer::L4,
        vec![Stage {
            name: "only".into(),
            service_ns: s,
            placement: Placement::Nic,
        }],
    );
    for rho in [0.3, 0.5, 0.7] {
        let rate = rho * 1e9 / s as f64;
        let wl = Workload::open(rate, 16, 300_000_000, 21);
        let m = run_sim(Mode::Flatproxy, &model, &wl, &Topology::default()).metrics;
        let want = s as f64 * (1.0 + rho / (2.0 * (1.0 - rho)));
        let err = (m.mean_ns - want).abs() / want;
        assert!(err < 0.03, "rho {rho}: mean {:.1} vs {want:.1}", m.mean_ns);
    }
}

#[test]
fn worker_count_does_not_matter_at_low_load() {
    let model = cost_model(Mode::Flatproxy, SimLayer::L7);
    // Low enough that no two requests overlap in the worker stages.
    let wl = Workload::open(100.0, 16, 500_000_000, 4);
    let run = |n| {
        let topo = Topology {
            n_workers: n,
            ..Topology::default()
        };
        run_sim(Mode::Flatproxy, &model, &wl, &topo).metrics
    };
    let (one, eight) = (run(1), run(8));
    assert_eq!(one.latencies, eight.latencies);
    assert!(one.latencies.iter().all(|&l| l == 17_600));
}

#[test]
fn host_modes_queue_behind_cores() {
    // Doubling cores raises envoy saturation throughput; the NIC-bound mode does not care.
    let run = |mode, cores| {
        let topo = Topology {
            cores,
            ..Topology::default()
        };
        let wl = Workload::open(400_000.0, 16, 20_000_000, 2);
        run_sim(mode, &cost_model(mode, SimLayer::L4), &wl, &topo).metrics.responses_per_s
    };
    assert!(run(Mode::Envoy, 2) > 1.8 * run(Mode::Envoy, 1));
    assert_eq!(run(Mode::Flatproxy, 1), run(Mode::Flatproxy, 2));
}

#[test]
fn jitter_orders_host_modes_above_flatproxy() {
    let topo = Topology {
        jitter: Some(Jitter::default()),
        ..Topology::default()
    };
    let wl = Workload::open(1_000.0, 16, 50_000_000, 9);
    let rel = |mode| {
        let m = run_sim(mode, &cost_model(mode, SimLayer::L4), &wl, &topo).metrics;
        m.jitter_ns / m.mean_ns
    };
    let fp = rel(Mode::Flatproxy);
    assert!(fp > 0.0);
    assert!(rel(Mode::Envoy) > 2.0 * fp);
}

fn four_endpoint_config() -> flatproxy::config::MeshConfig {
    let mut cfg = minimal_config(Ipv4Addr::new(10, 0, 0, 2), 8080, (Ipv4Addr::new(10, 1, 0, 1), 9000));
    cfg.clusters[0].endpoints = (0..4)
        .map(|i| EndpointConfig {
            id: Some(format!("e{i}")),
            address: Ipv4Addr::new(10, 1, 0, 1 + i),
            port: 9000,
            weight: 1,
            healthy: true,
        })
        .collect();
    cfg
}

#[test]
fn timed_round_robin_matches_untimed_counts() {
    // Oracle: a cursor over four endpoints, one pick per new connection.
    let mut expect = std::collections::BTreeMap::new();
    for i in 0..100 {
        *expect.entry(format!("e{}", i % 4)).or_insert(0u64) += 1;
    }
    let spec = FunctionalSpec {
        workload: Workload::open(50_000.0, 8, 1_000_000_000, 3),
        paths: vec!["/".into()],
        target: None,
        max_requests: Some(100),
    };
    let rep = run_functional(&four_endpoint_config(), &spec, &Topology::default()).unwrap();
    assert_eq!(rep.log.len(), 100);
    assert!(rep.log.iter().all(|e| e.outcome == "deliver"), "{:?}", rep.log[0]);
    assert_eq!(rep.endpoint_counts(), expect);
    assert_eq!(rep.metrics.delivered, 100);
}

#[test]
fn misconfigured_listener_drops_everything() {
    let spec = FunctionalSpec {
        workload: Workload::open(10_000.0, 4, 1_000_000_000, 3),
        paths: vec!["/".into()],
        target: Some((Ipv4Addr::new(10, 0, 0, 2), 8081)),
        max_requests: Some(50),
    };
    let rep = run_functional(&four_endpoint_config(), &spec, &Topology::default()).unwrap();
    assert_eq!(rep.log.len(), 50);
    assert!(rep.log.iter().all(|e| e.outcome == "drop:no_listener"), "{:?}", rep.log[0]);
    assert_eq!(rep.metrics.delivered, 0);
    assert!(rep.metrics.latencies.is_empty());
}

#[test]
fn functional_runs_repeat_exactly() {
    let spec = FunctionalSpec {
        workload: Workload::open(20_000.0, 4, 1_000_000_000, 5),
        paths: vec!["/".into(), "/nope".into()],
        target: None,
        max_requests: Some(60),
    };
    let cfg = four_endpoint_config();
    let a = run_functional(&cfg, &spec, &Topology::default()).unwrap();
    let b = run_functional(&cfg, &spec, &Topology::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.iter().filter(|e| e.outcome == "respond:404").count(), 30);
}
