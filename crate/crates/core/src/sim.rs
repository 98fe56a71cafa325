//! Discrete-event simulator: per-stage cost models, deployment models for
//! the four proxy modes, a load generator and metrics.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, MeshConfig};
use crate::dataplane::Dataplane;
use crate::http;
use crate::model::{FlowKey, Proto, TrafficUnit, Verdict};
use crate::vq::{LocalTransport, RingConfig, Transport};
use crate::wire::FrameBuilder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Envoy,
    Sockmap,
    Toe,
    Flatproxy,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Envoy, Mode::Sockmap, Mode::Toe, Mode::Flatproxy];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Envoy => "envoy",
            Mode::Sockmap => "sockmap",
            Mode::Toe => "toe",
            Mode::Flatproxy => "flatproxy",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown mode \"{s}\" (envoy, sockmap, toe, flatproxy)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimLayer {
    L4,
    L7,
}

impl SimLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            SimLayer::L4 => "l4",
            SimLayer::L7 => "l7",
        }
    }
}

impl FromStr for SimLayer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l4" => Ok(SimLayer::L4),
            "l7" => Ok(SimLayer::L7),
            _ => Err(format!("unknown layer \"{s}\" (l4, l7)")),
        }
    }
}

/// Where a stage runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Host CPU, shared by all host stages of a hop.
    Host,
    /// Dedicated hardware stage, one unit at a time.
    Nic,
    /// L7 worker chosen by connection affinity.
    Worker,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub service_ns: u64,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: Mode,
    pub layer: SimLayer,
    pub stages: Vec<Stage>,
    pub total_ns: u64,
}

impl CostModel {
    /// Stages as integer percentages of `total_ns`.
    fn from_shares(mode: Mode, layer: SimLayer, total_ns: u64, rows: &[(&str, u64, Placement)]) -> Self {
        let stages = rows
            .iter()
            .map(|&(name, pct, placement)| Stage {
                name: name.to_owned(),
                service_ns: total_ns * pct / 100,
                placement,
            })
            .collect();
        CostModel::new(mode, layer, stages)
    }

    pub fn new(mode: Mode, layer: SimLayer, stages: Vec<Stage>) -> Self {
        let total_ns = stages.iter().map(|s| s.service_ns).sum();
        CostModel {
            mode,
            layer,
            stages,
            total_ns,
        }
    }

    pub fn name(&self) -> String {
        format!("{}/{}", self.mode, self.layer.as_str())
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn host_ns(&self) -> u64 {
        self.stages
            .iter()
            .filter(|s| s.placement == Placement::Host)
            .map(|s| s.service_ns)
            .sum()
    }
}

use Placement::{Host, Nic, Worker};

fn envoy_l4() -> CostModel {
    CostModel::from_shares(
        Mode::Envoy,
        SimLayer::L4,
        22_000,
        &[
            ("vSwitch", 9, Host),
            ("TCP/IP protocol", 27, Host),
            ("TCP -> proxy", 20, Host),
            ("data processing", 7, Host),
            ("proxy -> TCP", 10, Host),
            ("loopback", 27, Host),
        ],
    )
}

fn flatproxy_l4() -> CostModel {
    CostModel::from_shares(
        Mode::Flatproxy,
        SimLayer::L4,
        7_600,
        &[
            ("OVS", 26, Nic),
            ("TOE", 1, Nic),
            ("match-action logic", 66, Nic),
            ("VQ -> service", 7, Nic),
        ],
    )
}

fn envoy_l7() -> CostModel {
    CostModel::from_shares(
        Mode::Envoy,
        SimLayer::L7,
        62_500,
        &[
            ("vSwitch", 3, Host),
            ("TCP/IP protocol", 8, Host),
            ("connection, statistical", 26, Host),
            ("D-T", 16, Host),
            ("D-I, D-P", 12, Host),
            ("D-CK, D-OP, D-M", 22, Host),
            ("D-DP", 6, Host),
            ("loopback", 7, Host),
        ],
    )
}

fn flatproxy_l7() -> CostModel {
    CostModel::from_shares(
        Mode::Flatproxy,
        SimLayer::L7,
        17_600,
        &[
            ("OVS", 11, Nic),
            ("TOE", 1, Nic),
            ("http parser", 28, Worker),
            ("match-action logic", 29, Worker),
            ("http deparser", 28, Worker),
            ("VQ -> service", 3, Nic),
        ],
    )
}

/// Envoy with the loopback hop shortened. At L7 the loopback keeps 10% of
/// its time; the L4 model is scaled to the same total ratio so both layers
/// show the same small gain.
fn sockmap(envoy: &CostModel) -> CostModel {
    let mut m = envoy.clone();
    m.mode = Mode::Sockmap;
    let l7 = envoy_l7();
    let lo7 = l7.stage("loopback").map_or(0, |s| s.service_ns);
    let target = match envoy.layer {
        SimLayer::L7 => envoy.total_ns - lo7 + lo7 / 10,
        SimLayer::L4 => {
            let t7 = l7.total_ns - lo7 + lo7 / 10;
            (envoy.total_ns * t7 + l7.total_ns / 2) / l7.total_ns
        }
    };
    let cut = envoy.total_ns - target;
    if let Some(s) = m.stages.iter_mut().find(|s| s.name == "loopback") {
        s.service_ns -= cut;
    }
    CostModel::new(Mode::Sockmap, envoy.layer, m.stages)
}

/// Envoy with vSwitch and the TCP/IP stack moved to NIC hardware, taking
/// the hardware stage times of the offloaded pipeline.
fn toe(envoy: &CostModel, flat: &CostModel) -> CostModel {
    let hw = |name: &str| flat.stage(name).map_or(0, |s| s.service_ns);
    let stages = envoy
        .stages
        .iter()
        .map(|s| match s.name.as_str() {
            "vSwitch" => Stage {
                name: "OVS".into(),
                service_ns: hw("OVS"),
                placement: Nic,
            },
            "TCP/IP protocol" => Stage {
                name: "TOE".into(),
                service_ns: hw("TOE"),
                placement: Nic,
            },
            _ => s.clone(),
        })
        .collect();
    CostModel::new(Mode::Toe, envoy.layer, stages)
}

/// Envoy and FlatProxy at both layers straight from the breakdown tables,
/// plus the derived sockmap and TOE models.
pub fn builtin_cost_models() -> Vec<CostModel> {
    let (e4, f4, e7, f7) = (envoy_l4(), flatproxy_l4(), envoy_l7(), flatproxy_l7());
    vec![
        sockmap(&e4),
        toe(&e4, &f4),
        sockmap(&e7),
        toe(&e7, &f7),
        e4,
        f4,
        e7,
        f7,
    ]
}

pub fn cost_model(mode: Mode, layer: SimLayer) -> CostModel {
    builtin_cost_models()
        .into_iter()
        .find(|m| m.mode == mode && m.layer == layer)
        .expect("every mode has a model per layer")
}

/// Looks up "mode/layer", e.g. "flatproxy/l7".
pub fn cost_model_by_name(name: &str) -> Option<CostModel> {
    let (m, l) = name.split_once('/')?;
    Some(cost_model(m.parse().ok()?, l.parse().ok()?))
}

/// Multiplicative lognormal noise with median 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub sigma: f64,
    /// Host stages use `sigma * host_multiplier`.
    pub host_multiplier: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            sigma: 0.05,
            host_multiplier: 4.0,
        }
    }
}

pub const DEFAULT_INTERFERENCE_BETA: f64 = 0.25;
/// Connections a host stack handles before per-connection overhead shows.
pub const INTERFERENCE_KNEE: usize = 16;
/// Host time to set up one connection in the offloaded mode.
pub const SLOW_PATH_CONN_NS: u64 = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub n_workers: usize,
    pub queue_depth: usize,
    /// Host cores per hop.
    pub cores: usize,
    /// Proxy hops on the request path (1: server side only, 2: both sides).
    pub hops: usize,
    pub interference_beta: f64,
    pub jitter: Option<Jitter>,
    pub slow_path_conn_ns: u64,
    pub record_trace: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            n_workers: 2,
            queue_depth: crate::fast_path::DEFAULT_RUN_QUEUE_DEPTH,
            cores: 1,
            hops: 1,
            interference_beta: DEFAULT_INTERFERENCE_BETA,
            jitter: None,
            slow_path_conn_ns: SLOW_PATH_CONN_NS,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    OpenLoop { rate_qps: f64 },
    ClosedLoop { concurrency: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub pattern: Pattern,
    pub n_connections: usize,
    pub request_bytes: u64,
    pub duration_ns: u64,
    pub seed: u64,
}

impl Workload {
    pub fn open(rate_qps: f64, n_connections: usize, duration_ns: u64, seed: u64) -> Self {
        Workload {
            pattern: Pattern::OpenLoop { rate_qps },
            n_connections,
            request_bytes: 1024,
            duration_ns,
            seed,
        }
    }

    pub fn closed(concurrency: usize, n_connections: usize, duration_ns: u64, seed: u64) -> Self {
        Workload {
            pattern: Pattern::ClosedLoop { concurrency },
            n_connections,
            request_bytes: 1024,
            duration_ns,
            seed,
        }
    }

    /// One request at t = 0.
    pub fn single() -> Self {
        Workload::open(1.0, 1, 1, 0)
    }
}

/// Latency histogram with power-of-two buckets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bucket i counts samples in [2^i, 2^(i+1)); bucket 0 also holds 0.
    pub buckets: Vec<u64>,
}

impl Histogram {
    pub fn record(&mut self, v: u64) {
        let i = if v == 0 { 0 } else { 63 - v.leading_zeros() as usize };
        if self.buckets.len() <= i {
            self.buckets.resize(i + 1, 0);
        }
        self.buckets[i] += 1;
    }

    pub fn count(&self) -> u64 {
        self.buckets.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub offered: u64,
    pub delivered: u64,
    /// Delivered by the end of the measurement window.
    pub delivered_in_window: u64,
    pub loss: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    /// Standard deviation of latency.
    pub jitter_ns: f64,
    pub throughput_bps: f64,
    pub responses_per_s: f64,
    pub cpu_cost_ns: u64,
    pub stage_busy_ns: BTreeMap<String, u64>,
    pub histogram: Histogram,
    pub unstable: bool,
    pub latencies: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    Enqueue,
    Start,
    Finish,
    Drop,
}

/// Engine event log entry, for checking scheduling properties offline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: u64,
    pub station: usize,
    pub kind: TraceKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimResult {
    pub metrics: Metrics,
    pub trace: Vec<TraceEvent>,
    /// Server count per station, indexed like `TraceEvent::station`.
    pub servers: Vec<usize>,
    pub station_names: Vec<String>,
}

#[derive(Debug)]
struct Station {
    name: String,
    servers: usize,
    busy: usize,
    host: bool,
    queue: VecDeque<Job>,
    busy_ns: u64,
}

#[derive(Clone, Copy, Debug)]
struct Job {
    req: usize,
    step: usize,
    service: u64,
}

#[derive(Clone, Debug)]
enum Target {
    Fixed(usize),
    /// First worker station of the hop.
    Workers(usize),
}

#[derive(Clone, Debug)]
struct Step {
    target: Target,
    stages: Vec<usize>,
    worker: bool,
}

#[derive(Clone, Copy, Debug)]
struct Req {
    arrival: u64,
    conn: usize,
    client: usize,
    extra_ns: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival(usize),
    Done { station: usize, job: usize },
}

/// Explicit arrival: time, connection index, extra worker time.
pub type Arrival = (u64, usize, u64);

struct Engine<'a> {
    model: &'a CostModel,
    topo: &'a Topology,
    wl: &'a Workload,
    stations: Vec<Station>,
    route: Vec<Step>,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    reqs: Vec<Req>,
    jobs: Vec<Job>,
    free_jobs: Vec<usize>,
    jitter_rng: ChaCha8Rng,
    interference: f64,
    trace: Vec<TraceEvent>,
    m: Metrics,
    closed: bool,
}

impl<'a> Engine<'a> {
    fn new(model: &'a CostModel, topo: &'a Topology, wl: &'a Workload) -> Self {
        let mut stations = Vec::new();
        let mut route = Vec::new();
        for hop in 0..topo.hops.max(1) {
            let host = stations.len();
            stations.push(Station {
                name: format!("hop{hop}/host"),
                servers: topo.cores.max(1),
                busy: 0,
                host: true,
                queue: VecDeque::new(),
                busy_ns: 0,
            });
            let workers = stations.len();
            for w in 0..topo.n_workers.max(1) {
                stations.push(Station {
                    name: format!("hop{hop}/worker{w}"),
                    servers: 1,
                    busy: 0,
                    host: false,
                    queue: VecDeque::new(),
                    busy_ns: 0,
                });
            }
            let mut prev: Option<Placement> = None;
            for (i, s) in model.stages.iter().enumerate() {
                match s.placement {
                    Placement::Host | Placement::Worker if prev == Some(s.placement) => {
                        route.last_mut().map(|st: &mut Step| st.stages.push(i));
                    }
                    Placement::Host => route.push(Step {
                        target: Target::Fixed(host),
                        stages: vec![i],
                        worker: false,
                    }),
                    Placement::Worker => route.push(Step {
                        target: Target::Workers(workers),
                        stages: vec![i],
                        worker: true,
                    }),
                    Placement::Nic => {
                        stations.push(Station {
                            name: format!("hop{hop}/{}", s.name),
                            servers: 1,
                            busy: 0,
                            host: false,
                            queue: VecDeque::new(),
                            busy_ns: 0,
                        });
                        route.push(Step {
                            target: Target::Fixed(stations.len() - 1),
                            stages: vec![i],
                            worker: false,
                        });
                    }
                }
                prev = Some(s.placement);
            }
        }
        let over = wl.n_connections.saturating_sub(INTERFERENCE_KNEE) as f64;
        Engine {
            model,
            topo,
            wl,
            stations,
            route,
            heap: BinaryHeap::new(),
            seq: 0,
            reqs: Vec::new(),
            jobs: Vec::new(),
            free_jobs: Vec::new(),
            jitter_rng: ChaCha8Rng::seed_from_u64(wl.seed ^ 0x9e37_79b9_7f4a_7c15),
            interference: 1.0 + topo.interference_beta * over / INTERFERENCE_KNEE as f64,
            trace: Vec::new(),
            m: Metrics::default(),
            closed: matches!(wl.pattern, Pattern::ClosedLoop { .. }),
        }
    }

    fn push(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq, ev)));
    }

    fn log(&mut self, time: u64, station: usize, kind: TraceKind) {
        if self.topo.record_trace {
            self.trace.push(TraceEvent { time, station, kind });
        }
    }

    fn service(&mut self, step: usize, req: &Req) -> u64 {
        let st = &self.route[step];
        let mut total = 0u64;
        for &i in &st.stages {
            let s = &self.model.stages[i];
            let mut f = 1.0;
            if s.placement == Placement::Host {
                f *= self.interference;
            }
            if let Some(j) = self.topo.jitter {
                let sigma = if s.placement == Placement::Host {
                    j.sigma * j.host_multiplier
                } else {
                    j.sigma
                };
                if sigma > 0.0 {
                    let d = LogNormal::new(0.0, sigma).expect("finite sigma");
                    f *= d.sample(&mut self.jitter_rng);
                }
            }
            total += if f == 1.0 {
                s.service_ns
            } else {
                (s.service_ns as f64 * f).round() as u64
            };
        }
        if st.worker {
            total += req.extra_ns;
        }
        total
    }

    fn station_of(&self, step: usize, req: &Req) -> usize {
        match self.route[step].target {
            Target::Fixed(s) => s,
            Target::Workers(base) => base + req.conn % self.topo.n_workers.max(1),
        }
    }

    fn start(&mut self, t: u64, station: usize, job: usize) {
        let s = &mut self.stations[station];
        s.busy += 1;
        s.busy_ns += self.jobs[job].service;
        let done = t + self.jobs[job].service;
        self.log(t, station, TraceKind::Start);
        self.push(done, Ev::Done { station, job });
    }

    fn enter(&mut self, t: u64, req: usize, step: usize) {
        let r = self.reqs[req];
        if step == self.route.len() {
            let lat = t - r.arrival;
            self.m.delivered += 1;
            if t <= self.wl.duration_ns {
                self.m.delivered_in_window += 1;
            }
            self.m.latencies.push(lat);
            self.m.histogram.record(lat);
            self.next_closed(t, r.client, r.conn);
            return;
        }
        let station = self.station_of(step, &r);
        let service = self.service(step, &r);
        let job = Job { req, step, service };
        let id = match self.free_jobs.pop() {
            Some(i) => {
                self.jobs[i] = job;
                i
            }
            None => {
                self.jobs.push(job);
                self.jobs.len() - 1
            }
        };
        let s = &self.stations[station];
        if s.busy < s.servers {
            self.log(t, station, TraceKind::Enqueue);
            self.start(t, station, id);
        } else if s.queue.len() < self.topo.queue_depth.max(1) {
            self.log(t, station, TraceKind::Enqueue);
            self.stations[station].queue.push_back(Job { req: id, ..job });
        } else {
            self.log(t, station, TraceKind::Drop);
            self.free_jobs.push(id);
            self.m.loss += 1;
            self.next_closed(t, r.client, r.conn);
        }
    }

    fn next_closed(&mut self, t: u64, client: usize, conn: usize) {
        if self.closed && t < self.wl.duration_ns {
            self.arrive_later(t, conn, client, 0);
        }
    }

    fn arrive_later(&mut self, t: u64, conn: usize, client: usize, extra_ns: u64) {
        self.reqs.push(Req {
            arrival: t,
            conn,
            client,
            extra_ns,
        });
        let id = self.reqs.len() - 1;
        self.push(t, Ev::Arrival(id));
    }

    fn run(mut self, arrivals: Vec<Arrival>) -> SimResult {
        match self.wl.pattern {
            Pattern::OpenLoop { .. } => {
                for (t, conn, extra) in arrivals {
                    self.arrive_later(t, conn, 0, extra);
                }
            }
            Pattern::ClosedLoop { concurrency } => {
                for c in 0..concurrency {
                    self.arrive_later(0, c % self.wl.n_connections.max(1), c, 0);
                }
            }
        }
        while let Some(Reverse((t, _, ev))) = self.heap.pop() {
            match ev {
                Ev::Arrival(req) => {
                    self.m.offered += 1;
                    self.enter(t, req, 0);
                }
                Ev::Done { station, job } => {
                    let Job { req, step, .. } = self.jobs[job];
                    self.free_jobs.push(job);
                    self.stations[station].busy -= 1;
                    self.log(t, station, TraceKind::Finish);
                    if let Some(next) = self.stations[station].queue.pop_front() {
                        self.start(t, station, next.req);
                    }
                    self.enter(t, req, step + 1);
                }
            }
        }
        self.finish()
    }

    fn finish(mut self) -> SimResult {
        let m = &mut self.m;
        let n = m.latencies.len();
        if n > 0 {
            let sum: u128 = m.latencies.iter().map(|&l| u128::from(l)).sum();
            m.mean_ns = sum as f64 / n as f64;
            let var = m
                .latencies
                .iter()
                .map(|&l| (l as f64 - m.mean_ns).powi(2))
                .sum::<f64>()
                / n as f64;
            m.jitter_ns = var.sqrt();
            let mut sorted = m.latencies.clone();
            sorted.sort_unstable();
            let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
            m.p50_ns = rank(0.50);
            m.p99_ns = rank(0.99);
        }
        let secs = self.wl.duration_ns.max(1) as f64 / 1e9;
        m.responses_per_s = m.delivered_in_window as f64 / secs;
        m.throughput_bps = m.responses_per_s * self.wl.request_bytes as f64 * 8.0;
        m.cpu_cost_ns = if self.model.mode == Mode::Flatproxy {
            let conns = (self.wl.n_connections as u64).min(m.offered);
            conns * self.topo.slow_path_conn_ns * self.topo.hops.max(1) as u64
        } else {
            self.stations.iter().filter(|s| s.host).map(|s| s.busy_ns).sum()
        };
        for s in &self.stations {
            m.stage_busy_ns.insert(s.name.clone(), s.busy_ns);
        }
        if let Pattern::OpenLoop { rate_qps } = self.wl.pattern {
            m.unstable = rate_qps > capacity_rps(self.model, self.topo, self.wl.n_connections);
        }
        SimResult {
            servers: self.stations.iter().map(|s| s.servers).collect(),
            station_names: self.stations.iter().map(|s| s.name.clone()).collect(),
            metrics: self.m,
            trace: self.trace,
        }
    }
}

/// Poisson arrivals over the workload duration; the first at t = 0.
pub fn open_loop_arrivals(wl: &Workload) -> Vec<Arrival> {
    let Pattern::OpenLoop { rate_qps } = wl.pattern else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(wl.seed);
    let gap = Exp::new(rate_qps.max(f64::MIN_POSITIVE) / 1e9).expect("positive rate");
    let conns = wl.n_connections.max(1);
    let mut out = Vec::new();
    let mut t = 0.0f64;
    let mut i = 0usize;
    while (t as u64) < wl.duration_ns || i == 0 {
        out.push((t as u64, i % conns, 0));
        i += 1;
        t += gap.sample(&mut rng);
    }
    out
}

/// Sustainable request rate: the slowest station group bounds it.
pub fn capacity_rps(model: &CostModel, topo: &Topology, n_connections: usize) -> f64 {
    let interference = 1.0
        + topo.interference_beta * n_connections.saturating_sub(INTERFERENCE_KNEE) as f64
            / INTERFERENCE_KNEE as f64;
    let mut cap = f64::INFINITY;
    let host = model.host_ns() as f64 * interference;
    if host > 0.0 {
        cap = cap.min(topo.cores.max(1) as f64 / host);
    }
    let worker: u64 = model
        .stages
        .iter()
        .filter(|s| s.placement == Placement::Worker)
        .map(|s| s.service_ns)
        .sum();
    if worker > 0 {
        let used = topo.n_workers.max(1).min(n_connections.max(1));
        cap = cap.min(used as f64 / worker as f64);
    }
    for s in model.stages.iter().filter(|s| s.placement == Placement::Nic) {
        if s.service_ns > 0 {
            cap = cap.min(1.0 / s.service_ns as f64);
        }
    }
    cap * 1e9
}

/// Runs one workload against one mode.
pub fn run_sim(mode: Mode, cost: &CostModel, wl: &Workload, topo: &Topology) -> SimResult {
    debug_assert_eq!(mode, cost.mode);
    run_with_arrivals(cost, wl, topo, open_loop_arrivals(wl))
}

fn run_with_arrivals(cost: &CostModel, wl: &Workload, topo: &Topology, arrivals: Vec<Arrival>) -> SimResult {
    Engine::new(cost, topo, wl).run(arrivals)
}

/// Replays a recorded trace and returns the first instant at which some
/// station had waiting work and an idle server.
pub fn work_conservation_violation(res: &SimResult) -> Option<(u64, usize)> {
    let n = res.servers.len();
    let mut busy = vec![0usize; n];
    let mut queued = vec![0usize; n];
    let mut i = 0;
    let tr = &res.trace;
    while i < tr.len() {
        let t = tr[i].time;
        while i < tr.len() && tr[i].time == t {
            let e = tr[i];
            match e.kind {
                TraceKind::Enqueue => queued[e.station] += 1,
                TraceKind::Start => {
                    queued[e.station] -= 1;
                    busy[e.station] += 1;
                }
                TraceKind::Finish => busy[e.station] -= 1,
                TraceKind::Drop => {}
            }
            i += 1;
        }
        for s in 0..n {
            if queued[s] > 0 && busy[s] < res.servers[s] {
                return Some((t, s));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub layer: SimLayer,
    pub modes: Vec<Mode>,
    pub rates: Vec<f64>,
    pub connections: Vec<usize>,
    pub cores: Vec<usize>,
    pub duration_ns: u64,
    pub seed: u64,
    pub request_bytes: u64,
    pub topology: Topology,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            layer: SimLayer::L4,
            modes: Mode::ALL.to_vec(),
            rates: vec![10_000.0, 40_000.0, 100_000.0, 200_000.0, 400_000.0],
            connections: vec![16],
            cores: vec![1, 2],
            duration_ns: 50_000_000,
            seed: 1,
            request_bytes: 1024,
            topology: Topology::default(),
        }
    }
}

impl Sweep {
    pub fn validate(&self) -> Result<(), String> {
        if self.modes.is_empty() {
            return Err("no modes".into());
        }
        if self.rates.is_empty() || self.rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err("rates must be positive".into());
        }
        if self.connections.is_empty() || self.connections.contains(&0) {
            return Err("connections must be positive".into());
        }
        if self.cores.is_empty() || self.cores.contains(&0) {
            return Err("cores must be positive".into());
        }
        if self.duration_ns == 0 {
            return Err("duration must be positive".into());
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub mode: Mode,
    pub rate_qps: f64,
    pub connections: usize,
    pub cores: usize,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub jitter_ns: f64,
    pub throughput_bps: f64,
    pub responses_per_s: f64,
    pub loss: u64,
    pub cpu_cost_ns: u64,
}

pub const CSV_HEADER: [&str; 12] = [
    "mode",
    "rate_qps",
    "connections",
    "cores",
    "mean_ns",
    "p50_ns",
    "p99_ns",
    "jitter_ns",
    "throughput_bps",
    "responses_per_s",
    "loss",
    "cpu_cost_ns",
];

impl Row {
    fn from_metrics(mode: Mode, rate: f64, connections: usize, cores: usize, m: &Metrics) -> Self {
        Row {
            mode,
            rate_qps: rate,
            connections,
            cores,
            mean_ns: m.mean_ns,
            p50_ns: m.p50_ns,
            p99_ns: m.p99_ns,
            jitter_ns: m.jitter_ns,
            throughput_bps: m.throughput_bps,
            responses_per_s: m.responses_per_s,
            loss: m.loss,
            cpu_cost_ns: m.cpu_cost_ns,
        }
    }

    fn record(&self) -> [String; 12] {
        [
            self.mode.to_string(),
            fmt_num(self.rate_qps),
            self.connections.to_string(),
            self.cores.to_string(),
            format!("{:.0}", self.mean_ns),
            self.p50_ns.to_string(),
            self.p99_ns.to_string(),
            format!("{:.0}", self.jitter_ns),
            format!("{:.0}", self.throughput_bps),
            format!("{:.3}", self.responses_per_s),
            self.loss.to_string(),
            self.cpu_cost_ns.to_string(),
        ]
    }
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Runs every mode over every sweep point. Rows are ordered by mode, then
/// cores, connections and rate.
pub fn compare_modes(sweep: &Sweep) -> Vec<Row> {
    let mut rows = Vec::new();
    for &mode in &sweep.modes {
        let model = cost_model(mode, sweep.layer);
        for &cores in &sweep.cores {
            for &conns in &sweep.connections {
                for &rate in &sweep.rates {
                    let topo = Topology {
                        cores,
                        ..sweep.topology.clone()
                    };
                    let mut wl = Workload::open(rate, conns, sweep.duration_ns, sweep.seed);
                    wl.request_bytes = sweep.request_bytes;
                    let res = run_sim(mode, &model, &wl, &topo);
                    rows.push(Row::from_metrics(mode, rate, conns, cores, &res.metrics));
                }
            }
        }
    }
    rows
}

pub fn write_csv<W: Write>(rows: &[Row], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[Row]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<Row>, String> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != CSV_HEADER {
        return Err(format!("unexpected header {header:?}"));
    }
    rdr.deserialize().map(|r| r.map_err(|e| e.to_string())).collect()
}

/// FlatProxy vs envoy ratios over a set of rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    /// 1 - flatproxy/envoy mean latency at the lowest rate, in percent.
    pub latency_reduction_pct: Option<f64>,
    /// Best throughput ratio over the sweep, bytes.
    pub throughput_ratio: Option<f64>,
    pub qps_ratio: Option<f64>,
    /// Host time per response, envoy over flatproxy, at the lowest rate.
    pub cpu_ratio: Option<f64>,
}

/// Ratios are taken within one (cores, connections) group: the one with
/// the fewest cores that has both envoy and flatproxy rows.
pub fn headline(rows: &[Row]) -> Headline {
    let mut groups: Vec<(usize, usize)> = rows.iter().map(|r| (r.cores, r.connections)).collect();
    groups.sort_unstable();
    groups.dedup();
    let has = |g: (usize, usize), m: Mode| rows.iter().any(|r| r.mode == m && (r.cores, r.connections) == g);
    let Some(g) = groups.into_iter().find(|&g| has(g, Mode::Envoy) && has(g, Mode::Flatproxy)) else {
        return Headline::default();
    };
    let of = |m: Mode| rows.iter().filter(move |r| r.mode == m && (r.cores, r.connections) == g);
    let lowest = |m: Mode| of(m).min_by(|a, b| a.rate_qps.total_cmp(&b.rate_qps));
    let best = |m: Mode, f: fn(&Row) -> f64| of(m).map(f).reduce(f64::max);
    let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let (e, f) = (lowest(Mode::Envoy), lowest(Mode::Flatproxy));
    let per_resp = |r: &Row| r.cpu_cost_ns as f64 / r.responses_per_s.max(f64::MIN_POSITIVE);
    Headline {
        latency_reduction_pct: match (e, f) {
            (Some(e), Some(f)) if e.mean_ns > 0.0 => Some(100.0 * (1.0 - f.mean_ns / e.mean_ns)),
            _ => None,
        },
        throughput_ratio: ratio(best(Mode::Flatproxy, |r| r.throughput_bps), best(Mode::Envoy, |r| r.throughput_bps)),
        qps_ratio: ratio(best(Mode::Flatproxy, |r| r.responses_per_s), best(Mode::Envoy, |r| r.responses_per_s)),
        cpu_ratio: match (e, f) {
            (Some(e), Some(f)) if f.cpu_cost_ns > 0 => Some(per_resp(e) / per_resp(f)),
            _ => None,
        },
    }
}

impl fmt::Display for Headline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |x: Option<f64>, unit: &str| x.map_or("n/a".to_owned(), |v| format!("{v:.2}{unit}"));
        write!(
            f,
            "latency reduction {}, throughput ratio {}, qps ratio {}, cpu ratio {}",
            show(self.latency_reduction_pct, "%"),
            show(self.throughput_ratio, "x"),
            show(self.qps_ratio, "x"),
            show(self.cpu_ratio, "x"),
        )
    }
}

/// Requests for a functional run.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalSpec {
    /// Must be open loop.
    pub workload: Workload,
    /// Request paths, used round-robin.
    pub paths: Vec<String>,
    /// Listener address; defaults to the first configured listener.
    pub target: Option<(Ipv4Addr, u16)>,
    pub max_requests: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionalEntry {
    pub index: usize,
    pub arrival_ns: u64,
    pub flow: FlowKey,
    pub path: String,
    /// "deliver", "respond:<status>" or "drop:<reason>".
    pub outcome: String,
    pub endpoint: Option<String>,
    pub verdict: Verdict,
    pub trace: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FunctionalReport {
    pub metrics: Metrics,
    pub log: Vec<FunctionalEntry>,
    pub snapshot: serde_json::Value,
}

impl FunctionalReport {
    pub fn endpoint_counts(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for e in &self.log {
            if let Some(ep) = &e.endpoint {
                *m.entry(ep.clone()).or_insert(0) += 1;
            }
        }
        m
    }
}

fn client_flow(i: usize, dip: Ipv4Addr, dport: u16) -> FlowKey {
    let host = (i / 50_000) as u32;
    let sip = Ipv4Addr::from(u32::from(Ipv4Addr::new(172, 16, 0, 1)) + host);
    FlowKey::new(sip, 1024 + (i % 50_000) as u16, dip, dport, Proto::Tcp)
}

/// Each request runs over a fresh connection through the real chain;
/// delivered requests are then timed by the event engine with the
/// FlatProxy model (or the config's cost profile).
pub fn run_functional(cfg: &MeshConfig, spec: &FunctionalSpec, topo: &Topology) -> Result<FunctionalReport, ConfigError> {
    if !matches!(spec.workload.pattern, Pattern::OpenLoop { .. }) {
        return Err(ConfigError::Invalid("functional runs need an open-loop workload".into()));
    }
    let model = match &cfg.cost_profile {
        Some(name) => cost_model_by_name(name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown cost profile \"{name}\"")))?,
        None => cost_model(Mode::Flatproxy, SimLayer::L7),
    };
    let (dip, dport) = match (spec.target, cfg.listeners.first()) {
        (Some(t), _) => t,
        (None, Some(l)) => (l.dip, l.dport),
        (None, None) => return Err(ConfigError::Invalid("no listener to target".into())),
    };
    let echo: crate::vq::StubHandler = Arc::new(|ep, req| {
        let body = format!("{} {}", ep, req.len());
        http::write_response(200, &[("Content-Type", "text/plain")], body.as_bytes())
    });
    let transport: Arc<dyn Transport> = Arc::new(LocalTransport::new(Some(echo), RingConfig::default()));
    let mut dp = Dataplane::new(cfg.clone(), transport, topo.n_workers)?;
    let mac = cfg.local_mac();
    let mut arrivals = open_loop_arrivals(&spec.workload);
    if let Some(n) = spec.max_requests {
        arrivals.truncate(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.workload.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(arrivals.len());
    let mut timed = Vec::new();
    let paths = if spec.paths.is_empty() { vec!["/".to_owned()] } else { spec.paths.clone() };
    for (i, &(t, conn, _)) in arrivals.iter().enumerate() {
        dp.set_now(t);
        let flow = client_flow(i, dip, dport);
        let fb = FrameBuilder::new(flow, mac);
        let path = paths[i % paths.len()].clone();
        let pad = spec.workload.request_bytes.saturating_sub(64) as usize;
        let body = vec![b'x'; pad];
        let req = http::simple_request("POST", &path, "mesh.local", &body);
        let isn: u32 = rng.random();
        let frame = |b: Vec<u8>| {
            let mut u = TrafficUnit::frame(b);
            u.arrival_time = t;
            u
        };
        let syn = dp.ingress(frame(fb.syn(isn)));
        let failed = syn.iter().find(|c| c.verdict != Verdict::Held);
        let c = match failed {
            Some(c) => c.clone(),
            None => {
                let data = dp.ingress(frame(fb.tcp(isn.wrapping_add(1), false, false, &req)));
                let fin_seq = isn.wrapping_add(1).wrapping_add(req.len() as u32);
                dp.ingress(frame(fb.tcp(fin_seq, false, true, &[])));
                data.into_iter()
                    .find(|c| c.verdict != Verdict::Held)
                    .unwrap_or_else(|| panic!("request {i} produced no outcome"))
            }
        };
        let outcome = match (&c.disposition, c.verdict) {
            (Some(d), _) if d != "reinject" => d.clone(),
            (_, Verdict::Deliver) => "deliver".to_owned(),
            (_, v) => format!("{}:{}", v.label(), match v {
                Verdict::Drop(r) => r.as_str(),
                Verdict::ToSlowPath(r) => r.as_str(),
                _ => "",
            }),
        };
        if outcome == "deliver" {
            let extra: u64 = c.dsa.iter().map(|d| d.cost_ns).sum();
            timed.push((t, conn, extra));
        }
        log.push(FunctionalEntry {
            index: i,
            arrival_ns: t,
            flow,
            path,
            outcome,
            endpoint: c.endpoint.map(|e| e.0),
            verdict: c.verdict,
            trace: c.trace,
        });
    }
    let res = run_with_arrivals(&model, &spec.workload, topo, timed);
    Ok(FunctionalReport {
        metrics: res.metrics,
        log,
        snapshot: dp.stats_snapshot(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_products_are_exact() {
        let e4 = cost_model(Mode::Envoy, SimLayer::L4);
        let ns: Vec<u64> = e4.stages.iter().map(|s| s.service_ns).collect();
        assert_eq!(ns, [1980, 5940, 4400, 1540, 2200, 5940]);
        assert_eq!(e4.total_ns, 22_000);
        let f4 = cost_model(Mode::Flatproxy, SimLayer::L4);
        let ns: Vec<u64> = f4.stages.iter().map(|s| s.service_ns).collect();
        assert_eq!(ns, [1976, 76, 5016, 532]);
        let f7 = cost_model(Mode::Flatproxy, SimLayer::L7);
        assert_eq!(f7.total_ns, 17_600);
        assert_eq!(cost_model(Mode::Envoy, SimLayer::L7).total_ns, 62_500);
    }

    #[test]
    fn derived_models() {
        assert_eq!(cost_model(Mode::Sockmap, SimLayer::L7).total_ns, 62_500 - 4375 + 437);
        assert_eq!(cost_model(Mode::Toe, SimLayer::L4).total_ns, 1976 + 76 + 4400 + 1540 + 2200 + 5940);
        assert_eq!(builtin_cost_models().len(), 8);
    }

    #[test]
    fn single_request_takes_the_stage_sum() {
        for m in builtin_cost_models() {
            let r = run_sim(m.mode, &m, &Workload::single(), &Topology::default());
            assert_eq!(r.metrics.delivered, 1);
            assert_eq!(r.metrics.latencies, vec![m.total_ns], "{}", m.name());
        }
    }

    #[test]
    fn histogram_counts_match() {
        let m = cost_model(Mode::Envoy, SimLayer::L4);
        let r = run_sim(Mode::Envoy, &m, &Workload::open(30_000.0, 4, 10_000_000, 3), &Topology::default());
        assert_eq!(r.metrics.histogram.count(), r.metrics.delivered);
        assert!(r.metrics.p50_ns <= r.metrics.p99_ns);
    }
}
