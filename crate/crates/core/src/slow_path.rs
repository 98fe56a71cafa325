//! Control plane: table ownership, rule distribution, first-packet and
//! exception handling, connection management and statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::json;

use crate::config::{DefaultFilter, MeshConfig};
use crate::fast_path::{
    ipv4_ppm, new_l2_table, new_l3_table, new_l4_table, vswitch_ppm, KeyTable, L4Entry, L4Table,
    ToePpm, TABLE_FORWARD,
};
use crate::http;
use crate::l7::{
    load_balance, ClusterDef, ConnectError, Connector, FilterDecision, FilterPpm, FilterRule,
    HttpDeparserPpm, HttpParserPpm, L7Tables, LbError, RouteIndex, RouterPpm,
};
use crate::match_action::{
    compile_chain, ChainError, ChainSpec, DsaStub, ExecutableChain, FieldValue, MatchTable,
    Published, Registry, Shared, TableError, WriterId,
};
use crate::model::{
    make_listener_key, ConnId, DropReason, Endpoint, FlowKey, QueueId, SlowReason, TrafficUnit,
    UnitKind, Verdict,
};
use crate::stats::Counters;
use crate::vq::Transport;

/// Idle time after which an open connection starts closing.
pub const DEFAULT_IDLE_TIMEOUT_NS: u64 = 60_000_000_000;

/// Every match table of one data plane.
#[derive(Debug)]
pub struct TableSet {
    pub l2: Arc<KeyTable>,
    pub l3: Arc<KeyTable>,
    pub l4: Arc<L4Table>,
    pub l7: Arc<L7Tables>,
}

impl Default for TableSet {
    fn default() -> Self {
        Self::new()
    }
}

impl TableSet {
    pub fn new() -> Self {
        TableSet {
            l2: Arc::new(new_l2_table()),
            l3: Arc::new(new_l3_table()),
            l4: Arc::new(new_l4_table()),
            l7: Arc::new(L7Tables {
                listeners: Arc::new(MatchTable::new(
                    "l7.listeners",
                    WriterId::ConnController,
                    vec![crate::match_action::Field::Dip, crate::match_action::Field::Dport],
                    None,
                )),
                filters: Arc::new(Published::new("l7.filters", WriterId::MessageController, Vec::new())),
                routes: Arc::new(Published::new(
                    "l7.routes",
                    WriterId::MessageController,
                    RouteIndex::default(),
                )),
                clusters: Arc::new(Published::new(
                    "l7.clusters",
                    WriterId::MessageController,
                    BTreeMap::new(),
                )),
            }),
        }
    }

    /// Built-in processing modules bound to these tables.
    pub fn registry(&self, dsas: &[DsaStub]) -> Registry {
        let mut r = Registry::new();
        r.register(Arc::new(vswitch_ppm(self.l2.clone())));
        r.register(Arc::new(ipv4_ppm(self.l3.clone())));
        r.register(Arc::new(ToePpm::new(self.l4.clone())));
        r.register(Arc::new(HttpParserPpm::new()));
        r.register(Arc::new(FilterPpm::new(self.l7.filters.clone())));
        r.register(Arc::new(RouterPpm::new(self.l7.clone())));
        r.register(Arc::new(HttpDeparserPpm::new()));
        for d in dsas {
            r.register_dsa(d.clone());
        }
        r
    }

    pub fn compile(&self, spec: &ChainSpec, dsas: &[DsaStub]) -> Result<ExecutableChain, ChainError> {
        compile_chain(spec, &self.registry(dsas))
    }

    /// Fixed L2 → L3 front of the pipeline.
    pub fn front(&self) -> ExecutableChain {
        compile_chain(&ChainSpec::linear(&["vswitch", "ipv4"]), &self.registry(&[]))
            .expect("built-in front chain is valid")
    }

    pub fn epochs(&self) -> BTreeMap<String, u64> {
        [
            (self.l2.name(), self.l2.epoch()),
            (self.l3.name(), self.l3.epoch()),
            (self.l4.name(), self.l4.epoch()),
            (self.l7.listeners.name(), self.l7.listeners.epoch()),
            (self.l7.filters.name(), self.l7.filters.epoch()),
            (self.l7.routes.name(), self.l7.routes.epoch()),
            (self.l7.clusters.name(), self.l7.clusters.epoch()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    /// Writer recorded on the latest epoch of every table.
    pub fn writers(&self) -> BTreeMap<String, (WriterId, Option<WriterId>)> {
        let mut m = BTreeMap::new();
        m.insert(self.l2.name().to_owned(), (self.l2.published().owner(), self.l2.snapshot().writer));
        m.insert(self.l3.name().to_owned(), (self.l3.published().owner(), self.l3.snapshot().writer));
        m.insert(self.l4.name().to_owned(), (self.l4.published().owner(), self.l4.snapshot().writer));
        let l = &self.l7.listeners;
        m.insert(l.name().to_owned(), (l.published().owner(), l.snapshot().writer));
        let f = &self.l7.filters;
        m.insert(f.name().to_owned(), (f.owner(), f.load().writer));
        let r = &self.l7.routes;
        m.insert(r.name().to_owned(), (r.owner(), r.load().writer));
        let c = &self.l7.clusters;
        m.insert(c.name().to_owned(), (c.owner(), c.load().writer));
        m
    }

    /// Sum of all table epochs; grows with every publish anywhere.
    pub fn rule_epoch(&self) -> u64 {
        self.epochs().values().sum()
    }
}

/// L2 controller: owns the MAC table.
#[derive(Debug)]
pub struct OvsController {
    tables: Arc<TableSet>,
}

impl OvsController {
    pub const WRITER: WriterId = WriterId::OvsController;

    pub fn distribute(&self, cfg: &MeshConfig) -> Result<u64, TableError> {
        let entries = [(vec![FieldValue::Mac(cfg.local_mac())], TABLE_FORWARD)].into_iter().collect();
        self.tables.l2.replace(Self::WRITER, entries)
    }
}

/// L3/L4 controller: owns host, flow and listener tables.
#[derive(Debug)]
pub struct ConnController {
    tables: Arc<TableSet>,
}

impl ConnController {
    pub const WRITER: WriterId = WriterId::ConnController;

    pub fn distribute(&self, cfg: &MeshConfig) -> Result<(u64, u64), TableError> {
        let hosts = cfg
            .listeners
            .iter()
            .map(|l| (vec![FieldValue::Addr(l.dip)], TABLE_FORWARD))
            .collect();
        let e3 = self.tables.l3.replace(Self::WRITER, hosts)?;
        let listeners = cfg
            .listeners
            .iter()
            .map(|l| (make_listener_key(l.dip, l.dport), l.l4_cluster.clone()))
            .collect();
        let el = self.tables.l7.listeners.replace(Self::WRITER, listeners)?;
        Ok((e3, el))
    }

    pub fn install_flow(&self, flow: FlowKey, entry: L4Entry) -> Result<u64, TableError> {
        self.tables
            .l4
            .publish(Self::WRITER, crate::match_action::Delta::default().add(flow, entry))
    }

    pub fn remove_flow(&self, flow: FlowKey) -> Result<u64, TableError> {
        self.tables
            .l4
            .publish(Self::WRITER, crate::match_action::Delta::default().remove(flow))
    }
}

/// L7 controller: owns filter, route and cluster tables.
#[derive(Debug)]
pub struct MessageController {
    tables: Arc<TableSet>,
}

impl MessageController {
    pub const WRITER: WriterId = WriterId::MessageController;

    pub fn distribute(&self, cfg: &MeshConfig) -> Result<(u64, u64, u64), TableError> {
        let t = &self.tables.l7;
        let ef = t.filters.publish(Self::WRITER, cfg.filters.clone())?;
        let er = t.routes.publish(Self::WRITER, RouteIndex::build(cfg.route_rules()))?;
        let clusters = cfg.cluster_defs().into_iter().map(|c| (c.name.clone(), c)).collect();
        let ec = t.clusters.publish(Self::WRITER, clusters)?;
        Ok((ef, er, ec))
    }

    pub fn append_filter(&self, rule: FilterRule) -> Result<u64, TableError> {
        self.tables.l7.filters.update(Self::WRITER, |cur| {
            let mut v = cur.clone();
            v.push(rule);
            v
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnState {
    Opening,
    Open,
    Closing,
    Closed,
}

impl ConnState {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnState::Opening => "opening",
            ConnState::Open => "open",
            ConnState::Closing => "closing",
            ConnState::Closed => "closed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnRecord {
    pub conn_key: FlowKey,
    pub endpoint: Endpoint,
    pub cluster: String,
    pub vq: Option<QueueId>,
    pub state: ConnState,
    pub created_at: u64,
    pub last_active: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("illegal connection transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: ConnState,
    pub to: ConnState,
}

impl ConnRecord {
    pub fn transition(&mut self, to: ConnState) -> Result<(), TransitionError> {
        use ConnState::*;
        let ok = matches!((self.state, to), (Opening, Open) | (Open, Closing) | (Closing, Closed));
        if !ok {
            return Err(TransitionError { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }
}

/// Connection management: opens upstream queues for the router and the
/// L4 forwarder and tracks their lifecycle.
pub struct ConnManager {
    transport: Arc<dyn Transport>,
    records: Mutex<BTreeMap<FlowKey, ConnRecord>>,
    now: AtomicU64,
}

impl std::fmt::Debug for ConnManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnManager").finish_non_exhaustive()
    }
}

impl ConnManager {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        ConnManager {
            transport,
            records: Mutex::new(BTreeMap::new()),
            now: AtomicU64::new(0),
        }
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn set_now(&self, t: u64) {
        self.now.fetch_max(t, Ordering::Relaxed);
    }

    pub fn now(&self) -> u64 {
        self.now.load(Ordering::Relaxed)
    }

    pub fn touch(&self, conn: &FlowKey) {
        let now = self.now();
        if let Some(r) = self.records.lock().get_mut(conn) {
            r.last_active = r.last_active.max(now);
        }
    }

    pub fn record(&self, conn: &FlowKey) -> Option<ConnRecord> {
        self.records.lock().get(conn).cloned()
    }

    pub fn records(&self) -> Vec<ConnRecord> {
        self.records.lock().values().cloned().collect()
    }

    pub fn count_by_state(&self) -> BTreeMap<&'static str, u64> {
        let mut m: BTreeMap<&'static str, u64> = [ConnState::Opening, ConnState::Open, ConnState::Closing, ConnState::Closed]
            .into_iter()
            .map(|s| (s.as_str(), 0))
            .collect();
        for r in self.records.lock().values() {
            *m.entry(r.state.as_str()).or_insert(0) += 1;
        }
        m
    }

    /// Moves `conn` through CLOSING to CLOSED and releases its resources.
    pub fn close(&self, conn: &FlowKey, shared: &Shared) -> bool {
        let rec = {
            let mut recs = self.records.lock();
            let Some(r) = recs.get_mut(conn) else {
                return false;
            };
            if r.state != ConnState::Open || r.transition(ConnState::Closing).is_err() {
                return false;
            }
            r.clone()
        };
        shared.queues.remove(conn);
        if let Some(q) = rec.vq {
            self.transport.close(q);
        }
        shared.lb.lock().release(&rec.cluster, &rec.endpoint.id);
        if let Some(r) = self.records.lock().get_mut(conn) {
            let _ = r.transition(ConnState::Closed);
        }
        true
    }

    /// Closes connections idle for longer than `timeout_ns`.
    pub fn expire_idle(&self, timeout_ns: u64, shared: &Shared) -> Vec<FlowKey> {
        let now = self.now();
        let idle: Vec<FlowKey> = self
            .records
            .lock()
            .values()
            .filter(|r| r.state == ConnState::Open && now.saturating_sub(r.last_active) > timeout_ns)
            .map(|r| r.conn_key)
            .collect();
        idle.into_iter().filter(|k| self.close(k, shared)).collect()
    }
}

impl Connector for ConnManager {
    fn connect(&self, conn: &FlowKey, endpoint: &Endpoint, cluster: &str) -> Result<QueueId, ConnectError> {
        let now = self.now();
        let mut rec = ConnRecord {
            conn_key: *conn,
            endpoint: endpoint.clone(),
            cluster: cluster.to_owned(),
            vq: None,
            state: ConnState::Opening,
            created_at: now,
            last_active: now,
        };
        self.records.lock().insert(*conn, rec.clone());
        match self.transport.open(endpoint) {
            Ok(q) => {
                rec.vq = Some(q);
                rec.transition(ConnState::Open).expect("opening -> open");
                self.records.lock().insert(*conn, rec);
                Ok(q)
            }
            Err(e) => {
                self.records.lock().remove(conn);
                Err(e)
            }
        }
    }

    fn queue_open(&self, q: QueueId) -> bool {
        self.transport.is_open(q)
    }
}

/// What the slow path decided for a unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Disposition {
    /// Rules installed; run the original unit through the fast path again.
    Reinject(TrafficUnit),
    /// Synthesized reply to the client of `flow`.
    Respond { flow: FlowKey, status: u16, bytes: Vec<u8> },
    Drop(&'static str),
}

/// Why the slow path saw a unit: a fast-path hand-off or an L7 drop that
/// still needs a client-facing decision.
pub fn slow_reason(v: Verdict) -> Option<SlowReason> {
    match v {
        Verdict::ToSlowPath(r) => Some(r),
        Verdict::Drop(d @ (DropReason::NoListener | DropReason::NoRoute)) => Some(SlowReason::Dropped(d)),
        _ => None,
    }
}

pub struct SlowPath {
    pub cfg: MeshConfig,
    pub tables: Arc<TableSet>,
    pub shared: Arc<Shared>,
    pub conns: Arc<ConnManager>,
    pub ovs: OvsController,
    pub conn_ctl: ConnController,
    pub msg_ctl: MessageController,
    pub counters: Arc<Counters>,
    pub idle_timeout_ns: u64,
    handled: HashSet<(ConnId, &'static str, u64)>,
    calls: u64,
}

impl SlowPath {
    pub fn new(cfg: MeshConfig, tables: Arc<TableSet>, shared: Arc<Shared>, conns: Arc<ConnManager>) -> Self {
        let counters = shared.counters.clone();
        SlowPath {
            ovs: OvsController { tables: tables.clone() },
            conn_ctl: ConnController { tables: tables.clone() },
            msg_ctl: MessageController { tables: tables.clone() },
            cfg,
            tables,
            shared,
            conns,
            counters,
            idle_timeout_ns: DEFAULT_IDLE_TIMEOUT_NS,
            handled: HashSet::new(),
            calls: 0,
        }
    }

    /// Publishes every controller's tables; returns the epoch per table.
    pub fn distribute(&mut self) -> BTreeMap<String, u64> {
        let cfg = self.cfg.clone();
        self.ovs.distribute(&cfg).expect("owner publishes");
        self.conn_ctl.distribute(&cfg).expect("owner publishes");
        self.msg_ctl.distribute(&cfg).expect("owner publishes");
        self.counters.incr("slow_path.distribute");
        self.tables.epochs()
    }

    /// Swaps in a new config and distributes it.
    pub fn reload(&mut self, cfg: MeshConfig) -> BTreeMap<String, u64> {
        self.cfg = cfg;
        self.distribute()
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn respond(&self, flow: FlowKey, status: u16, why: &str) -> Disposition {
        self.counters.incr(&format!("slow_path.respond.{status}"));
        Disposition::Respond {
            flow,
            status,
            bytes: http::write_response(status, &[("Content-Type", "text/plain")], format!("{why}\n").as_bytes()),
        }
    }

    fn drop(&self, what: &'static str) -> Disposition {
        self.counters.incr(&format!("slow_path.drop.{what}"));
        Disposition::Drop(what)
    }

    /// Handles one unit the fast path gave up on. `original` is the unit
    /// as it entered the fast path; `processed` carries the verdict.
    pub fn handle(&mut self, original: TrafficUnit, processed: &TrafficUnit) -> Disposition {
        self.calls += 1;
        self.counters.incr("slow_path.calls");
        let Some(reason) = slow_reason(processed.meta.verdict()) else {
            return self.drop("not_slow_path");
        };
        let flow = processed.meta.flow;
        let key = (processed.meta.conn_id, reason.as_str(), self.tables.rule_epoch());
        if !self.handled.insert(key) {
            return self.drop("repeat");
        }
        match reason {
            SlowReason::NewConnection => self.new_connection(original, flow),
            SlowReason::ConnectionUnknown => self.drop("connection_unknown"),
            SlowReason::UnknownMac | SlowReason::UnknownHost => self.drop("not_local"),
            SlowReason::NoRule => match self.cfg.default_filter {
                DefaultFilter::Allow => {
                    let rule = FilterRule {
                        method: None,
                        host: None,
                        path_prefix: None,
                        source: None,
                        decision: FilterDecision::Allow,
                    };
                    self.msg_ctl.append_filter(rule).expect("owner publishes");
                    self.counters.incr("slow_path.install.filter");
                    self.reinject(original)
                }
                DefaultFilter::Deny => self.respond(flow, 403, "forbidden"),
            },
            SlowReason::Dropped(DropReason::NoRoute) => self.respond(flow, 404, "no route"),
            SlowReason::Dropped(_) => self.drop("no_listener"),
            SlowReason::MalformedHttp => self.respond(flow, 400, "malformed request"),
            SlowReason::NoHealthyEndpoint => self.respond(flow, 503, "no healthy endpoint"),
            SlowReason::ConnectFailure | SlowReason::QueueClosed => {
                self.respond(flow, 503, "upstream unavailable")
            }
            SlowReason::RevisitBudgetExceeded => self.drop("revisit_budget"),
        }
    }

    fn reinject(&self, mut unit: TrafficUnit) -> Disposition {
        unit.meta.reset_verdict();
        self.counters.incr("slow_path.reinject");
        Disposition::Reinject(unit)
    }

    fn new_connection(&mut self, original: TrafficUnit, flow: FlowKey) -> Disposition {
        let listener = self.tables.l7.listeners.snapshot();
        let Some(l4_cluster) = listener.value.get(&flow.listener()).cloned() else {
            return self.drop("no_listener");
        };
        let entry = match l4_cluster {
            None => L4Entry::ToL7,
            Some(cluster) => {
                let clusters = self.tables.l7.clusters.load();
                let Some(def) = clusters.value.get(&cluster) else {
                    return self.drop("no_cluster");
                };
                match self.forward_target(&flow, def) {
                    Ok(q) => L4Entry::Forward(q),
                    Err(what) => return self.drop(what),
                }
            }
        };
        self.conn_ctl.install_flow(flow, entry).expect("owner publishes");
        self.counters.incr("slow_path.install.flow");
        // Reinjection keeps the original bytes.
        let mut unit = original;
        if unit.kind() != UnitKind::Frame {
            return self.drop("not_a_frame");
        }
        unit.meta.reset_verdict();
        self.reinject(unit)
    }

    fn forward_target(&self, flow: &FlowKey, def: &ClusterDef) -> Result<QueueId, &'static str> {
        let ep = {
            let mut lb = self.shared.lb.lock();
            match load_balance(lb.cluster(def), &crate::model::Metadata::new(*flow)) {
                Ok(e) => e,
                Err(LbError::NoHealthyEndpoint(_)) => return Err("no_healthy_endpoint"),
            }
        };
        match self.conns.connect(flow, &ep, &def.name) {
            Ok(q) => {
                self.shared.queues.bind(*flow, q);
                Ok(q)
            }
            Err(_) => {
                self.shared.lb.lock().release(&def.name, &ep.id);
                Err("connect_failure")
            }
        }
    }

    /// Closes a finished connection and drops its flow entry.
    pub fn connection_closed(&mut self, flow: &FlowKey) {
        self.conns.close(flow, &self.shared);
        if self.tables.l4.lookup(flow) != L4Entry::Miss {
            self.conn_ctl.remove_flow(*flow).expect("owner publishes");
        }
        self.counters.incr("slow_path.conn_closed");
    }

    pub fn expire_idle(&mut self) -> Vec<FlowKey> {
        let closed = self.conns.expire_idle(self.idle_timeout_ns, &self.shared);
        for f in &closed {
            if self.tables.l4.lookup(f) != L4Entry::Miss {
                self.conn_ctl.remove_flow(*f).expect("owner publishes");
            }
        }
        self.counters.add("slow_path.idle_closed", closed.len() as u64);
        closed
    }

    /// Health flag of every configured endpoint, by cluster.
    pub fn endpoint_status(&self) -> BTreeMap<String, BTreeMap<String, bool>> {
        self.cfg
            .cluster_defs()
            .into_iter()
            .map(|c| (c.name, c.endpoints.into_iter().map(|e| (e.id.0, e.healthy)).collect()))
            .collect()
    }

    /// Point-in-time metrics document.
    pub fn stats_snapshot(&self) -> serde_json::Value {
        let counters = self.counters.snapshot();
        let verdicts: BTreeMap<&str, u64> = ["delivered", "dropped", "slow_path", "held"]
            .into_iter()
            .map(|k| (k, self.counters.get(&format!("fast_path.{k}"))))
            .collect();
        json!({
            "counters": counters,
            "verdicts": verdicts,
            "epochs": self.tables.epochs(),
            "assignments": self.shared.lb.lock().assignments(),
            "endpoints": self.endpoint_status(),
            "connections": self.conns.count_by_state(),
            "queue_bindings": self.shared.queues.len(),
            "slow_path_calls": self.calls,
        })
    }
}

impl std::fmt::Debug for SlowPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlowPath").field("calls", &self.calls).finish_non_exhaustive()
    }
}

/// Counters keyed by cluster then endpoint, flattened for reports.
pub fn flatten_assignments(a: &BTreeMap<String, BTreeMap<String, u64>>) -> HashMap<String, u64> {
    a.iter()
        .flat_map(|(c, m)| m.iter().map(move |(e, n)| (format!("{c}/{e}"), *n)))
        .collect()
}
