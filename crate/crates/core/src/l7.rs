//! Application-layer processing modules: HTTP parser and deparser, the
//! ordered filter, the HTTP router and the load balancer behind it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::http::{self, HttpError};
use crate::match_action::{
    ActionRef, Emit, Env, Layer, MatchTable, Parsed, Ppm, PpmId, Published,
};
use crate::model::{
    make_conn_key, make_listener_key, BodyRef, DropReason, Endpoint, EndpointId, FlowKey,
    Metadata, QueueId, SlowReason, TrafficUnit, UnitKind, Verdict,
};

/// Per-connection buffer pool holding bodies cached by the HTTP parser.
#[derive(Debug, Default)]
pub struct BodyPool {
    next: u64,
    bodies: HashMap<BodyRef, Vec<u8>>,
}

impl BodyPool {
    pub fn store(&mut self, body: Vec<u8>) -> BodyRef {
        self.next += 1;
        let r = BodyRef(self.next);
        self.bodies.insert(r, body);
        r
    }

    pub fn get(&self, r: BodyRef) -> Option<&[u8]> {
        self.bodies.get(&r).map(Vec::as_slice)
    }

    pub fn take(&mut self, r: BodyRef) -> Option<Vec<u8>> {
        self.bodies.remove(&r)
    }

    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }
}

/// Connection (4-tuple) to queue binding written by the router.
#[derive(Debug, Default)]
pub struct QueueTable {
    inner: Mutex<HashMap<FlowKey, QueueId>>,
}

impl QueueTable {
    pub fn get(&self, k: &FlowKey) -> Option<QueueId> {
        self.inner.lock().get(k).copied()
    }

    /// Binds `k` to `q` unless already bound; returns the binding in effect.
    pub fn bind(&self, k: FlowKey, q: QueueId) -> QueueId {
        *self.inner.lock().entry(k).or_insert(q)
    }

    pub fn remove(&self, k: &FlowKey) -> Option<QueueId> {
        self.inner.lock().remove(k)
    }

    pub fn remove_queue(&self, q: QueueId) {
        self.inner.lock().retain(|_, v| *v != q);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConnectError {
    #[error("endpoint {0} refused the connection")]
    Refused(EndpointId),
    #[error("no service stub for endpoint {0}")]
    NoStub(EndpointId),
    #[error("queue binding failed: {0}")]
    Bind(String),
}

/// Connection management as seen by the router: establishes a connection
/// to an endpoint and returns the bound queue.
pub trait Connector: Send + Sync {
    fn connect(&self, conn: &FlowKey, endpoint: &Endpoint, cluster: &str) -> Result<QueueId, ConnectError>;

    fn queue_open(&self, _q: QueueId) -> bool {
        true
    }
}

/// Connector handing out sequential queue ids without a transport.
#[derive(Debug, Default)]
pub struct SeqConnector {
    next: AtomicU32,
    calls: AtomicU64,
}

impl SeqConnector {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Connector for SeqConnector {
    fn connect(&self, _conn: &FlowKey, _endpoint: &Endpoint, _cluster: &str) -> Result<QueueId, ConnectError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(QueueId(self.next.fetch_add(1, Ordering::Relaxed) + 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbPolicy {
    RoundRobin,
    WeightedRr,
    LeastConn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDef {
    pub name: String,
    pub endpoints: Vec<Endpoint>,
    pub policy: LbPolicy,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LbError {
    #[error("cluster {0} has no healthy endpoint with positive weight")]
    NoHealthyEndpoint(String),
}

/// Cluster definition plus balancer state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub def: ClusterDef,
    pub rr_cursor: usize,
    wrr_current: Vec<i64>,
    pub active_conns: BTreeMap<EndpointId, u64>,
    pub assigned: BTreeMap<EndpointId, u64>,
}

impl Cluster {
    pub fn new(def: ClusterDef) -> Self {
        let n = def.endpoints.len();
        Cluster {
            def,
            rr_cursor: 0,
            wrr_current: vec![0; n],
            active_conns: BTreeMap::new(),
            assigned: BTreeMap::new(),
        }
    }

    fn eligible(&self, i: usize) -> bool {
        let e = &self.def.endpoints[i];
        e.healthy && e.weight > 0
    }

    /// Returns a connection slot taken by [`load_balance`].
    pub fn release(&mut self, id: &EndpointId) {
        if let Some(c) = self.active_conns.get_mut(id) {
            *c = c.saturating_sub(1);
        }
    }
}

/// Picks an endpoint for a new connection.
pub fn load_balance(c: &mut Cluster, _m: &Metadata) -> Result<Endpoint, LbError> {
    let n = c.def.endpoints.len();
    if !(0..n).any(|i| c.eligible(i)) {
        return Err(LbError::NoHealthyEndpoint(c.def.name.clone()));
    }
    let pick = match c.def.policy {
        LbPolicy::RoundRobin => {
            let i = (0..n)
                .map(|k| (c.rr_cursor + k) % n)
                .find(|&i| c.eligible(i))
                .expect("an eligible endpoint exists");
            c.rr_cursor = (i + 1) % n;
            i
        }
        LbPolicy::WeightedRr => {
            // Smooth weighted round-robin.
            if c.wrr_current.len() != n {
                c.wrr_current = vec![0; n];
            }
            let mut total = 0i64;
            let mut best: Option<usize> = None;
            let eligible: Vec<usize> = (0..n).filter(|&i| c.eligible(i)).collect();
            for i in eligible {
                let w = i64::from(c.def.endpoints[i].weight);
                c.wrr_current[i] += w;
                total += w;
                if best.is_none_or(|b| c.wrr_current[i] > c.wrr_current[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("an eligible endpoint exists");
            c.wrr_current[b] -= total;
            b
        }
        LbPolicy::LeastConn => (0..n)
            .filter(|&i| c.eligible(i))
            .min_by(|&a, &b| {
                let ea = &c.def.endpoints[a];
                let eb = &c.def.endpoints[b];
                let ca = c.active_conns.get(&ea.id).copied().unwrap_or(0);
                let cb = c.active_conns.get(&eb.id).copied().unwrap_or(0);
                ca.cmp(&cb).then_with(|| ea.id.cmp(&eb.id))
            })
            .expect("an eligible endpoint exists"),
    };
    let ep = c.def.endpoints[pick].clone();
    *c.active_conns.entry(ep.id.clone()).or_insert(0) += 1;
    *c.assigned.entry(ep.id.clone()).or_insert(0) += 1;
    Ok(ep)
}

/// Balancer state for every cluster, keyed by cluster name.
#[derive(Debug, Default)]
pub struct LbState {
    clusters: BTreeMap<String, Cluster>,
}

impl LbState {
    /// State for `def`, reset when the definition changed since last use.
    /// Assignment counters survive a reset.
    pub fn cluster(&mut self, def: &ClusterDef) -> &mut Cluster {
        let stale = self.clusters.get(&def.name).is_none_or(|c| c.def != *def);
        if stale {
            let assigned = self
                .clusters
                .remove(&def.name)
                .map(|c| c.assigned)
                .unwrap_or_default();
            let mut fresh = Cluster::new(def.clone());
            fresh.assigned = assigned;
            self.clusters.insert(def.name.clone(), fresh);
        }
        self.clusters.get_mut(&def.name).expect("inserted above")
    }

    pub fn get(&self, name: &str) -> Option<&Cluster> {
        self.clusters.get(name)
    }

    pub fn release(&mut self, cluster: &str, id: &EndpointId) {
        if let Some(c) = self.clusters.get_mut(cluster) {
            c.release(id);
        }
    }

    /// Per-cluster, per-endpoint assignment counts.
    pub fn assignments(&self) -> BTreeMap<String, BTreeMap<String, u64>> {
        self.clusters
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    c.assigned.iter().map(|(e, n)| (e.0.clone(), *n)).collect(),
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Allow,
    Deny,
}

/// Ordered filter rule. Every present predicate must hold; a rule with no
/// predicates matches everything.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRule {
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub host: Option<String>,
    #[serde(default)]
    pub path_prefix: Option<String>,
    #[serde(default)]
    pub source: Option<Ipv4Addr>,
    pub decision: FilterDecision,
}

impl FilterRule {
    pub fn matches(&self, m: &Metadata) -> bool {
        let http = m.http();
        let need_http = |f: &dyn Fn(&crate::model::HttpFields) -> bool| http.is_some_and(f);
        self.method
            .as_ref()
            .is_none_or(|want| need_http(&|h| h.method.eq_ignore_ascii_case(want)))
            && self
                .host
                .as_ref()
                .is_none_or(|want| need_http(&|h| h.host.eq_ignore_ascii_case(want.as_bytes())))
            && self
                .path_prefix
                .as_ref()
                .is_none_or(|want| need_http(&|h| h.path().starts_with(want.as_bytes())))
            && self.source.is_none_or(|ip| m.flow.sip == ip)
    }
}

/// First matching rule decides; no match hands the unit to the slow path.
pub fn filter_apply(m: &Metadata, rules: &[FilterRule]) -> Verdict {
    match rules.iter().find(|r| r.matches(m)) {
        Some(r) => match r.decision {
            FilterDecision::Allow => Verdict::Continue,
            FilterDecision::Deny => Verdict::Drop(DropReason::Filtered),
        },
        None => Verdict::ToSlowPath(SlowReason::NoRule),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Exact,
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathMatcher {
    pub kind: PathKind,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRule {
    pub listener: FlowKey,
    pub path_matchers: Vec<PathMatcher>,
    pub cluster: String,
    /// DSA transform applied before deparsing.
    pub dsa: Option<String>,
}

/// Compiled route table: hash lookup for exact paths, then prefixes ordered
/// longest first (ties by rule order).
#[derive(Clone, Debug, Default)]
pub struct RouteIndex {
    rules: Vec<RouteRule>,
    exact: HashMap<(FlowKey, Vec<u8>), usize>,
    prefix: HashMap<FlowKey, Vec<(Vec<u8>, usize)>>,
}

impl RouteIndex {
    pub fn build(rules: Vec<RouteRule>) -> Self {
        let mut exact = HashMap::new();
        let mut prefix: HashMap<FlowKey, Vec<(Vec<u8>, usize)>> = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            for pm in &r.path_matchers {
                let pat = pm.pattern.as_bytes().to_vec();
                match pm.kind {
                    PathKind::Exact => {
                        exact.entry((r.listener, pat)).or_insert(i);
                    }
                    PathKind::Prefix => prefix.entry(r.listener).or_default().push((pat, i)),
                }
            }
        }
        for v in prefix.values_mut() {
            // Stable sort keeps rule order among equal lengths.
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        }
        RouteIndex {
            rules,
            exact,
            prefix,
        }
    }

    pub fn rules(&self) -> &[RouteRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn lookup(&self, listener: &FlowKey, path: &[u8]) -> Option<&RouteRule> {
        if let Some(&i) = self.exact.get(&(*listener, path.to_vec())) {
            return Some(&self.rules[i]);
        }
        self.prefix
            .get(listener)?
            .iter()
            .find(|(p, _)| path.starts_with(p))
            .map(|&(_, i)| &self.rules[i])
    }
}

/// Epoch-published tables read by the L7 modules.
#[derive(Debug)]
pub struct L7Tables {
    pub listeners: Arc<MatchTable<FlowKey, Option<String>>>,
    pub filters: Arc<Published<Vec<FilterRule>>>,
    pub routes: Arc<Published<RouteIndex>>,
    pub clusters: Arc<Published<BTreeMap<String, ClusterDef>>>,
}

/// What the router decided; used by tests and counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RouteOutcome {
    /// Existing queue binding reused.
    Reused(QueueId),
    /// New connection: balancer picked `endpoint`, bound to `queue`.
    Connected { endpoint: Endpoint, queue: QueueId },
    Terminated(Verdict),
}

/// Borrowed view of the router's inputs.
pub struct RouteCtx<'a> {
    pub listeners: &'a HashMap<FlowKey, Option<String>>,
    pub routes: &'a RouteIndex,
    pub queues: &'a QueueTable,
    pub clusters: &'a BTreeMap<String, ClusterDef>,
    pub lb: &'a Mutex<LbState>,
    pub connector: &'a dyn Connector,
}

/// Listener lookup, path match, then queue lookup with balance-and-connect
/// on a miss. On success `m.queue` is set and the verdict stays `Continue`.
pub fn route(m: &mut Metadata, cx: &RouteCtx<'_>) -> RouteOutcome {
    let terminate = |m: &mut Metadata, v: Verdict| {
        m.reset_transient();
        let _ = m.set_verdict(v);
        RouteOutcome::Terminated(v)
    };
    let listener = make_listener_key(m.flow.dip, m.flow.dport);
    if !cx.listeners.contains_key(&listener) {
        return terminate(m, Verdict::Drop(DropReason::NoListener));
    }
    let path = m.http().map(|h| h.path().to_vec()).unwrap_or_default();
    let Some(rule) = cx.routes.lookup(&listener, &path) else {
        return terminate(m, Verdict::Drop(DropReason::NoRoute));
    };
    let conn = make_conn_key(m);
    let outcome = match cx.queues.get(&conn) {
        Some(q) => RouteOutcome::Reused(q),
        None => {
            let Some(def) = cx.clusters.get(&rule.cluster) else {
                return terminate(m, Verdict::ToSlowPath(SlowReason::NoHealthyEndpoint));
            };
            let endpoint = {
                let mut lb = cx.lb.lock();
                match load_balance(lb.cluster(def), m) {
                    Ok(e) => e,
                    Err(LbError::NoHealthyEndpoint(_)) => {
                        return terminate(m, Verdict::ToSlowPath(SlowReason::NoHealthyEndpoint))
                    }
                }
            };
            match cx.connector.connect(&conn, &endpoint, &rule.cluster) {
                Ok(q) => {
                    let q = cx.queues.bind(conn, q);
                    RouteOutcome::Connected { endpoint, queue: q }
                }
                Err(_) => {
                    cx.lb.lock().release(&rule.cluster, &endpoint.id);
                    return terminate(m, Verdict::ToSlowPath(SlowReason::ConnectFailure));
                }
            }
        }
    };
    let q = match &outcome {
        RouteOutcome::Reused(q) => *q,
        RouteOutcome::Connected { queue, .. } => *queue,
        RouteOutcome::Terminated(_) => unreachable!(),
    };
    if m.bind_queue(q).is_err() {
        return terminate(m, Verdict::ToSlowPath(SlowReason::QueueClosed));
    }
    if let RouteOutcome::Connected { endpoint, .. } = &outcome {
        m.endpoint = Some(endpoint.key());
    }
    m.dsa = rule.dsa.clone();
    outcome
}

/// Parses a MESSAGE payload into HTTP metadata and caches the body.
pub fn http_parse(unit: &mut TrafficUnit, bodies: &mut BodyPool) -> Result<(), HttpError> {
    let (fields, body) = http::parse_request(&unit.payload)?;
    unit.meta.set_http(fields);
    unit.meta.body_ref = Some(bodies.store(body));
    unit.payload.clear();
    Ok(())
}

/// Serializes the (possibly rewritten) request for the bound queue.
pub fn http_deparse(m: &Metadata, body: &[u8]) -> Vec<u8> {
    match m.http() {
        Some(h) => http::write_request(h, body),
        None => body.to_vec(),
    }
}

fn ppm_id(s: &str) -> PpmId {
    PpmId::new(s)
}

macro_rules! actions {
    ($($name:ident = $v:expr),* $(,)?) => {
        $(pub const $name: ActionRef = ActionRef($v);)*
        const ALL: &[(ActionRef, &str)] = &[$(($name, stringify!($name))),*];
    };
}

fn name_of(all: &[(ActionRef, &'static str)], a: ActionRef) -> &'static str {
    all.iter().find(|(r, _)| *r == a).map_or("?", |(_, n)| n)
}

pub mod parser_actions {
    use super::*;
    actions!(PARSED = 0, MALFORMED = 1);
    pub(crate) fn all() -> &'static [(ActionRef, &'static str)] {
        ALL
    }
}

pub mod filter_actions {
    use super::*;
    actions!(ALLOW = 0, DENY = 1, NO_RULE = 2);
    pub(crate) fn all() -> &'static [(ActionRef, &'static str)] {
        ALL
    }
}

pub mod router_actions {
    use super::*;
    actions!(
        NO_LISTENER = 0,
        NO_ROUTE = 1,
        FORWARD = 2,
        CONNECT = 3,
        NOT_HTTP = 4,
    );
    pub(crate) fn all() -> &'static [(ActionRef, &'static str)] {
        ALL
    }
}

pub mod deparser_actions {
    use super::*;
    actions!(ENCAPSULATE = 0, QUEUE_CLOSED = 1, UNBOUND = 2);
    pub(crate) fn all() -> &'static [(ActionRef, &'static str)] {
        ALL
    }
}

#[derive(Debug)]
pub struct HttpParserPpm {
    id: PpmId,
}

impl HttpParserPpm {
    pub fn new() -> Self {
        HttpParserPpm {
            id: ppm_id("http_parser"),
        }
    }
}

impl Default for HttpParserPpm {
    fn default() -> Self {
        Self::new()
    }
}

impl Ppm for HttpParserPpm {
    fn id(&self) -> &PpmId {
        &self.id
    }
    fn layer(&self) -> Layer {
        Layer::L7
    }
    fn actions(&self) -> Vec<ActionRef> {
        parser_actions::all().iter().map(|(a, _)| *a).collect()
    }
    fn action_name(&self, a: ActionRef) -> &str {
        name_of(parser_actions::all(), a)
    }

    fn parse(&self, unit: &mut TrafficUnit, env: &mut Env) -> Parsed {
        if unit.kind() != UnitKind::Message {
            return Parsed::Fault(parser_actions::MALFORMED);
        }
        match http_parse(unit, &mut env.bodies) {
            Ok(()) => Parsed::Ok,
            Err(_) => Parsed::Fault(parser_actions::MALFORMED),
        }
    }

    fn select(&self, _unit: &TrafficUnit, _env: &mut Env) -> ActionRef {
        parser_actions::PARSED
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        if action == parser_actions::MALFORMED {
            env.shared.counters.incr("l7.http_parser.malformed");
            let _ = unit
                .meta
                .set_verdict(Verdict::ToSlowPath(SlowReason::MalformedHttp));
        }
        Emit::Next
    }
}

#[derive(Debug)]
pub struct FilterPpm {
    id: PpmId,
    rules: Arc<Published<Vec<FilterRule>>>,
}

impl FilterPpm {
    pub fn new(rules: Arc<Published<Vec<FilterRule>>>) -> Self {
        FilterPpm {
            id: ppm_id("filter"),
            rules,
        }
    }
}

impl Ppm for FilterPpm {
    fn id(&self) -> &PpmId {
        &self.id
    }
    fn layer(&self) -> Layer {
        Layer::L7
    }
    fn actions(&self) -> Vec<ActionRef> {
        filter_actions::all().iter().map(|(a, _)| *a).collect()
    }
    fn action_name(&self, a: ActionRef) -> &str {
        name_of(filter_actions::all(), a)
    }

    fn parse(&self, _unit: &mut TrafficUnit, _env: &mut Env) -> Parsed {
        Parsed::Ok
    }

    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef {
        let rules = env.pin(&self.rules);
        match filter_apply(&unit.meta, &rules.value) {
            Verdict::Continue => filter_actions::ALLOW,
            Verdict::Drop(_) => filter_actions::DENY,
            _ => filter_actions::NO_RULE,
        }
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, _env: &mut Env) -> Emit {
        let v = match action {
            filter_actions::ALLOW => Verdict::Continue,
            filter_actions::DENY => Verdict::Drop(DropReason::Filtered),
            _ => Verdict::ToSlowPath(SlowReason::NoRule),
        };
        let _ = unit.meta.set_verdict(v);
        Emit::Next
    }
}

#[derive(Debug)]
pub struct RouterPpm {
    id: PpmId,
    tables: Arc<L7Tables>,
}

impl RouterPpm {
    pub fn new(tables: Arc<L7Tables>) -> Self {
        RouterPpm {
            id: ppm_id("router"),
            tables,
        }
    }
}

impl Ppm for RouterPpm {
    fn id(&self) -> &PpmId {
        &self.id
    }
    fn layer(&self) -> Layer {
        Layer::L7
    }
    fn actions(&self) -> Vec<ActionRef> {
        router_actions::all().iter().map(|(a, _)| *a).collect()
    }
    fn action_name(&self, a: ActionRef) -> &str {
        name_of(router_actions::all(), a)
    }

    fn parse(&self, unit: &mut TrafficUnit, _env: &mut Env) -> Parsed {
        if unit.meta.http().is_none() {
            Parsed::Fault(router_actions::NOT_HTTP)
        } else {
            Parsed::Ok
        }
    }

    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef {
        let listeners = env.pin_table(&self.tables.listeners);
        let listener = make_listener_key(unit.meta.flow.dip, unit.meta.flow.dport);
        if !listeners.value.contains_key(&listener) {
            return router_actions::NO_LISTENER;
        }
        let routes = env.pin(&self.tables.routes);
        let path = unit.meta.http().map(|h| h.path()).unwrap_or_default();
        if routes.value.lookup(&listener, path).is_none() {
            return router_actions::NO_ROUTE;
        }
        if env.shared.queues.get(&make_conn_key(&unit.meta)).is_some() {
            router_actions::FORWARD
        } else {
            router_actions::CONNECT
        }
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        if action == router_actions::NOT_HTTP {
            let _ = unit
                .meta
                .set_verdict(Verdict::ToSlowPath(SlowReason::MalformedHttp));
            return Emit::Next;
        }
        let listeners = env.pin_table(&self.tables.listeners);
        let routes = env.pin(&self.tables.routes);
        let clusters = env.pin(&self.tables.clusters);
        let shared = env.shared.clone();
        let cx = RouteCtx {
            listeners: &listeners.value,
            routes: &routes.value,
            queues: &shared.queues,
            clusters: &clusters.value,
            lb: &shared.lb,
            connector: shared.connector.as_ref(),
        };
        match route(&mut unit.meta, &cx) {
            RouteOutcome::Terminated(v) => {
                let name = match v {
                    Verdict::Drop(r) => format!("l7.router.drop.{}", r.as_str()),
                    Verdict::ToSlowPath(r) => format!("l7.router.slow.{}", r.as_str()),
                    _ => "l7.router.other".to_owned(),
                };
                shared.counters.incr(&name);
                Emit::Next
            }
            RouteOutcome::Connected { .. } => {
                shared.counters.incr("l7.router.connect");
                unit.meta.dsa.clone().map_or(Emit::Next, Emit::Dsa)
            }
            RouteOutcome::Reused(_) => unit.meta.dsa.clone().map_or(Emit::Next, Emit::Dsa),
        }
    }
}

#[derive(Debug)]
pub struct HttpDeparserPpm {
    id: PpmId,
}

impl HttpDeparserPpm {
    pub fn new() -> Self {
        HttpDeparserPpm {
            id: ppm_id("http_deparser"),
        }
    }
}

impl Default for HttpDeparserPpm {
    fn default() -> Self {
        Self::new()
    }
}

impl Ppm for HttpDeparserPpm {
    fn id(&self) -> &PpmId {
        &self.id
    }
    fn layer(&self) -> Layer {
        Layer::L7
    }
    fn actions(&self) -> Vec<ActionRef> {
        deparser_actions::all().iter().map(|(a, _)| *a).collect()
    }
    fn action_name(&self, a: ActionRef) -> &str {
        name_of(deparser_actions::all(), a)
    }

    fn parse(&self, _unit: &mut TrafficUnit, _env: &mut Env) -> Parsed {
        Parsed::Ok
    }

    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef {
        match unit.meta.queue() {
            None => deparser_actions::UNBOUND,
            Some(q) if !env.shared.connector.queue_open(q) => deparser_actions::QUEUE_CLOSED,
            Some(_) => deparser_actions::ENCAPSULATE,
        }
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        match action {
            deparser_actions::ENCAPSULATE => {
                let body = unit
                    .meta
                    .body_ref
                    .take()
                    .and_then(|r| env.bodies.take(r))
                    .unwrap_or_default();
                unit.payload = http_deparse(&unit.meta, &body);
                let _ = unit.meta.set_verdict(Verdict::Deliver);
            }
            deparser_actions::QUEUE_CLOSED => {
                let _ = unit
                    .meta
                    .set_verdict(Verdict::ToSlowPath(SlowReason::QueueClosed));
            }
            _ => {
                let _ = unit
                    .meta
                    .set_verdict(Verdict::ToSlowPath(SlowReason::NoHealthyEndpoint));
            }
        }
        Emit::Next
    }
}

impl fmt::Display for RouteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} -> {}", self.listener.dip, self.listener.dport, self.cluster)
    }
}
