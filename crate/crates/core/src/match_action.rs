//! The extended match-action engine.
//!
//! A processing module (PPM) is `<parser, (match, action)*>`: a parser that
//! turns the unit into metadata, match stages that select an action from
//! the metadata, and action programs that rewrite the metadata and emit the
//! unit to the next PPM, a DSA stub, or back to the PPM's own match stage.
//! PPMs are wired only to PPMs of the same or an adjacent layer and are
//! compiled into immutable [`ExecutableChain`]s that many workers share.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::fast_path::ToeState;
use crate::l7::{BodyPool, Connector, LbState, QueueTable};
use crate::model::{QueueId, SlowReason, TrafficUnit, UnitKind, Verdict};
use crate::stats::Counters;

/// Self-loop bound for re-emits to a PPM's own match stage.
pub const DEFAULT_REVISIT_BUDGET: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    L2,
    L3,
    L4,
    L7,
}

impl Layer {
    fn rank(self) -> u8 {
        match self {
            Layer::L2 => 0,
            Layer::L3 => 1,
            Layer::L4 => 2,
            Layer::L7 => 3,
        }
    }

    /// Equal or neighbouring layers (L2-L3, L3-L4, L4-L7).
    pub fn adjacent(self, other: Layer) -> bool {
        self.rank().abs_diff(other.rank()) <= 1
    }

    /// Unit kind a PPM of this layer consumes.
    pub fn input_kind(self) -> UnitKind {
        match self {
            Layer::L2 => UnitKind::Frame,
            Layer::L3 => UnitKind::Packet,
            Layer::L4 => UnitKind::Segment,
            Layer::L7 => UnitKind::Message,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PpmId(pub String);

impl PpmId {
    pub fn new(s: impl Into<String>) -> Self {
        PpmId(s.into())
    }
}

impl fmt::Display for PpmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PpmId {
    fn from(s: &str) -> Self {
        PpmId(s.to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionRef(pub u16);

/// Where an action sends the unit next.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Emit {
    Next,
    Dsa(String),
    Rematch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WriterId {
    OvsController,
    ConnController,
    MessageController,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TableError {
    #[error("table {table} is owned by {owner:?}, publish attempted by {writer:?}")]
    NotOwner {
        table: String,
        owner: WriterId,
        writer: WriterId,
    },
}

static NEXT_TABLE_ID: AtomicU64 = AtomicU64::new(1);

/// One published state of a table.
#[derive(Debug)]
pub struct Versioned<T> {
    pub epoch: u64,
    pub writer: Option<WriterId>,
    pub value: T,
}

/// Epoch-published value with a single owning writer.
///
/// Readers load an `Arc` snapshot without blocking; a publish swaps in a
/// new snapshot atomically, so readers see either the old or the new state
/// and never a mix.
pub struct Published<T> {
    id: u64,
    name: String,
    owner: WriterId,
    cell: ArcSwap<Versioned<T>>,
    publish_lock: Mutex<()>,
}

impl<T: fmt::Debug> fmt::Debug for Published<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Published")
            .field("name", &self.name)
            .field("owner", &self.owner)
            .field("epoch", &self.cell.load().epoch)
            .finish()
    }
}

impl<T: Send + Sync + 'static> Published<T> {
    pub fn new(name: impl Into<String>, owner: WriterId, initial: T) -> Self {
        Published {
            id: NEXT_TABLE_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            owner,
            cell: ArcSwap::from_pointee(Versioned {
                epoch: 0,
                writer: None,
                value: initial,
            }),
            publish_lock: Mutex::new(()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn owner(&self) -> WriterId {
        self.owner
    }

    pub fn load(&self) -> Arc<Versioned<T>> {
        self.cell.load_full()
    }

    pub fn epoch(&self) -> u64 {
        self.cell.load().epoch
    }

    /// Replaces the value derived from the current one; returns the new epoch.
    pub fn update(&self, writer: WriterId, f: impl FnOnce(&T) -> T) -> Result<u64, TableError> {
        if writer != self.owner {
            return Err(TableError::NotOwner {
                table: self.name.clone(),
                owner: self.owner,
                writer,
            });
        }
        let _g = self.publish_lock.lock();
        let cur = self.cell.load();
        let next = Versioned {
            epoch: cur.epoch + 1,
            writer: Some(writer),
            value: f(&cur.value),
        };
        let epoch = next.epoch;
        self.cell.store(Arc::new(next));
        Ok(epoch)
    }

    pub fn publish(&self, writer: WriterId, value: T) -> Result<u64, TableError> {
        self.update(writer, |_| value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delta<K, V> {
    pub add: Vec<(K, V)>,
    pub remove: Vec<K>,
}

impl<K, V> Default for Delta<K, V> {
    fn default() -> Self {
        Delta {
            add: Vec::new(),
            remove: Vec::new(),
        }
    }
}

impl<K, V> Delta<K, V> {
    pub fn add(mut self, k: K, v: V) -> Self {
        self.add.push((k, v));
        self
    }

    pub fn remove(mut self, k: K) -> Self {
        self.remove.push(k);
        self
    }
}

/// Metadata field names usable in a table key schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    DstMac,
    Vlan,
    Sip,
    Sport,
    Dip,
    Dport,
    Proto,
    Method,
    Host,
    Path,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FieldValue {
    Mac([u8; 6]),
    U16(u16),
    Addr(Ipv4Addr),
    Bytes(Vec<u8>),
    Absent,
}

pub type CompositeKey = Vec<FieldValue>;

/// Extracts the composite key for `schema` from a unit's metadata.
pub fn extract_key(schema: &[Field], unit: &TrafficUnit) -> CompositeKey {
    let m = &unit.meta;
    schema
        .iter()
        .map(|f| match f {
            Field::DstMac => m.l2.map_or(FieldValue::Absent, |l2| FieldValue::Mac(l2.dst_mac)),
            Field::Vlan => m
                .l2
                .and_then(|l2| l2.vlan)
                .map_or(FieldValue::Absent, FieldValue::U16),
            Field::Sip => FieldValue::Addr(m.flow.sip),
            Field::Sport => FieldValue::U16(m.flow.sport),
            Field::Dip => FieldValue::Addr(m.flow.dip),
            Field::Dport => FieldValue::U16(m.flow.dport),
            Field::Proto => FieldValue::U16(m.flow.proto as u16),
            Field::Method => m
                .http()
                .map_or(FieldValue::Absent, |h| FieldValue::Bytes(h.method.clone().into_bytes())),
            Field::Host => m
                .http()
                .map_or(FieldValue::Absent, |h| FieldValue::Bytes(h.host.clone())),
            Field::Path => m
                .http()
                .map_or(FieldValue::Absent, |h| FieldValue::Bytes(h.path().to_vec())),
        })
        .collect()
}

/// Exact-match table. Absent keys resolve to the table default.
///
/// Entries live in a `HashMap` (open addressing, full key compared on
/// every probe) so hash collisions never mis-route.
pub struct MatchTable<K, V> {
    pub key_schema: Vec<Field>,
    default: V,
    inner: Published<HashMap<K, V>>,
}

impl<K: fmt::Debug, V: fmt::Debug> fmt::Debug for MatchTable<K, V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchTable")
            .field("key_schema", &self.key_schema)
            .field("default", &self.default)
            .field("inner", &self.inner)
            .finish()
    }
}

pub type TableSnapshot<K, V> = Arc<Versioned<HashMap<K, V>>>;

impl<K, V> MatchTable<K, V>
where
    K: Eq + Hash + Clone + Send + Sync + 'static,
    V: Clone + Send + Sync + 'static,
{
    pub fn new(name: impl Into<String>, owner: WriterId, key_schema: Vec<Field>, default: V) -> Self {
        MatchTable {
            key_schema,
            default,
            inner: Published::new(name, owner, HashMap::new()),
        }
    }

    pub fn published(&self) -> &Published<HashMap<K, V>> {
        &self.inner
    }

    pub fn name(&self) -> &str {
        self.inner.name()
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch()
    }

    pub fn default_value(&self) -> &V {
        &self.default
    }

    pub fn snapshot(&self) -> TableSnapshot<K, V> {
        self.inner.load()
    }

    /// Lookup against the latest published epoch.
    pub fn lookup(&self, k: &K) -> V {
        self.lookup_in(&self.snapshot(), k)
    }

    pub fn lookup_in(&self, snap: &Versioned<HashMap<K, V>>, k: &K) -> V {
        snap.value.get(k).cloned().unwrap_or_else(|| self.default.clone())
    }

    pub fn len(&self) -> usize {
        self.snapshot().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies removals then additions and publishes the result as a new epoch.
    pub fn publish(&self, writer: WriterId, delta: Delta<K, V>) -> Result<u64, TableError> {
        self.inner.update(writer, |cur| {
            let mut next = cur.clone();
            for k in &delta.remove {
                next.remove(k);
            }
            for (k, v) in delta.add {
                next.insert(k, v);
            }
            next
        })
    }

    /// Publishes exactly `entries` as the next epoch.
    pub fn replace(&self, writer: WriterId, entries: HashMap<K, V>) -> Result<u64, TableError> {
        self.inner.publish(writer, entries)
    }
}

/// Field assignment primitive of an action program.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assign {
    Dip(Ipv4Addr),
    Dport(u16),
    Vlan(Option<u16>),
    Host(Vec<u8>),
    Header { name: Vec<u8>, value: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Set(Assign),
    Count(String),
    SelectQueue(QueueId),
    SetVerdict(Verdict),
    Emit(Emit),
}

/// Straight-line action program. Loops exist only through `Emit::Rematch`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionProgram {
    pub id: ActionRef,
    pub name: String,
    pub steps: Vec<Step>,
}

impl ActionProgram {
    pub fn new(id: u16, name: impl Into<String>, steps: Vec<Step>) -> Self {
        ActionProgram {
            id: ActionRef(id),
            name: name.into(),
            steps,
        }
    }

    /// Runs the steps against `unit`; returns the emit target (default `Next`).
    pub fn run(&self, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        let mut emit = Emit::Next;
        for step in &self.steps {
            match step {
                Step::Set(a) => apply_assign(a, unit),
                Step::Count(name) => env.shared.counters.incr(name),
                Step::SelectQueue(q) => {
                    if unit.meta.bind_queue(*q).is_err() {
                        let _ = unit
                            .meta
                            .set_verdict(Verdict::ToSlowPath(SlowReason::QueueClosed));
                    }
                }
                Step::SetVerdict(v) => {
                    let _ = unit.meta.set_verdict(*v);
                }
                Step::Emit(e) => emit = e.clone(),
            }
        }
        emit
    }
}

fn apply_assign(a: &Assign, unit: &mut TrafficUnit) {
    let m = &mut unit.meta;
    match a {
        Assign::Dip(ip) => {
            let mut f = m.flow;
            f.dip = *ip;
            m.set_flow(f);
        }
        Assign::Dport(p) => {
            let mut f = m.flow;
            f.dport = *p;
            m.set_flow(f);
        }
        Assign::Vlan(v) => {
            if let Some(l2) = m.l2.as_mut() {
                l2.vlan = *v;
            }
        }
        Assign::Host(h) => {
            if let Some(http) = m.http_mut() {
                http.host = h.clone();
            }
        }
        Assign::Header { name, value } => {
            if let Some(http) = m.http_mut() {
                match http.headers.iter_mut().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
                    Some(slot) => slot.1 = value.clone(),
                    None => http.headers.push((name.clone(), value.clone())),
                }
            }
        }
    }
}

/// Result of a PPM parser.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Parsed {
    Ok,
    /// The parser rejected the unit; the given action handles it.
    Fault(ActionRef),
}

/// A protocol processing module.
pub trait Ppm: Send + Sync + fmt::Debug {
    fn id(&self) -> &PpmId;
    fn layer(&self) -> Layer;
    /// Declared actions; every action fired by this PPM is one of these.
    fn actions(&self) -> Vec<ActionRef>;
    fn action_name(&self, a: ActionRef) -> &str;
    /// Parser stage.
    fn parse(&self, unit: &mut TrafficUnit, env: &mut Env) -> Parsed;
    /// Match stage.
    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef;
    /// Action stage.
    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit;
}

/// Parser of a table-driven PPM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParserKind {
    /// No header is consumed; match on existing metadata.
    Passthrough,
    Ethernet,
    Ipv4,
}

/// Generic table-driven PPM: one parser, one exact-match table, and a list
/// of action programs. Used for the L2 vswitch and L3 stages and for
/// user-defined modules.
#[derive(Debug)]
pub struct TablePpm {
    id: PpmId,
    layer: Layer,
    parser: ParserKind,
    table: Arc<MatchTable<CompositeKey, ActionRef>>,
    programs: Vec<ActionProgram>,
    malformed: ActionRef,
}

impl TablePpm {
    /// `programs` must contain the table default and `malformed` actions.
    pub fn new(
        id: impl Into<PpmId>,
        layer: Layer,
        parser: ParserKind,
        table: Arc<MatchTable<CompositeKey, ActionRef>>,
        programs: Vec<ActionProgram>,
        malformed: ActionRef,
    ) -> Self {
        TablePpm {
            id: id.into(),
            layer,
            parser,
            table,
            programs,
            malformed,
        }
    }

    pub fn table(&self) -> &Arc<MatchTable<CompositeKey, ActionRef>> {
        &self.table
    }

    fn program(&self, a: ActionRef) -> Option<&ActionProgram> {
        self.programs.iter().find(|p| p.id == a)
    }
}

impl From<String> for PpmId {
    fn from(s: String) -> Self {
        PpmId(s)
    }
}

impl Ppm for TablePpm {
    fn id(&self) -> &PpmId {
        &self.id
    }

    fn layer(&self) -> Layer {
        self.layer
    }

    fn actions(&self) -> Vec<ActionRef> {
        self.programs.iter().map(|p| p.id).collect()
    }

    fn action_name(&self, a: ActionRef) -> &str {
        self.program(a).map_or("?", |p| p.name.as_str())
    }

    fn parse(&self, unit: &mut TrafficUnit, _env: &mut Env) -> Parsed {
        use crate::model::L2Fields;
        use crate::wire;
        match self.parser {
            ParserKind::Passthrough => Parsed::Ok,
            ParserKind::Ethernet => match wire::parse_eth(&unit.payload) {
                Ok((eth, rest)) => {
                    unit.meta.l2 = Some(L2Fields {
                        dst_mac: eth.dst,
                        src_mac: eth.src,
                        vlan: eth.vlan,
                    });
                    unit.payload = rest.to_vec();
                    unit.promote(UnitKind::Packet);
                    Parsed::Ok
                }
                Err(_) => Parsed::Fault(self.malformed),
            },
            ParserKind::Ipv4 => match wire::parse_ipv4(&unit.payload) {
                Ok((ip, rest)) => {
                    let mut f = unit.meta.flow;
                    f.sip = ip.src;
                    f.dip = ip.dst;
                    f.proto = ip.proto;
                    unit.meta.set_flow(f);
                    unit.payload = rest.to_vec();
                    unit.promote(UnitKind::Segment);
                    Parsed::Ok
                }
                Err(_) => Parsed::Fault(self.malformed),
            },
        }
    }

    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef {
        let key = extract_key(&self.table.key_schema, unit);
        let snap = env.pin_table(&self.table);
        self.table.lookup_in(&snap, &key)
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        match self.program(action) {
            Some(p) => p.run(unit, env),
            None => {
                let _ = unit
                    .meta
                    .set_verdict(Verdict::ToSlowPath(SlowReason::RevisitBudgetExceeded));
                Emit::Next
            }
        }
    }
}

/// Domain-specific accelerator stub: a pass-through transform with a cost.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaStub {
    pub name: String,
    pub cost_ns: u64,
}

/// State shared by all workers of one data plane.
pub struct Shared {
    pub queues: QueueTable,
    pub lb: Mutex<LbState>,
    pub connector: Arc<dyn Connector>,
    pub counters: Arc<Counters>,
}

impl fmt::Debug for Shared {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Shared")
            .field("queues", &self.queues)
            .finish_non_exhaustive()
    }
}

impl Shared {
    pub fn new(connector: Arc<dyn Connector>, counters: Arc<Counters>) -> Self {
        Shared {
            queues: QueueTable::default(),
            lb: Mutex::new(LbState::default()),
            connector,
            counters,
        }
    }
}

/// Execution environment of one processing unit (pipeline stage or worker).
///
/// Table snapshots are pinned per traversal: the first lookup into a table
/// fixes its epoch until the traversal ends.
#[derive(Debug)]
pub struct Env {
    pins: HashMap<u64, Arc<dyn Any + Send + Sync>>,
    pub toe: ToeState,
    pub bodies: BodyPool,
    pub shared: Arc<Shared>,
    /// Extra messages completed by the TOE during the last traversal.
    pub pending: Vec<TrafficUnit>,
    /// DSA invocations of the last traversal.
    pub dsa_calls: Vec<DsaStub>,
    pub revisit_budget: u32,
}

impl Env {
    pub fn new(shared: Arc<Shared>) -> Self {
        Env {
            pins: HashMap::new(),
            toe: ToeState::default(),
            bodies: BodyPool::default(),
            shared,
            pending: Vec::new(),
            dsa_calls: Vec::new(),
            revisit_budget: DEFAULT_REVISIT_BUDGET,
        }
    }

    /// Starts a new traversal: drops pinned snapshots.
    pub fn begin_traversal(&mut self) {
        self.pins.clear();
        self.dsa_calls.clear();
    }

    pub fn pin<T: Send + Sync + 'static>(&mut self, p: &Published<T>) -> Arc<Versioned<T>> {
        let any = self
            .pins
            .entry(p.id())
            .or_insert_with(|| p.load() as Arc<dyn Any + Send + Sync>)
            .clone();
        any.downcast::<Versioned<T>>()
            .expect("table id maps to a single value type")
    }

    pub fn pin_table<K, V>(&mut self, t: &MatchTable<K, V>) -> TableSnapshot<K, V>
    where
        K: Eq + Hash + Clone + Send + Sync + 'static,
        V: Clone + Send + Sync + 'static,
    {
        self.pin(t.published())
    }

    /// Epochs pinned so far in the current traversal, keyed by table id.
    pub fn pinned_tables(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.pins.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl ChainSpec {
    /// Chain whose edges connect consecutive nodes.
    pub fn linear<S: AsRef<str>>(nodes: &[S]) -> Self {
        let nodes: Vec<String> = nodes.iter().map(|s| s.as_ref().to_owned()).collect();
        let edges = nodes
            .windows(2)
            .map(|w| (w[0].clone(), w[1].clone()))
            .collect();
        ChainSpec { nodes, edges }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("unknown PPM {0:?}")]
    UnknownPpm(String),
    #[error("PPM {0:?} listed twice")]
    DuplicatePpm(String),
    #[error("edge {from:?} ({from_layer:?}) -> {to:?} ({to_layer:?}) skips a layer")]
    LayerAdjacencyViolation {
        from: String,
        from_layer: Layer,
        to: String,
        to_layer: Layer,
    },
    #[error("cycle through {0:?}")]
    CycleDetected(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("unit kind {kind:?} cannot enter a chain starting at {layer:?}")]
    IncompatibleUnit { kind: UnitKind, layer: Layer },
    #[error("start index {0} beyond chain length")]
    StartOutOfRange(usize),
}

/// Registry of available PPMs and DSA stubs.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    ppms: BTreeMap<String, Arc<dyn Ppm>>,
    dsas: BTreeMap<String, DsaStub>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, ppm: Arc<dyn Ppm>) {
        self.ppms.insert(ppm.id().0.clone(), ppm);
    }

    pub fn register_dsa(&mut self, dsa: DsaStub) {
        self.dsas.insert(dsa.name.clone(), dsa);
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Ppm>> {
        self.ppms.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ppms.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub ppm: PpmId,
    pub action: ActionRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub unit: TrafficUnit,
    pub trace: Vec<TraceEntry>,
}

/// Immutable compiled chain.
#[derive(Debug, Clone)]
pub struct ExecutableChain {
    nodes: Vec<Arc<dyn Ppm>>,
    dsas: BTreeMap<String, DsaStub>,
}

/// Validates `spec` against `registry` and orders it topologically.
pub fn compile_chain(spec: &ChainSpec, registry: &Registry) -> Result<ExecutableChain, ChainError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut nodes = Vec::with_capacity(spec.nodes.len());
    for (i, n) in spec.nodes.iter().enumerate() {
        let ppm = registry
            .get(n)
            .ok_or_else(|| ChainError::UnknownPpm(n.clone()))?;
        if index.insert(n.as_str(), i).is_some() {
            return Err(ChainError::DuplicatePpm(n.clone()));
        }
        nodes.push(ppm.clone());
    }
    let layer_violation = |a: usize, b: usize| ChainError::LayerAdjacencyViolation {
        from: spec.nodes[a].clone(),
        from_layer: nodes[a].layer(),
        to: spec.nodes[b].clone(),
        to_layer: nodes[b].layer(),
    };

    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut indeg = vec![0usize; nodes.len()];
    for (from, to) in &spec.edges {
        let a = *index
            .get(from.as_str())
            .ok_or_else(|| ChainError::UnknownPpm(from.clone()))?;
        let b = *index
            .get(to.as_str())
            .ok_or_else(|| ChainError::UnknownPpm(to.clone()))?;
        if a == b {
            continue;
        }
        if !nodes[a].layer().adjacent(nodes[b].layer()) {
            return Err(layer_violation(a, b));
        }
        succ[a].push(b);
        indeg[b] += 1;
    }

    // Kahn's algorithm; ties resolved by listing order.
    let mut order = Vec::with_capacity(nodes.len());
    let mut ready: std::collections::BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indeg[i] == 0).collect();
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &succ[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| !order.contains(i)).unwrap_or(0);
        return Err(ChainError::CycleDetected(spec.nodes[stuck].clone()));
    }
    // Units flow between consecutive nodes, so those must be adjacent too.
    for w in order.windows(2) {
        if !nodes[w[0]].layer().adjacent(nodes[w[1]].layer()) {
            return Err(layer_violation(w[0], w[1]));
        }
    }
    Ok(ExecutableChain {
        nodes: order.into_iter().map(|i| nodes[i].clone()).collect(),
        dsas: registry.dsas.clone(),
    })
}

impl ExecutableChain {
    pub fn identity() -> Self {
        ExecutableChain {
            nodes: Vec::new(),
            dsas: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Arc<dyn Ppm>] {
        &self.nodes
    }

    pub fn order(&self) -> Vec<PpmId> {
        self.nodes.iter().map(|n| n.id().clone()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id().0 == id)
    }

    /// Sub-chain of the nodes in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ExecutableChain {
        ExecutableChain {
            nodes: self.nodes[range].to_vec(),
            dsas: self.dsas.clone(),
        }
    }

    /// Index of the first L7 node, or `len()` when none.
    pub fn l7_boundary(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| n.layer() == Layer::L7)
            .unwrap_or(self.nodes.len())
    }

    pub fn execute(&self, unit: TrafficUnit, env: &mut Env) -> Result<Execution, ExecError> {
        self.execute_from(0, unit, env, &mut |_, _| {})
    }

    /// Runs nodes `start..` on `unit`. `observer` is called after every
    /// node with the node index and the unit as it leaves the node.
    pub fn execute_from(
        &self,
        start: usize,
        mut unit: TrafficUnit,
        env: &mut Env,
        observer: &mut dyn FnMut(usize, &TrafficUnit),
    ) -> Result<Execution, ExecError> {
        if start > self.nodes.len() {
            return Err(ExecError::StartOutOfRange(start));
        }
        if let Some(first) = self.nodes.get(start) {
            let want = first.layer().input_kind();
            if unit.kind() > want {
                return Err(ExecError::IncompatibleUnit {
                    kind: unit.kind(),
                    layer: first.layer(),
                });
            }
        }
        env.begin_traversal();
        let mut trace = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().skip(start) {
            if unit.meta.verdict().is_terminal() {
                break;
            }
            let mut action = match node.parse(&mut unit, env) {
                Parsed::Ok => node.select(&unit, env),
                Parsed::Fault(a) => a,
            };
            let mut visits = 0u32;
            loop {
                trace.push(TraceEntry {
                    ppm: node.id().clone(),
                    action,
                });
                match node.apply(action, &mut unit, env) {
                    Emit::Next => break,
                    Emit::Dsa(name) => {
                        if let Some(d) = self.dsas.get(&name) {
                            env.dsa_calls.push(d.clone());
                        }
                        break;
                    }
                    Emit::Rematch => {
                        visits += 1;
                        if visits > env.revisit_budget {
                            let _ = unit
                                .meta
                                .set_verdict(Verdict::ToSlowPath(SlowReason::RevisitBudgetExceeded));
                            break;
                        }
                        if unit.meta.verdict().is_terminal() {
                            break;
                        }
                        action = node.select(&unit, env);
                    }
                }
                if unit.meta.verdict().is_terminal() {
                    break;
                }
            }
            observer(idx, &unit);
        }
        Ok(Execution { unit, trace })
    }
}

#[cfg(test)]
mod tests {
    use std::thread;

    use super::*;
    use crate::l7::SeqConnector;
    use crate::model::{DropReason, FlowKey, Metadata, Proto};

    fn env() -> Env {
        Env::new(Arc::new(Shared::new(
            Arc::new(SeqConnector::default()),
            Arc::new(Counters::new()),
        )))
    }

    /// Minimal PPM over a passthrough table keyed on dport.
    fn port_ppm(id: &str, layer: Layer, owner: WriterId) -> (Arc<TablePpm>, Arc<MatchTable<CompositeKey, ActionRef>>) {
        let table = Arc::new(MatchTable::new(
            format!("{id}.ports"),
            owner,
            vec![Field::Dport],
            ActionRef(0),
        ));
        let programs = vec![
            ActionProgram::new(
                0,
                "to_slow_path",
                vec![Step::SetVerdict(Verdict::ToSlowPath(SlowReason::NewConnection))],
            ),
            ActionProgram::new(1, "count", vec![Step::Count(format!("{id}.hits"))]),
            ActionProgram::new(
                2,
                "drop",
                vec![Step::SetVerdict(Verdict::Drop(DropReason::Filtered))],
            ),
            ActionProgram::new(3, "loop", vec![Step::Emit(Emit::Rematch)]),
            ActionProgram::new(
                4,
                "rewrite",
                vec![Step::Set(Assign::Dport(81)), Step::Emit(Emit::Rematch)],
            ),
        ];
        let ppm = Arc::new(TablePpm::new(
            id,
            layer,
            ParserKind::Passthrough,
            table.clone(),
            programs,
            ActionRef(2),
        ));
        (ppm, table)
    }

    fn segment(dport: u16) -> TrafficUnit {
        let flow = FlowKey::new(
            Ipv4Addr::new(1, 1, 1, 1),
            40000,
            Ipv4Addr::new(10, 0, 0, 2),
            dport,
            Proto::Tcp,
        );
        TrafficUnit::new(UnitKind::Segment, Metadata::new(flow), b"data".to_vec())
    }

    fn key(port: u16) -> CompositeKey {
        vec![FieldValue::U16(port)]
    }

    #[test]
    fn layer_adjacency() {
        assert!(Layer::L2.adjacent(Layer::L3));
        assert!(Layer::L4.adjacent(Layer::L7));
        assert!(Layer::L7.adjacent(Layer::L7));
        assert!(!Layer::L2.adjacent(Layer::L7));
        assert!(!Layer::L3.adjacent(Layer::L7));
    }

    #[test]
    fn identity_chain_passes_through() {
        let chain = compile_chain(&ChainSpec::default(), &Registry::new()).unwrap();
        let u = segment(80);
        let ex = chain.execute(u.clone(), &mut env()).unwrap();
        assert_eq!(ex.unit, u);
        assert!(ex.trace.is_empty());
    }

    #[test]
    fn compile_rejects_bad_specs() {
        let mut reg = Registry::new();
        let (l2, _) = port_ppm("l2", Layer::L2, WriterId::OvsController);
        let (l3, _) = port_ppm("l3", Layer::L3, WriterId::OvsController);
        let (l7, _) = port_ppm("l7", Layer::L7, WriterId::MessageController);
        reg.register(l2);
        reg.register(l3);
        reg.register(l7);
        assert_eq!(
            compile_chain(&ChainSpec::linear(&["l2", "nope"]), &reg).unwrap_err(),
            ChainError::UnknownPpm("nope".into())
        );
        assert!(matches!(
            compile_chain(&ChainSpec::linear(&["l2", "l7"]), &reg),
            Err(ChainError::LayerAdjacencyViolation { .. })
        ));
        let cyc = ChainSpec {
            nodes: vec!["l2".into(), "l3".into()],
            edges: vec![("l2".into(), "l3".into()), ("l3".into(), "l2".into())],
        };
        assert_eq!(
            compile_chain(&cyc, &reg).unwrap_err(),
            ChainError::CycleDetected("l2".into())
        );
        let self_loop = ChainSpec {
            nodes: vec!["l2".into(), "l3".into()],
            edges: vec![("l2".into(), "l2".into()), ("l2".into(), "l3".into())],
        };
        assert!(compile_chain(&self_loop, &reg).is_ok());
    }

    #[test]
    fn topological_order_follows_edges() {
        let mut reg = Registry::new();
        for id in ["a", "b", "c"] {
            reg.register(port_ppm(id, Layer::L7, WriterId::MessageController).0);
        }
        let spec = ChainSpec {
            nodes: vec!["a".into(), "b".into(), "c".into()],
            edges: vec![("c".into(), "a".into()), ("a".into(), "b".into())],
        };
        let chain = compile_chain(&spec, &reg).unwrap();
        assert_eq!(chain.order(), vec![PpmId::from("c"), "a".into(), "b".into()]);
    }

    #[test]
    fn miss_takes_default_action() {
        let (ppm, _) = port_ppm("p", Layer::L4, WriterId::ConnController);
        let mut reg = Registry::new();
        reg.register(ppm);
        let chain = compile_chain(&ChainSpec::linear(&["p"]), &reg).unwrap();
        let ex = chain.execute(segment(80), &mut env()).unwrap();
        assert_eq!(
            ex.unit.meta.verdict(),
            Verdict::ToSlowPath(SlowReason::NewConnection)
        );
        assert_eq!(ex.trace.len(), 1);
        assert_eq!(ex.trace[0].action, ActionRef(0));
    }

    #[test]
    fn terminal_verdict_stops_chain() {
        let (a, ta) = port_ppm("a", Layer::L4, WriterId::ConnController);
        let (b, _) = port_ppm("b", Layer::L4, WriterId::ConnController);
        ta.publish(WriterId::ConnController, Delta::default().add(key(80), ActionRef(2)))
            .unwrap();
        let mut reg = Registry::new();
        reg.register(a);
        reg.register(b);
        let chain = compile_chain(&ChainSpec::linear(&["a", "b"]), &reg).unwrap();
        let ex = chain.execute(segment(80), &mut env()).unwrap();
        assert_eq!(ex.unit.meta.verdict(), Verdict::Drop(DropReason::Filtered));
        assert!(ex.trace.iter().all(|t| t.ppm.0 == "a"));
    }

    #[test]
    fn rematch_is_bounded() {
        let (p, t) = port_ppm("p", Layer::L4, WriterId::ConnController);
        t.publish(WriterId::ConnController, Delta::default().add(key(80), ActionRef(3)))
            .unwrap();
        let mut reg = Registry::new();
        reg.register(p);
        let chain = compile_chain(&ChainSpec::linear(&["p"]), &reg).unwrap();
        let ex = chain.execute(segment(80), &mut env()).unwrap();
        assert_eq!(
            ex.unit.meta.verdict(),
            Verdict::ToSlowPath(SlowReason::RevisitBudgetExceeded)
        );
        assert_eq!(ex.trace.len(), DEFAULT_REVISIT_BUDGET as usize + 1);
    }

    #[test]
    fn rematch_sees_rewritten_metadata() {
        let (p, t) = port_ppm("p", Layer::L4, WriterId::ConnController);
        t.publish(
            WriterId::ConnController,
            Delta::default()
                .add(key(80), ActionRef(4))
                .add(key(81), ActionRef(1)),
        )
        .unwrap();
        let mut reg = Registry::new();
        reg.register(p);
        let chain = compile_chain(&ChainSpec::linear(&["p"]), &reg).unwrap();
        let mut e = env();
        let ex = chain.execute(segment(80), &mut e).unwrap();
        let actions: Vec<u16> = ex.trace.iter().map(|t| t.action.0).collect();
        assert_eq!(actions, vec![4, 1]);
        assert_eq!(ex.unit.meta.flow.dport, 81);
        assert_eq!(e.shared.counters.get("p.hits"), 1);
    }

    #[test]
    fn publish_and_remove() {
        let t: MatchTable<u32, &'static str> =
            MatchTable::new("t", WriterId::ConnController, vec![], "default");
        let e1 = t
            .publish(WriterId::ConnController, Delta::default().add(1, "a1"))
            .unwrap();
        assert_eq!(e1, 1);
        assert_eq!(t.lookup(&1), "a1");
        let e2 = t
            .publish(WriterId::ConnController, Delta::default().remove(1))
            .unwrap();
        assert_eq!(e2, 2);
        assert_eq!(t.lookup(&1), "default");
    }

    #[test]
    fn only_owner_publishes() {
        let t: MatchTable<u32, u32> = MatchTable::new("t", WriterId::OvsController, vec![], 0);
        assert!(matches!(
            t.publish(WriterId::MessageController, Delta::default().add(1, 1)),
            Err(TableError::NotOwner { .. })
        ));
        assert_eq!(t.epoch(), 0);
        let snap = t.snapshot();
        assert_eq!(snap.writer, None);
        t.publish(WriterId::OvsController, Delta::default()).unwrap();
        assert_eq!(t.snapshot().writer, Some(WriterId::OvsController));
    }

    #[test]
    fn republishing_same_delta_keeps_content() {
        let t: MatchTable<u32, u32> = MatchTable::new("t", WriterId::OvsController, vec![], 0);
        let d = Delta::default().add(1, 10).add(2, 20);
        t.publish(WriterId::OvsController, d.clone()).unwrap();
        let a = t.snapshot();
        t.publish(WriterId::OvsController, d).unwrap();
        let b = t.snapshot();
        assert_eq!(a.value, b.value);
        assert_eq!(b.epoch, a.epoch + 1);
    }

    /// Every entry stores the epoch that wrote it; a lookup must see all
    /// entries tagged with one epoch.
    #[test]
    fn concurrent_lookups_never_mix_epochs() {
        const KEYS: u32 = 64;
        let t: Arc<MatchTable<u32, u64>> =
            Arc::new(MatchTable::new("t", WriterId::ConnController, vec![], u64::MAX));
        let full = |epoch: u64| (0..KEYS).map(|k| (k, epoch)).collect::<HashMap<_, _>>();
        t.replace(WriterId::ConnController, full(1)).unwrap();
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let t = t.clone();
                thread::spawn(move || {
                    let mut seen = std::collections::BTreeSet::new();
                    for _ in 0..2000 {
                        let snap = t.snapshot();
                        let tags: std::collections::BTreeSet<u64> =
                            (0..KEYS).map(|k| t.lookup_in(&snap, &k)).collect();
                        assert_eq!(tags.len(), 1, "mixed epochs {tags:?}");
                        let tag = *tags.iter().next().unwrap();
                        assert_eq!(tag, snap.epoch);
                        seen.insert(tag);
                    }
                    seen
                })
            })
            .collect();
        for _ in 0..200 {
            let next = t.epoch() + 1;
            t.replace(WriterId::ConnController, full(next)).unwrap();
        }
        for r in readers {
            assert!(!r.join().unwrap().is_empty());
        }
    }

    #[test]
    fn traversal_pins_epoch() {
        let (a, ta) = port_ppm("a", Layer::L4, WriterId::ConnController);
        let (b, _) = port_ppm("b", Layer::L4, WriterId::ConnController);
        // Both nodes share table "a" through a second PPM bound to it.
        let b_shared = Arc::new(TablePpm::new(
            "b2",
            Layer::L4,
            ParserKind::Passthrough,
            ta.clone(),
            vec![
                ActionProgram::new(
                    0,
                    "to_slow_path",
                    vec![Step::SetVerdict(Verdict::ToSlowPath(SlowReason::NewConnection))],
                ),
                ActionProgram::new(1, "count", vec![]),
            ],
            ActionRef(0),
        ));
        drop(b);
        ta.publish(WriterId::ConnController, Delta::default().add(key(80), ActionRef(1)))
            .unwrap();
        let mut reg = Registry::new();
        reg.register(a);
        reg.register(b_shared);
        let chain = compile_chain(&ChainSpec::linear(&["a", "b2"]), &reg).unwrap();
        let mut e = env();
        let ta2 = ta.clone();
        let ex = chain
            .execute_from(0, segment(80), &mut e, &mut |idx, _| {
                if idx == 0 {
                    ta2.publish(WriterId::ConnController, Delta::default().remove(key(80)))
                        .unwrap();
                }
            })
            .unwrap();
        // Second node still sees the epoch-1 entry.
        assert_eq!(ex.unit.meta.verdict(), Verdict::Continue);
        assert_eq!(ex.trace.len(), 2);
        // A fresh traversal sees the removal.
        let ex2 = chain.execute(segment(80), &mut e).unwrap();
        assert_eq!(
            ex2.unit.meta.verdict(),
            Verdict::ToSlowPath(SlowReason::NewConnection)
        );
    }
}
