//! Hierarchical data plane: L2/L3 table stages, the TCP offload engine
//! that turns segments into messages, and the L7 worker pool.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{bounded, Sender};
use serde::{Deserialize, Serialize};

use crate::http;
use crate::match_action::{
    ActionProgram, ActionRef, CompositeKey, DsaStub, Emit, Env, ExecutableChain, Field, Layer,
    MatchTable, Parsed, ParserKind, Ppm, PpmId, Shared, Step, TablePpm, TraceEntry, WriterId,
};
use crate::model::{
    DropReason, FlowKey, Metadata, Proto, QueueId, SegmentFields, SlowReason, TrafficUnit,
    UnitKind, Verdict,
};
use crate::wire;

pub const DEFAULT_REORDER_SEGMENTS: usize = 64;
pub const DEFAULT_RUN_QUEUE_DEPTH: usize = 1024;

/// How the TOE cuts a byte stream into messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framing {
    Http,
    /// 4-byte big-endian length, then the body.
    LengthPrefix,
    /// Every in-order chunk is a message.
    Stream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcpState {
    Established,
    FinReceived,
}

#[derive(Debug)]
pub struct ToeConn {
    pub state: TcpState,
    pub framing: Framing,
    next_seq: u32,
    stream: Vec<u8>,
    ooo: BTreeMap<u32, (Vec<u8>, bool)>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ToeError {
    #[error("no connection for {0}")]
    ConnectionUnknown(FlowKey),
    #[error("segment outside the reorder window")]
    OutOfWindow,
}

/// Result of feeding one segment to the TOE.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct ToeOutput {
    pub messages: Vec<Vec<u8>>,
    pub duplicate: bool,
    pub closed: bool,
}

/// Per-connection reassembly state of the TOE.
#[derive(Debug)]
pub struct ToeState {
    conns: HashMap<FlowKey, ToeConn>,
    pub reorder_cap: usize,
    pub duplicates: u64,
    pub out_of_window: u64,
    /// Connections finished since the last drain.
    pub closed: Vec<FlowKey>,
}

impl Default for ToeState {
    fn default() -> Self {
        ToeState {
            conns: HashMap::new(),
            reorder_cap: DEFAULT_REORDER_SEGMENTS,
            duplicates: 0,
            out_of_window: 0,
            closed: Vec::new(),
        }
    }
}

fn seq_offset(seq: u32, base: u32) -> i64 {
    i64::from(seq.wrapping_sub(base) as i32)
}

impl ToeState {
    /// Opens a connection after a SYN carrying `isn`. Re-opening an
    /// existing connection is a no-op.
    pub fn open(&mut self, flow: FlowKey, isn: u32, framing: Framing) {
        self.conns.entry(flow).or_insert(ToeConn {
            state: TcpState::Established,
            framing,
            next_seq: isn.wrapping_add(1),
            stream: Vec::new(),
            ooo: BTreeMap::new(),
        });
    }

    pub fn contains(&self, flow: &FlowKey) -> bool {
        self.conns.contains_key(flow)
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }

    pub fn close(&mut self, flow: &FlowKey) -> bool {
        self.conns.remove(flow).is_some()
    }

    /// Feeds one segment. Bytes reach the framer exactly once and in order.
    pub fn deliver(&mut self, flow: &FlowKey, seq: u32, fin: bool, data: &[u8]) -> Result<ToeOutput, ToeError> {
        let cap = self.reorder_cap;
        let conn = self
            .conns
            .get_mut(flow)
            .ok_or(ToeError::ConnectionUnknown(*flow))?;
        let mut out = ToeOutput::default();
        let off = seq_offset(seq, conn.next_seq);
        let end = off + data.len() as i64 + i64::from(fin);
        if end <= 0 && !(data.is_empty() && !fin && off == 0) {
            out.duplicate = true;
        } else if off > 0 {
            if conn.ooo.contains_key(&seq) {
                out.duplicate = true;
            } else if conn.ooo.len() >= cap {
                self.out_of_window += 1;
                return Err(ToeError::OutOfWindow);
            } else {
                conn.ooo.insert(seq, (data.to_vec(), fin));
            }
        } else {
            // In order, possibly overlapping already delivered bytes.
            let skip = (-off) as usize;
            accept(conn, &data[skip.min(data.len())..], fin);
            while let Some((&s, _)) = conn.ooo.first_key_value() {
                let o = seq_offset(s, conn.next_seq);
                if o > 0 {
                    break;
                }
                let (d, f) = conn.ooo.remove(&s).expect("key just observed");
                let skip = (-o) as usize;
                if skip < d.len() || (f && skip == d.len()) {
                    accept(conn, &d[skip.min(d.len())..], f);
                }
            }
        }
        if out.duplicate {
            self.duplicates += 1;
        }
        out.messages = frame(conn);
        if conn.state == TcpState::FinReceived {
            if !conn.stream.is_empty() {
                out.messages.push(std::mem::take(&mut conn.stream));
            }
            self.conns.remove(flow);
            self.closed.push(*flow);
            out.closed = true;
        }
        Ok(out)
    }
}

fn accept(conn: &mut ToeConn, data: &[u8], fin: bool) {
    conn.stream.extend_from_slice(data);
    conn.next_seq = conn.next_seq.wrapping_add(data.len() as u32);
    if fin {
        conn.next_seq = conn.next_seq.wrapping_add(1);
        conn.state = TcpState::FinReceived;
    }
}

fn frame(conn: &mut ToeConn) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    match conn.framing {
        Framing::Stream => {
            if !conn.stream.is_empty() {
                out.push(std::mem::take(&mut conn.stream));
            }
        }
        Framing::LengthPrefix => loop {
            if conn.stream.len() < 4 {
                break;
            }
            let n = u32::from_be_bytes(conn.stream[..4].try_into().expect("4 bytes")) as usize;
            if conn.stream.len() < 4 + n {
                break;
            }
            let body = conn.stream[4..4 + n].to_vec();
            conn.stream.drain(..4 + n);
            out.push(body);
        },
        Framing::Http => loop {
            match http::message_len(&conn.stream) {
                Ok(Some(n)) => out.push(conn.stream.drain(..n).collect()),
                Ok(None) => break,
                // Hand the garbage to the parser so it faults visibly.
                Err(_) => {
                    out.push(std::mem::take(&mut conn.stream));
                    break;
                }
            }
        },
    }
    out
}

/// L4 table entry for an established flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum L4Entry {
    Miss,
    /// Reassemble HTTP messages and hand them to the L7 chain.
    ToL7,
    /// Forward the byte stream to a queue below L7.
    Forward(QueueId),
}

pub type L4Table = MatchTable<FlowKey, L4Entry>;

pub fn new_l4_table() -> L4Table {
    MatchTable::new(
        "l4.flows",
        WriterId::ConnController,
        vec![Field::Sip, Field::Sport, Field::Dip, Field::Dport, Field::Proto],
        L4Entry::Miss,
    )
}

pub mod toe_actions {
    use crate::match_action::ActionRef;
    pub const NEW_CONNECTION: ActionRef = ActionRef(0);
    pub const OPEN: ActionRef = ActionRef(1);
    pub const TO_L7: ActionRef = ActionRef(2);
    pub const FORWARD: ActionRef = ActionRef(3);
    pub const UNKNOWN: ActionRef = ActionRef(4);
    pub const MALFORMED: ActionRef = ActionRef(5);
    pub(crate) const NAMES: [&str; 6] = [
        "new_connection",
        "open",
        "to_l7",
        "forward",
        "connection_unknown",
        "malformed",
    ];
}

/// The TCP offload engine as an L4 processing module.
#[derive(Debug)]
pub struct ToePpm {
    id: PpmId,
    table: Arc<L4Table>,
}

impl ToePpm {
    pub fn new(table: Arc<L4Table>) -> Self {
        ToePpm {
            id: PpmId::new("toe"),
            table,
        }
    }

    fn emit(&self, unit: &mut TrafficUnit, env: &mut Env, out: ToeOutput, queue: Option<QueueId>) {
        if out.duplicate {
            env.shared.counters.incr("fast_path.toe.duplicate");
        }
        let (flow, l2, arrival) = (unit.meta.flow, unit.meta.l2, unit.arrival_time);
        let mut msgs = out.messages.into_iter().map(|payload| {
            let mut meta = Metadata::new(flow);
            meta.l2 = l2;
            let mut m = TrafficUnit::message(meta, payload);
            m.arrival_time = arrival;
            if let Some(q) = queue {
                let _ = m.meta.bind_queue(q);
                let _ = m.meta.set_verdict(Verdict::Deliver);
            }
            m
        });
        match msgs.next() {
            Some(first) => {
                *unit = first;
                env.pending.extend(msgs);
            }
            None => {
                let _ = unit.meta.set_verdict(Verdict::Held);
            }
        }
    }
}

impl Ppm for ToePpm {
    fn id(&self) -> &PpmId {
        &self.id
    }
    fn layer(&self) -> Layer {
        Layer::L4
    }
    fn actions(&self) -> Vec<ActionRef> {
        (0..toe_actions::NAMES.len() as u16).map(ActionRef).collect()
    }
    fn action_name(&self, a: ActionRef) -> &str {
        toe_actions::NAMES.get(usize::from(a.0)).copied().unwrap_or("?")
    }

    fn parse(&self, unit: &mut TrafficUnit, _env: &mut Env) -> Parsed {
        if unit.kind() != UnitKind::Segment {
            return Parsed::Fault(toe_actions::MALFORMED);
        }
        let mut f = unit.meta.flow;
        let rest = match f.proto {
            Proto::Tcp => match wire::parse_tcp(&unit.payload) {
                Ok((h, rest)) => {
                    f.sport = h.sport;
                    f.dport = h.dport;
                    unit.meta.segment = Some(SegmentFields {
                        seq: h.seq,
                        syn: h.syn,
                        fin: h.fin,
                    });
                    rest.to_vec()
                }
                Err(_) => return Parsed::Fault(toe_actions::MALFORMED),
            },
            Proto::Udp => match wire::parse_udp(&unit.payload) {
                Ok((s, d, rest)) => {
                    f.sport = s;
                    f.dport = d;
                    rest.to_vec()
                }
                Err(_) => return Parsed::Fault(toe_actions::MALFORMED),
            },
        };
        unit.meta.set_flow(f);
        unit.payload = rest;
        Parsed::Ok
    }

    fn select(&self, unit: &TrafficUnit, env: &mut Env) -> ActionRef {
        let snap = env.pin_table(&self.table);
        let entry = self.table.lookup_in(&snap, &unit.meta.flow);
        let seg = unit.meta.segment;
        let syn = seg.is_some_and(|s| s.syn);
        match entry {
            L4Entry::Miss if syn || unit.meta.flow.proto == Proto::Udp => toe_actions::NEW_CONNECTION,
            L4Entry::Miss => toe_actions::UNKNOWN,
            _ if syn => toe_actions::OPEN,
            _ if seg.is_some() && !env.toe.contains(&unit.meta.flow) => toe_actions::UNKNOWN,
            L4Entry::ToL7 => toe_actions::TO_L7,
            L4Entry::Forward(_) => toe_actions::FORWARD,
        }
    }

    fn apply(&self, action: ActionRef, unit: &mut TrafficUnit, env: &mut Env) -> Emit {
        let flow = unit.meta.flow;
        let seg = unit.meta.segment.unwrap_or_default();
        let v = match action {
            toe_actions::MALFORMED => {
                env.shared.counters.incr("fast_path.drop.malformed_frame");
                Some(Verdict::Drop(DropReason::MalformedFrame))
            }
            toe_actions::NEW_CONNECTION => Some(Verdict::ToSlowPath(SlowReason::NewConnection)),
            toe_actions::UNKNOWN => Some(Verdict::ToSlowPath(SlowReason::ConnectionUnknown)),
            toe_actions::OPEN => {
                let framing = match self.table.lookup_in(&env.pin_table(&self.table), &flow) {
                    L4Entry::Forward(_) => Framing::Stream,
                    _ => Framing::Http,
                };
                env.toe.open(flow, seg.seq, framing);
                Some(Verdict::Held)
            }
            toe_actions::TO_L7 | toe_actions::FORWARD => {
                let queue = match self.table.lookup_in(&env.pin_table(&self.table), &flow) {
                    L4Entry::Forward(q) => Some(q),
                    _ => None,
                };
                if flow.proto == Proto::Udp {
                    let payload = std::mem::take(&mut unit.payload);
                    self.emit(unit, env, ToeOutput { messages: vec![payload], ..Default::default() }, queue);
                    None
                } else {
                    let payload = std::mem::take(&mut unit.payload);
                    match env.toe.deliver(&flow, seg.seq, seg.fin, &payload) {
                        Ok(out) => {
                            self.emit(unit, env, out, queue);
                            None
                        }
                        Err(ToeError::OutOfWindow) => {
                            env.shared.counters.incr("fast_path.toe.out_of_window");
                            Some(Verdict::Drop(DropReason::OutOfWindow))
                        }
                        Err(ToeError::ConnectionUnknown(_)) => {
                            Some(Verdict::ToSlowPath(SlowReason::ConnectionUnknown))
                        }
                    }
                }
            }
            _ => None,
        };
        if let Some(v) = v {
            let _ = unit.meta.set_verdict(v);
        }
        Emit::Next
    }
}

/// L2/L3 tables are keyed on a single field.
pub type KeyTable = MatchTable<CompositeKey, ActionRef>;

pub const TABLE_MISS: ActionRef = ActionRef(0);
pub const TABLE_FORWARD: ActionRef = ActionRef(1);
pub const TABLE_MALFORMED: ActionRef = ActionRef(2);

fn lower_programs(miss: SlowReason, layer: &str) -> Vec<ActionProgram> {
    vec![
        ActionProgram::new(0, "to_slow_path", vec![Step::SetVerdict(Verdict::ToSlowPath(miss))]),
        ActionProgram::new(1, "forward", vec![]),
        ActionProgram::new(
            2,
            "malformed",
            vec![
                Step::Count(format!("fast_path.{layer}.malformed")),
                Step::SetVerdict(Verdict::Drop(DropReason::MalformedFrame)),
            ],
        ),
    ]
}

pub fn new_l2_table() -> KeyTable {
    MatchTable::new("l2.mac", WriterId::OvsController, vec![Field::DstMac], TABLE_MISS)
}

pub fn new_l3_table() -> KeyTable {
    MatchTable::new("l3.hosts", WriterId::ConnController, vec![Field::Dip], TABLE_MISS)
}

/// Destination-MAC switch; VLAN tags pass through in metadata.
pub fn vswitch_ppm(table: Arc<KeyTable>) -> TablePpm {
    TablePpm::new(
        "vswitch",
        Layer::L2,
        ParserKind::Ethernet,
        table,
        lower_programs(SlowReason::UnknownMac, "l2"),
        TABLE_MALFORMED,
    )
}

pub fn ipv4_ppm(table: Arc<KeyTable>) -> TablePpm {
    TablePpm::new(
        "ipv4",
        Layer::L3,
        ParserKind::Ipv4,
        table,
        lower_programs(SlowReason::UnknownHost, "l3"),
        TABLE_MALFORMED,
    )
}

/// Worker index for a flow; both directions of a connection map alike.
pub fn worker_for(flow: &FlowKey, n_workers: usize) -> usize {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    flow.hash(&mut h);
    (h.finish() % n_workers.max(1) as u64) as usize
}

/// What a worker produced for one message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolOutput {
    pub worker: usize,
    pub seq: u64,
    pub unit: TrafficUnit,
    pub trace: Vec<TraceEntry>,
    pub dsa_calls: Vec<DsaStub>,
}

fn run_l7(chain: &ExecutableChain, env: &mut Env, worker: usize, seq: u64, msg: TrafficUnit) -> PoolOutput {
    match chain.execute(msg.clone(), env) {
        Ok(ex) => PoolOutput {
            worker,
            seq,
            unit: ex.unit,
            trace: ex.trace,
            dsa_calls: std::mem::take(&mut env.dsa_calls),
        },
        Err(_) => {
            let mut unit = msg;
            let _ = unit.meta.set_verdict(Verdict::Drop(DropReason::MalformedFrame));
            PoolOutput {
                worker,
                seq,
                unit,
                trace: Vec::new(),
                dsa_calls: Vec::new(),
            }
        }
    }
}

pub type Egress = Arc<dyn Fn(PoolOutput) + Send + Sync>;

/// L7 worker pool. Messages of one flow always go to the same worker, so
/// per-flow order holds without cross-worker locking. Each worker has a
/// bounded run queue; a full queue blocks the submitter.
pub struct WorkerPool {
    senders: Vec<Sender<(u64, TrafficUnit)>>,
    handles: Vec<thread::JoinHandle<()>>,
    next_seq: u64,
}

impl WorkerPool {
    pub fn spawn(
        chain: Arc<ExecutableChain>,
        shared: Arc<Shared>,
        n_workers: usize,
        depth: usize,
        egress: Egress,
    ) -> Self {
        let n = n_workers.max(1);
        let mut senders = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for w in 0..n {
            let (tx, rx) = bounded::<(u64, TrafficUnit)>(depth.max(1));
            let chain = chain.clone();
            let shared = shared.clone();
            let egress = egress.clone();
            handles.push(
                thread::Builder::new()
                    .name(format!("l7-worker-{w}"))
                    .spawn(move || {
                        let mut env = Env::new(shared);
                        for (seq, msg) in rx {
                            egress(run_l7(&chain, &mut env, w, seq, msg));
                        }
                    })
                    .expect("spawn worker thread"),
            );
            senders.push(tx);
        }
        WorkerPool {
            senders,
            handles,
            next_seq: 0,
        }
    }

    pub fn n_workers(&self) -> usize {
        self.senders.len()
    }

    /// Blocks while the target worker's run queue is full.
    pub fn submit(&mut self, msg: TrafficUnit) {
        let w = worker_for(&msg.meta.flow, self.senders.len());
        self.next_seq += 1;
        self.senders[w]
            .send((self.next_seq, msg))
            .expect("worker alive while pool exists");
    }

    /// Drains all queues and joins the workers.
    pub fn shutdown(self) {
        drop(self.senders);
        for h in self.handles {
            let _ = h.join();
        }
    }
}

/// Single-threaded pool with the same affinity rule, for deterministic runs.
#[derive(Debug)]
pub struct InlinePool {
    chain: Arc<ExecutableChain>,
    envs: Vec<Env>,
    next_seq: u64,
}

impl InlinePool {
    pub fn new(chain: Arc<ExecutableChain>, shared: Arc<Shared>, n_workers: usize) -> Self {
        InlinePool {
            chain,
            envs: (0..n_workers.max(1)).map(|_| Env::new(shared.clone())).collect(),
            next_seq: 0,
        }
    }

    pub fn n_workers(&self) -> usize {
        self.envs.len()
    }

    pub fn submit(&mut self, msg: TrafficUnit) -> PoolOutput {
        let w = worker_for(&msg.meta.flow, self.envs.len());
        self.next_seq += 1;
        run_l7(&self.chain, &mut self.envs[w], w, self.next_seq, msg)
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use proptest::prelude::*;

    use super::*;

    fn flow() -> FlowKey {
        FlowKey::new(
            Ipv4Addr::new(1, 1, 1, 1),
            40000,
            Ipv4Addr::new(10, 0, 0, 2),
            8080,
            Proto::Tcp,
        )
    }

    const REQ: &[u8] = b"POST /x HTTP/1.1\r\nHost: a\r\nContent-Length: 4\r\n\r\nbody";

    #[test]
    fn in_order_segments_form_one_message() {
        let mut t = ToeState::default();
        t.open(flow(), 99, Framing::Http);
        let a = t.deliver(&flow(), 100, false, &REQ[..10]).unwrap();
        assert!(a.messages.is_empty());
        let b = t.deliver(&flow(), 110, false, &REQ[10..]).unwrap();
        assert_eq!(b.messages, vec![REQ.to_vec()]);
    }

    #[test]
    fn reordered_and_duplicate_segments() {
        let mut t = ToeState::default();
        t.open(flow(), 99, Framing::Http);
        assert!(t.deliver(&flow(), 110, false, &REQ[10..]).unwrap().messages.is_empty());
        let out = t.deliver(&flow(), 100, false, &REQ[..10]).unwrap();
        assert_eq!(out.messages, vec![REQ.to_vec()]);

        let mut t = ToeState::default();
        t.open(flow(), 99, Framing::Http);
        t.deliver(&flow(), 100, false, &REQ[..10]).unwrap();
        let dup = t.deliver(&flow(), 100, false, &REQ[..10]).unwrap();
        assert!(dup.duplicate && dup.messages.is_empty());
        let out = t.deliver(&flow(), 110, false, &REQ[10..]).unwrap();
        assert_eq!(out.messages, vec![REQ.to_vec()]);
        assert_eq!(t.duplicates, 1);
    }

    #[test]
    fn unknown_connection_and_window() {
        let mut t = ToeState::default();
        assert_eq!(
            t.deliver(&flow(), 1, false, b"x"),
            Err(ToeError::ConnectionUnknown(flow()))
        );
        t.reorder_cap = 2;
        t.open(flow(), 0, Framing::Stream);
        t.deliver(&flow(), 10, false, b"a").unwrap();
        t.deliver(&flow(), 20, false, b"b").unwrap();
        assert_eq!(t.deliver(&flow(), 30, false, b"c"), Err(ToeError::OutOfWindow));
    }

    #[test]
    fn length_prefix_and_fin() {
        let mut t = ToeState::default();
        t.open(flow(), 0, Framing::LengthPrefix);
        let mut bytes = 3u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(b"abc");
        bytes.extend_from_slice(&2u32.to_be_bytes());
        let out = t.deliver(&flow(), 1, false, &bytes).unwrap();
        assert_eq!(out.messages, vec![b"abc".to_vec()]);
        let out = t.deliver(&flow(), 1 + bytes.len() as u32, true, b"").unwrap();
        assert!(out.closed);
        assert!(!t.contains(&flow()));
        assert_eq!(t.closed, vec![flow()]);
    }

    proptest! {
        /// Any arrival order of a segmented stream, with duplicates, yields
        /// the sorted concatenation exactly once.
        #[test]
        fn permuted_segments_reassemble(
            data in prop::collection::vec(any::<u8>(), 1..400),
            cuts in prop::collection::vec(1usize..400, 0..12),
            perm_seed in any::<u64>(),
            dups in prop::collection::vec(0usize..16, 0..4),
            isn in any::<u32>(),
        ) {
            let mut points: Vec<usize> = cuts.into_iter().filter(|&c| c < data.len()).collect();
            points.push(0);
            points.push(data.len());
            points.sort_unstable();
            points.dedup();
            let mut segs: Vec<(u32, Vec<u8>)> = points
                .windows(2)
                .map(|w| (isn.wrapping_add(1).wrapping_add(w[0] as u32), data[w[0]..w[1]].to_vec()))
                .collect();
            for d in dups {
                if let Some(s) = segs.get(d % segs.len()).cloned() {
                    segs.push(s);
                }
            }
            let mut rng = perm_seed;
            for i in (1..segs.len()).rev() {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                segs.swap(i, (rng >> 33) as usize % (i + 1));
            }
            let mut t = ToeState::default();
            t.open(flow(), isn, Framing::Stream);
            let mut got = Vec::new();
            for (seq, bytes) in segs {
                for m in t.deliver(&flow(), seq, false, &bytes).unwrap().messages {
                    got.extend(m);
                }
            }
            prop_assert_eq!(got, data);
        }
    }

    #[test]
    fn affinity_is_stable() {
        let f = flow();
        for n in [1, 2, 8] {
            let w = worker_for(&f, n);
            assert!(w < n);
            assert_eq!(w, worker_for(&f, n));
        }
    }
}
