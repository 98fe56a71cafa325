//! Domain types shared by every processing module: flow keys, per-unit
//! metadata, traffic units, verdicts and endpoint identities.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proto {
    Tcp,
    Udp,
}

/// Five-tuple flow identifier.
///
/// A listener key is the same structure with a wildcard source half
/// (`sip = 0.0.0.0`, `sport = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub sip: Ipv4Addr,
    pub sport: u16,
    pub dip: Ipv4Addr,
    pub dport: u16,
    pub proto: Proto,
}

impl FlowKey {
    pub const fn new(sip: Ipv4Addr, sport: u16, dip: Ipv4Addr, dport: u16, proto: Proto) -> Self {
        FlowKey {
            sip,
            sport,
            dip,
            dport,
            proto,
        }
    }

    pub fn is_listener(&self) -> bool {
        self.sip == Ipv4Addr::UNSPECIFIED && self.sport == 0
    }

    /// The listener key this flow would be accepted on.
    pub fn listener(&self) -> FlowKey {
        make_listener_key(self.dip, self.dport)
    }

    /// The key of the opposite direction of the same connection.
    pub fn reversed(&self) -> FlowKey {
        FlowKey::new(self.dip, self.dport, self.sip, self.sport, self.proto)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{:?}",
            self.sip, self.sport, self.dip, self.dport, self.proto
        )
    }
}

/// Builds the two-tuple key used for listener lookups.
pub fn make_listener_key(dip: Ipv4Addr, dport: u16) -> FlowKey {
    FlowKey::new(Ipv4Addr::UNSPECIFIED, 0, dip, dport, Proto::Tcp)
}

/// Builds the connection key of the flow a unit belongs to.
pub fn make_conn_key(m: &Metadata) -> FlowKey {
    m.flow
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtoType {
    L4Stream,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnId(pub u64);

impl ConnId {
    /// Stable connection id derived from the flow key (FNV-1a over the tuple).
    pub fn from_flow(flow: &FlowKey) -> ConnId {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for b in flow.sip.octets() {
            eat(b);
        }
        for b in flow.sport.to_be_bytes() {
            eat(b);
        }
        for b in flow.dip.octets() {
            eat(b);
        }
        for b in flow.dport.to_be_bytes() {
            eat(b);
        }
        eat(flow.proto as u8);
        ConnId(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueueId(pub u32);

impl fmt::Display for QueueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// Handle into a [`BodyPool`](crate::l7::BodyPool).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BodyRef(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropReason {
    NoListener,
    NoRoute,
    Filtered,
    MalformedFrame,
    NotLocal,
    OutOfWindow,
    SlowPathRejected,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::NoListener => "no_listener",
            DropReason::NoRoute => "no_route",
            DropReason::Filtered => "filtered",
            DropReason::MalformedFrame => "malformed_frame",
            DropReason::NotLocal => "not_local",
            DropReason::OutOfWindow => "out_of_window",
            DropReason::SlowPathRejected => "slow_path_rejected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlowReason {
    /// L2 table miss.
    UnknownMac,
    /// L3 table miss.
    UnknownHost,
    /// L4 connection table miss: first packet of a connection.
    NewConnection,
    ConnectionUnknown,
    /// No filter rule for the request.
    NoRule,
    MalformedHttp,
    NoHealthyEndpoint,
    ConnectFailure,
    QueueClosed,
    RevisitBudgetExceeded,
    /// Terminal L7 drop reported to the control plane for a response decision.
    Dropped(DropReason),
}

impl SlowReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlowReason::UnknownMac => "unknown_mac",
            SlowReason::UnknownHost => "unknown_host",
            SlowReason::NewConnection => "new_connection",
            SlowReason::ConnectionUnknown => "connection_unknown",
            SlowReason::NoRule => "no_rule",
            SlowReason::MalformedHttp => "malformed_http",
            SlowReason::NoHealthyEndpoint => "no_healthy_endpoint",
            SlowReason::ConnectFailure => "connect_failure",
            SlowReason::QueueClosed => "queue_closed",
            SlowReason::RevisitBudgetExceeded => "revisit_budget_exceeded",
            SlowReason::Dropped(r) => r.as_str(),
        }
    }
}

/// Outcome of a chain traversal for one unit.
///
/// `Continue` is the only non-terminal value. `Held` marks a segment that
/// the TOE buffered without completing a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Continue,
    Drop(DropReason),
    ToSlowPath(SlowReason),
    Deliver,
    Held,
}

impl Verdict {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Verdict::Continue)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Continue => "continue",
            Verdict::Drop(_) => "drop",
            Verdict::ToSlowPath(_) => "to_slow_path",
            Verdict::Deliver => "deliver",
            Verdict::Held => "held",
        }
    }
}

/// L2 fields extracted by the vswitch parser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L2Fields {
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    pub vlan: Option<u16>,
}

/// TCP header fields extracted by the TOE parser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentFields {
    pub seq: u32,
    pub syn: bool,
    pub fin: bool,
}

/// Parsed HTTP/1.1 request head. Headers keep their wire order so that a
/// canonical request deparses byte-for-byte.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HttpFields {
    pub method: String,
    /// Raw request-target (origin form, query included).
    pub url_path: Vec<u8>,
    pub version: Vec<u8>,
    pub host: Vec<u8>,
    pub headers: Vec<(Vec<u8>, Vec<u8>)>,
}

impl HttpFields {
    /// Path component of the request-target, used for routing.
    pub fn path(&self) -> &[u8] {
        match self.url_path.iter().position(|&b| b == b'?') {
            Some(i) => &self.url_path[..i],
            None => &self.url_path,
        }
    }

    pub fn header(&self, name: &[u8]) -> Option<&[u8]> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetadataError {
    #[error("connection {conn:?} is already bound to {bound}, refusing {requested}")]
    QueueRebind {
        conn: ConnId,
        bound: QueueId,
        requested: QueueId,
    },
    #[error("verdict {from:?} is terminal")]
    TerminalVerdict { from: Verdict },
}

/// Per-unit descriptor threaded through every processing module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub flow: FlowKey,
    proto_type: ProtoType,
    pub conn_id: ConnId,
    http: Option<HttpFields>,
    queue: Option<QueueId>,
    verdict: Verdict,
    pub body_ref: Option<BodyRef>,
    pub l2: Option<L2Fields>,
    pub segment: Option<SegmentFields>,
    /// Route-selected DSA transform, if any.
    pub dsa: Option<String>,
    pub endpoint: Option<FlowKey>,
}

impl Metadata {
    pub fn new(flow: FlowKey) -> Self {
        Metadata {
            flow,
            proto_type: ProtoType::L4Stream,
            conn_id: ConnId::from_flow(&flow),
            http: None,
            queue: None,
            verdict: Verdict::Continue,
            body_ref: None,
            l2: None,
            segment: None,
            dsa: None,
            endpoint: None,
        }
    }

    pub fn empty() -> Self {
        Metadata::new(FlowKey::new(
            Ipv4Addr::UNSPECIFIED,
            0,
            Ipv4Addr::UNSPECIFIED,
            0,
            Proto::Tcp,
        ))
    }

    pub fn set_flow(&mut self, flow: FlowKey) {
        self.flow = flow;
        self.conn_id = ConnId::from_flow(&flow);
    }

    pub fn proto_type(&self) -> ProtoType {
        self.proto_type
    }

    pub fn http(&self) -> Option<&HttpFields> {
        self.http.as_ref()
    }

    pub fn http_mut(&mut self) -> Option<&mut HttpFields> {
        self.http.as_mut()
    }

    /// Attaches HTTP fields; the unit becomes an HTTP unit.
    pub fn set_http(&mut self, http: HttpFields) {
        self.http = Some(http);
        self.proto_type = ProtoType::Http;
    }

    pub fn clear_http(&mut self) {
        self.http = None;
        self.proto_type = ProtoType::L4Stream;
    }

    pub fn queue(&self) -> Option<QueueId> {
        self.queue
    }

    /// Binds the unit to a queue. Rebinding to the same queue is a no-op;
    /// rebinding to another queue is refused.
    pub fn bind_queue(&mut self, q: QueueId) -> Result<(), MetadataError> {
        match self.queue {
            Some(bound) if bound != q => Err(MetadataError::QueueRebind {
                conn: self.conn_id,
                bound,
                requested: q,
            }),
            _ => {
                self.queue = Some(q);
                Ok(())
            }
        }
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    /// Moves the verdict forward. Terminal verdicts never change.
    pub fn set_verdict(&mut self, v: Verdict) -> Result<(), MetadataError> {
        if self.verdict.is_terminal() {
            if self.verdict == v {
                return Ok(());
            }
            return Err(MetadataError::TerminalVerdict { from: self.verdict });
        }
        self.verdict = v;
        Ok(())
    }

    /// Clears the verdict for reinjection of a unit the slow path handled.
    pub fn reset_verdict(&mut self) {
        self.verdict = Verdict::Continue;
    }

    /// "Initial metadata": resets verdict and clears transient L7 fields.
    /// The flow identity and connection binding survive.
    pub fn reset_transient(&mut self) {
        self.verdict = Verdict::Continue;
        self.dsa = None;
        self.endpoint = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Frame,
    Packet,
    Segment,
    Message,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficUnit {
    kind: UnitKind,
    pub meta: Metadata,
    pub payload: Vec<u8>,
    /// Simulated nanoseconds; 0 in live mode.
    pub arrival_time: u64,
}

impl TrafficUnit {
    pub fn new(kind: UnitKind, meta: Metadata, payload: Vec<u8>) -> Self {
        TrafficUnit {
            kind,
            meta,
            payload,
            arrival_time: 0,
        }
    }

    pub fn frame(bytes: Vec<u8>) -> Self {
        TrafficUnit::new(UnitKind::Frame, Metadata::empty(), bytes)
    }

    pub fn message(meta: Metadata, payload: Vec<u8>) -> Self {
        TrafficUnit::new(UnitKind::Message, meta, payload)
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    /// Advances the unit up the hierarchy. Downward moves are ignored.
    pub fn promote(&mut self, kind: UnitKind) {
        if kind > self.kind {
            self.kind = kind;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EndpointId(pub String);

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: EndpointId,
    pub address: Ipv4Addr,
    pub port: u16,
    pub weight: u32,
    pub healthy: bool,
}

impl Endpoint {
    pub fn new(id: impl Into<String>, address: Ipv4Addr, port: u16, weight: u32) -> Self {
        Endpoint {
            id: EndpointId(id.into()),
            address,
            port,
            weight,
            healthy: true,
        }
    }

    /// Destination half of a flow key toward this endpoint.
    pub fn key(&self) -> FlowKey {
        make_listener_key(self.address, self.port)
    }
}
