//! Virtualization queues between the proxy and service stubs.
//!
//! A queue is a pair of bounded rings. After binding, the proxy side sends
//! with [`Fabric::tx_deliver`] and collects replies with
//! [`Fabric::rx_collect`]; the service stub uses [`Fabric::stub_fetch`] and
//! [`Fabric::stub_write`]. Copies stand in for DMA.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::http;
use crate::l7::{ConnectError, Connector};
use crate::model::{Endpoint, EndpointId, FlowKey, QueueId};

pub const DEFAULT_RING_CAPACITY: usize = 256;
pub const DEFAULT_MAX_DESCRIPTOR: usize = 64 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TenantId(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StubId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemHandle(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VqState {
    Unbound,
    Bound,
    Closed,
}

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
pub enum VqError {
    #[error("tenant mismatch")]
    TenantMismatch,
    #[error("queue already bound to another stub")]
    AlreadyBoundElsewhere,
    #[error("queue not bound")]
    NotBound,
    #[error("queue closed")]
    Closed,
    #[error("ring full")]
    RingFull,
    #[error("empty payload")]
    Empty,
    #[error("descriptor of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("no such queue")]
    NoSuchQueue,
    #[error("no such stub")]
    NoSuchStub,
    #[error("access denied")]
    AccessDenied,
    #[error("transport error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingConfig {
    pub capacity: usize,
    pub max_descriptor: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            capacity: DEFAULT_RING_CAPACITY,
            max_descriptor: DEFAULT_MAX_DESCRIPTOR,
        }
    }
}

#[derive(Debug)]
struct MemBlock {
    tenant: TenantId,
    data: VecDeque<Vec<u8>>,
}

#[derive(Debug)]
pub struct VirtQueue {
    pub id: QueueId,
    pub tenant: TenantId,
    pub state: VqState,
    stub: Option<StubId>,
    /// (rx block, tx block) of the bound stub.
    bound_mem: Option<(MemHandle, MemHandle)>,
    /// Descriptors handed to the stub and not yet fetched.
    tx_used: usize,
    /// Replies fetched from the stub, waiting for the proxy.
    rx_ring: VecDeque<Vec<u8>>,
    cfg: RingConfig,
}

impl VirtQueue {
    pub fn bound_mem(&self) -> Option<(MemHandle, MemHandle)> {
        self.bound_mem
    }
}

#[derive(Debug)]
pub struct ServiceStub {
    pub id: StubId,
    pub tenant: TenantId,
    /// Readiness events raised by the TX path and not yet consumed.
    pub pending_events: u64,
}

/// Notification counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VqCounters {
    pub host_doorbells: u64,
    pub stub_events: u64,
    pub dma_copies: u64,
    pub dma_requests: u64,
}

/// All queues, stubs and memory blocks of one device.
#[derive(Debug, Default)]
pub struct Fabric {
    queues: HashMap<QueueId, VirtQueue>,
    stubs: HashMap<StubId, ServiceStub>,
    mem: HashMap<MemHandle, MemBlock>,
    next_queue: u32,
    next_stub: u32,
    next_mem: u64,
    pub counters: VqCounters,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_queue(&mut self, tenant: TenantId, cfg: RingConfig) -> QueueId {
        self.next_queue += 1;
        let id = QueueId(self.next_queue);
        self.queues.insert(
            id,
            VirtQueue {
                id,
                tenant,
                state: VqState::Unbound,
                stub: None,
                bound_mem: None,
                tx_used: 0,
                rx_ring: VecDeque::new(),
                cfg,
            },
        );
        id
    }

    pub fn create_stub(&mut self, tenant: TenantId) -> StubId {
        self.next_stub += 1;
        let id = StubId(self.next_stub);
        self.stubs.insert(
            id,
            ServiceStub {
                id,
                tenant,
                pending_events: 0,
            },
        );
        id
    }

    pub fn queue(&self, q: QueueId) -> Option<&VirtQueue> {
        self.queues.get(&q)
    }

    pub fn stub(&self, s: StubId) -> Option<&ServiceStub> {
        self.stubs.get(&s)
    }

    fn alloc_block(&mut self, tenant: &TenantId) -> MemHandle {
        self.next_mem += 1;
        let h = MemHandle(self.next_mem);
        self.mem.insert(
            h,
            MemBlock {
                tenant: tenant.clone(),
                data: VecDeque::new(),
            },
        );
        h
    }

    /// Stub allocates RX/TX blocks and the queue records their addresses.
    pub fn bind(&mut self, q: QueueId, s: StubId) -> Result<(), VqError> {
        let stub_tenant = self.stubs.get(&s).ok_or(VqError::NoSuchStub)?.tenant.clone();
        let vq = self.queues.get(&q).ok_or(VqError::NoSuchQueue)?;
        if vq.tenant != stub_tenant {
            return Err(VqError::TenantMismatch);
        }
        match (vq.state, vq.stub) {
            (VqState::Closed, _) => return Err(VqError::Closed),
            (VqState::Bound, Some(b)) if b == s => return Ok(()),
            (VqState::Bound, _) => return Err(VqError::AlreadyBoundElsewhere),
            (VqState::Unbound, _) => {}
        }
        let rx = self.alloc_block(&stub_tenant);
        let tx = self.alloc_block(&stub_tenant);
        let vq = self.queues.get_mut(&q).expect("checked above");
        vq.bound_mem = Some((rx, tx));
        vq.stub = Some(s);
        vq.state = VqState::Bound;
        Ok(())
    }

    fn bound(&self, q: QueueId) -> Result<&VirtQueue, VqError> {
        let vq = self.queues.get(&q).ok_or(VqError::NoSuchQueue)?;
        match vq.state {
            VqState::Bound => Ok(vq),
            VqState::Closed => Err(VqError::Closed),
            VqState::Unbound => Err(VqError::NotBound),
        }
    }

    /// Proxy → service. Data lands in the stub's RX block and one readiness
    /// event is raised for the stub; the host is not notified.
    pub fn tx_deliver(&mut self, q: QueueId, data: &[u8]) -> Result<(), VqError> {
        let vq = self.bound(q)?;
        if data.is_empty() {
            return Err(VqError::Empty);
        }
        if data.len() > vq.cfg.max_descriptor {
            return Err(VqError::TooLarge(data.len()));
        }
        if vq.tx_used >= vq.cfg.capacity {
            return Err(VqError::RingFull);
        }
        let (rx, _) = vq.bound_mem.expect("bound queue has memory");
        let stub = vq.stub.expect("bound queue has a stub");
        self.mem.get_mut(&rx).expect("block allocated").data.push_back(data.to_vec());
        self.queues.get_mut(&q).expect("exists").tx_used += 1;
        self.stubs.get_mut(&stub).expect("exists").pending_events += 1;
        self.counters.dma_copies += 1;
        self.counters.stub_events += 1;
        Ok(())
    }

    fn stub_queue(&self, s: StubId, q: QueueId) -> Result<&VirtQueue, VqError> {
        let stub = self.stubs.get(&s).ok_or(VqError::NoSuchStub)?;
        let vq = self.bound(q)?;
        if vq.tenant != stub.tenant || vq.stub != Some(s) {
            return Err(VqError::AccessDenied);
        }
        Ok(vq)
    }

    /// Stub reads the next message from its RX block; frees the TX slot.
    pub fn stub_fetch(&mut self, s: StubId, q: QueueId) -> Result<Option<Vec<u8>>, VqError> {
        let (rx, _) = self.stub_queue(s, q)?.bound_mem.expect("bound");
        let Some(data) = self.mem.get_mut(&rx).expect("allocated").data.pop_front() else {
            return Ok(None);
        };
        self.queues.get_mut(&q).expect("exists").tx_used -= 1;
        let stub = self.stubs.get_mut(&s).expect("exists");
        stub.pending_events = stub.pending_events.saturating_sub(1);
        Ok(Some(data))
    }

    /// Stub writes a reply into its TX block. The device fetches it into
    /// the RX ring right away and the free block address goes back to the
    /// stub in the same call.
    pub fn stub_write(&mut self, s: StubId, q: QueueId, data: &[u8]) -> Result<(), VqError> {
        let vq = self.stub_queue(s, q)?;
        if data.is_empty() {
            return Err(VqError::Empty);
        }
        if data.len() > vq.cfg.max_descriptor {
            return Err(VqError::TooLarge(data.len()));
        }
        if vq.rx_ring.len() >= vq.cfg.capacity {
            return Err(VqError::RingFull);
        }
        let (_, tx) = vq.bound_mem.expect("bound");
        let block = self.mem.get_mut(&tx).expect("allocated");
        block.data.push_back(data.to_vec());
        self.counters.dma_requests += 1;
        let fetched = block.data.pop_front().expect("just written");
        self.counters.dma_copies += 1;
        self.queues.get_mut(&q).expect("exists").rx_ring.push_back(fetched);
        Ok(())
    }

    /// Proxy collects the next reply and releases its ring slot.
    pub fn rx_collect(&mut self, q: QueueId) -> Result<Option<Vec<u8>>, VqError> {
        self.bound(q)?;
        Ok(self.queues.get_mut(&q).expect("exists").rx_ring.pop_front())
    }

    /// Free slots of (tx ring, rx ring).
    pub fn free_slots(&self, q: QueueId) -> Option<(usize, usize)> {
        self.queues
            .get(&q)
            .map(|v| (v.cfg.capacity - v.tx_used, v.cfg.capacity - v.rx_ring.len()))
    }

    /// Reads a memory block on behalf of `tenant`.
    pub fn read_block(&self, tenant: &TenantId, h: MemHandle) -> Result<Vec<Vec<u8>>, VqError> {
        let b = self.mem.get(&h).ok_or(VqError::AccessDenied)?;
        if &b.tenant != tenant {
            return Err(VqError::AccessDenied);
        }
        Ok(b.data.iter().cloned().collect())
    }

    pub fn close(&mut self, q: QueueId) {
        if let Some(vq) = self.queues.get_mut(&q) {
            vq.state = VqState::Closed;
            vq.rx_ring.clear();
            if let Some((rx, tx)) = vq.bound_mem.take() {
                self.mem.remove(&rx);
                self.mem.remove(&tx);
            }
            vq.tx_used = 0;
        }
    }

    pub fn is_open(&self, q: QueueId) -> bool {
        self.queues.get(&q).is_some_and(|v| v.state == VqState::Bound)
    }
}

/// Fabric shared between threads; full rings block instead of failing.
#[derive(Debug, Default)]
pub struct SharedFabric {
    inner: Mutex<Fabric>,
    changed: Condvar,
}

impl SharedFabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut Fabric) -> R) -> R {
        let r = f(&mut self.inner.lock());
        self.changed.notify_all();
        r
    }

    /// Like [`Fabric::tx_deliver`] but waits for a free slot.
    pub fn tx_deliver_blocking(&self, q: QueueId, data: &[u8]) -> Result<(), VqError> {
        let mut g = self.inner.lock();
        loop {
            match g.tx_deliver(q, data) {
                Err(VqError::RingFull) => self.changed.wait(&mut g),
                r => {
                    drop(g);
                    self.changed.notify_all();
                    return r;
                }
            }
        }
    }

    /// Waits up to `timeout` for the stub to have a message.
    pub fn stub_fetch_wait(&self, s: StubId, q: QueueId, timeout: Duration) -> Result<Option<Vec<u8>>, VqError> {
        let mut g = self.inner.lock();
        loop {
            match g.stub_fetch(s, q)? {
                Some(d) => {
                    drop(g);
                    self.changed.notify_all();
                    return Ok(Some(d));
                }
                None => {
                    if self.changed.wait_for(&mut g, timeout).timed_out() {
                        return Ok(None);
                    }
                }
            }
        }
    }
}

/// Proxy-side view of a transport: queues opened per upstream connection.
pub trait Transport: Send + Sync {
    fn open(&self, endpoint: &Endpoint) -> Result<QueueId, ConnectError>;
    fn send(&self, q: QueueId, data: &[u8]) -> Result<(), VqError>;
    /// Next complete reply on `q`.
    fn recv(&self, q: QueueId) -> Result<Vec<u8>, VqError>;
    fn close(&self, q: QueueId);
    fn is_open(&self, q: QueueId) -> bool;
}

pub type StubHandler = Arc<dyn Fn(&EndpointId, &[u8]) -> Vec<u8> + Send + Sync>;

/// In-process transport over a [`Fabric`]. Each endpoint has a stub; an
/// optional handler answers every delivered message synchronously.
pub struct LocalTransport {
    fabric: SharedFabric,
    stubs: Mutex<HashMap<EndpointId, (StubId, TenantId)>>,
    owners: Mutex<HashMap<QueueId, EndpointId>>,
    handler: Option<StubHandler>,
    cfg: RingConfig,
}

impl LocalTransport {
    pub fn new(handler: Option<StubHandler>, cfg: RingConfig) -> Self {
        LocalTransport {
            fabric: SharedFabric::new(),
            stubs: Mutex::new(HashMap::new()),
            owners: Mutex::new(HashMap::new()),
            handler,
            cfg,
        }
    }

    /// Registers a stub for `endpoint`, owned by `tenant`.
    pub fn add_stub(&self, endpoint: EndpointId, tenant: TenantId) -> StubId {
        let s = self.fabric.with(|f| f.create_stub(tenant.clone()));
        self.stubs.lock().insert(endpoint, (s, tenant));
        s
    }

    pub fn fabric(&self) -> &SharedFabric {
        &self.fabric
    }

    pub fn endpoint_of(&self, q: QueueId) -> Option<EndpointId> {
        self.owners.lock().get(&q).cloned()
    }
}

impl Transport for LocalTransport {
    fn open(&self, endpoint: &Endpoint) -> Result<QueueId, ConnectError> {
        let known = self.stubs.lock().get(&endpoint.id).cloned();
        let (stub, tenant) = match known {
            Some(s) => s,
            None if self.handler.is_some() => {
                let t = TenantId(endpoint.id.0.clone());
                (self.add_stub(endpoint.id.clone(), t.clone()), t)
            }
            None => return Err(ConnectError::NoStub(endpoint.id.clone())),
        };
        let q = self.fabric.with(|f| {
            let q = f.create_queue(tenant, self.cfg);
            f.bind(q, stub).map(|_| q)
        });
        let q = q.map_err(|e| ConnectError::Bind(e.to_string()))?;
        self.owners.lock().insert(q, endpoint.id.clone());
        Ok(q)
    }

    fn send(&self, q: QueueId, data: &[u8]) -> Result<(), VqError> {
        self.fabric.tx_deliver_blocking(q, data)?;
        if let Some(h) = &self.handler {
            let ep = self.endpoint_of(q).ok_or(VqError::NoSuchQueue)?;
            let stub = self.stubs.lock().get(&ep).map(|s| s.0).ok_or(VqError::NoSuchStub)?;
            let req = self.fabric.with(|f| f.stub_fetch(stub, q))?;
            if let Some(req) = req {
                let resp = h(&ep, &req);
                self.fabric.with(|f| f.stub_write(stub, q, &resp))?;
            }
        }
        Ok(())
    }

    fn recv(&self, q: QueueId) -> Result<Vec<u8>, VqError> {
        self.fabric
            .with(|f| f.rx_collect(q))?
            .ok_or(VqError::Io("no reply pending".into()))
    }

    fn close(&self, q: QueueId) {
        self.fabric.with(|f| f.close(q));
        self.owners.lock().remove(&q);
    }

    fn is_open(&self, q: QueueId) -> bool {
        self.fabric.with(|f| f.is_open(q))
    }
}

/// Queues mapped onto local TCP connections; replies are framed as HTTP
/// responses.
#[derive(Default)]
pub struct TcpTransport {
    conns: Mutex<HashMap<QueueId, Arc<Mutex<(TcpStream, Vec<u8>)>>>>,
    next: Mutex<u32>,
}

impl TcpTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn conn(&self, q: QueueId) -> Result<Arc<Mutex<(TcpStream, Vec<u8>)>>, VqError> {
        self.conns.lock().get(&q).cloned().ok_or(VqError::Closed)
    }
}

impl Transport for TcpTransport {
    fn open(&self, endpoint: &Endpoint) -> Result<QueueId, ConnectError> {
        let addr = SocketAddr::from((endpoint.address, endpoint.port));
        let s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))
            .map_err(|_| ConnectError::Refused(endpoint.id.clone()))?;
        let _ = s.set_nodelay(true);
        let mut n = self.next.lock();
        *n += 1;
        let q = QueueId(*n);
        self.conns.lock().insert(q, Arc::new(Mutex::new((s, Vec::new()))));
        Ok(q)
    }

    fn send(&self, q: QueueId, data: &[u8]) -> Result<(), VqError> {
        let c = self.conn(q)?;
        let mut g = c.lock();
        g.0.write_all(data).map_err(|e| VqError::Io(e.to_string()))
    }

    fn recv(&self, q: QueueId) -> Result<Vec<u8>, VqError> {
        let c = self.conn(q)?;
        let mut g = c.lock();
        let (stream, buf) = &mut *g;
        let mut chunk = [0u8; 8192];
        loop {
            if let Ok(Some(n)) = http::message_len(buf) {
                return Ok(buf.drain(..n).collect());
            }
            let n = stream.read(&mut chunk).map_err(|e| VqError::Io(e.to_string()))?;
            if n == 0 {
                return Err(VqError::Closed);
            }
            buf.extend_from_slice(&chunk[..n]);
        }
    }

    fn close(&self, q: QueueId) {
        self.conns.lock().remove(&q);
    }

    fn is_open(&self, q: QueueId) -> bool {
        self.conns.lock().contains_key(&q)
    }
}

/// Adapts a [`Transport`] to the router's [`Connector`].
pub struct TransportConnector {
    pub transport: Arc<dyn Transport>,
}

impl Connector for TransportConnector {
    fn connect(&self, _conn: &FlowKey, endpoint: &Endpoint, _cluster: &str) -> Result<QueueId, ConnectError> {
        self.transport.open(endpoint)
    }

    fn queue_open(&self, q: QueueId) -> bool {
        self.transport.is_open(q)
    }
}
