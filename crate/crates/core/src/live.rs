//! Live mode: an HTTP/1.1 proxy on a local TCP listener that runs every
//! request through the L7 chain and forwards it to upstream stubs over
//! ordinary TCP connections.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Sender};
use parking_lot::Mutex;

use crate::config::{EndpointConfig, MeshConfig};
use crate::fast_path::{PoolOutput, WorkerPool, DEFAULT_RUN_QUEUE_DEPTH};
use crate::http;
use crate::match_action::Shared;
use crate::model::{DropReason, FlowKey, Metadata, Proto, TrafficUnit, Verdict};
use crate::slow_path::{slow_reason, ConnManager, Disposition, SlowPath, TableSet};
use crate::stats::Counters;
use crate::vq::{TcpTransport, Transport};

/// Slow-path rounds allowed per request before giving up.
const MAX_ROUNDS: usize = 4;

/// Upstream test server that answers every request with 200, echoing the
/// request body and naming itself in `X-Stub`.
pub struct EchoStub {
    pub name: String,
    pub addr: SocketAddr,
    pub hits: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
}

impl EchoStub {
    pub fn spawn(name: &str) -> io::Result<EchoStub> {
        let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
        let addr = listener.local_addr()?;
        let hits = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (n, h, s) = (name.to_owned(), hits.clone(), stop.clone());
        thread::Builder::new().name(format!("stub-{name}")).spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::Relaxed) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let (n, h) = (n.clone(), h.clone());
                thread::spawn(move || {
                    let _ = serve_echo(conn, &n, &h);
                });
            }
        })?;
        Ok(EchoStub {
            name: name.to_owned(),
            addr,
            hits,
            stop,
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

impl Drop for EchoStub {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Wake the acceptor so it sees the flag.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

fn serve_echo(mut conn: TcpStream, name: &str, hits: &AtomicU64) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        while let Ok(Some(n)) = http::message_len(&buf) {
            let msg: Vec<u8> = buf.drain(..n).collect();
            let resp = match http::parse_request(&msg) {
                Ok((f, body)) => {
                    hits.fetch_add(1, Ordering::Relaxed);
                    let body = if body.is_empty() {
                        format!("{name} {}\n", String::from_utf8_lossy(&f.url_path)).into_bytes()
                    } else {
                        body
                    };
                    http::write_response(200, &[("X-Stub", name)], &body)
                }
                Err(_) => http::write_response(400, &[], b""),
            };
            conn.write_all(&resp)?;
        }
        let n = conn.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

pub fn spawn_echo_stubs(n: usize) -> io::Result<Vec<EchoStub>> {
    (0..n).map(|i| EchoStub::spawn(&format!("stub-{i}"))).collect()
}

pub fn stub_endpoints(stubs: &[EchoStub]) -> Vec<EndpointConfig> {
    stubs
        .iter()
        .map(|s| EndpointConfig {
            id: Some(s.name.clone()),
            address: match s.addr.ip() {
                std::net::IpAddr::V4(a) => a,
                std::net::IpAddr::V6(_) => Ipv4Addr::LOCALHOST,
            },
            port: s.addr.port(),
            weight: 1,
            healthy: true,
        })
        .collect()
}

/// Replaces every cluster's endpoints.
pub fn with_endpoints(cfg: &MeshConfig, eps: &[EndpointConfig]) -> MeshConfig {
    let mut cfg = cfg.clone();
    for c in &mut cfg.clusters {
        c.endpoints = eps.to_vec();
    }
    cfg
}

/// Points every cluster at the given stubs.
pub fn with_stub_endpoints(cfg: &MeshConfig, stubs: &[EchoStub]) -> MeshConfig {
    with_endpoints(cfg, &stub_endpoints(stubs))
}

#[derive(Clone, Debug)]
pub struct LiveOptions {
    pub listen: SocketAddr,
    pub n_workers: usize,
    pub queue_depth: usize,
    pub admin: Option<SocketAddr>,
    /// Re-read on a bare `RELOAD` admin command.
    pub config_path: Option<std::path::PathBuf>,
    /// Endpoints substituted into every cluster, also after reloads.
    pub endpoint_override: Option<Vec<EndpointConfig>>,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            listen: SocketAddr::from((Ipv4Addr::LOCALHOST, 0)),
            n_workers: 4,
            queue_depth: DEFAULT_RUN_QUEUE_DEPTH,
            admin: None,
            config_path: None,
            endpoint_override: None,
        }
    }
}

type Waiters = Mutex<HashMap<FlowKey, Sender<PoolOutput>>>;

struct State {
    slow: Mutex<SlowPath>,
    shared: Arc<Shared>,
    conns: Arc<ConnManager>,
    counters: Arc<Counters>,
    pool: Mutex<Option<WorkerPool>>,
    waiters: Waiters,
    listener_key: Mutex<(Ipv4Addr, u16)>,
    listen: SocketAddr,
    stop: AtomicBool,
    config_path: Option<std::path::PathBuf>,
    endpoint_override: Option<Vec<EndpointConfig>>,
}

/// A running live proxy.
pub struct LiveProxy {
    state: Arc<State>,
    addr: SocketAddr,
    admin_addr: Option<SocketAddr>,
    acceptor: Option<thread::JoinHandle<()>>,
}

fn pick_listener(cfg: &MeshConfig, listen: SocketAddr) -> (Ipv4Addr, u16) {
    let own = cfg
        .listeners
        .iter()
        .find(|l| SocketAddr::from((l.dip, l.dport)) == listen);
    match own.or(cfg.listeners.first()) {
        Some(l) => (l.dip, l.dport),
        None => (Ipv4Addr::UNSPECIFIED, 0),
    }
}

impl LiveProxy {
    pub fn start(cfg: MeshConfig, opts: LiveOptions) -> io::Result<LiveProxy> {
        let cfg = match &opts.endpoint_override {
            Some(eps) => with_endpoints(&cfg, eps),
            None => cfg,
        };
        let tables = Arc::new(TableSet::new());
        let chain = tables
            .compile(&cfg.chain, &cfg.dsas)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let l7 = Arc::new(chain.slice(chain.l7_boundary()..chain.len()));
        let listener = TcpListener::bind(opts.listen)?;
        let addr = listener.local_addr()?;
        let counters = Arc::new(Counters::new());
        let transport: Arc<dyn Transport> = Arc::new(TcpTransport::new());
        let conns = Arc::new(ConnManager::new(transport));
        let shared = Arc::new(Shared::new(conns.clone(), counters.clone()));
        let listener_key = pick_listener(&cfg, addr);
        let mut slow = SlowPath::new(cfg, tables, shared.clone(), conns.clone());
        slow.distribute();
        let state = Arc::new(State {
            slow: Mutex::new(slow),
            shared: shared.clone(),
            conns,
            counters,
            pool: Mutex::new(None),
            waiters: Mutex::new(HashMap::new()),
            listener_key: Mutex::new(listener_key),
            listen: addr,
            stop: AtomicBool::new(false),
            config_path: opts.config_path.clone(),
            endpoint_override: opts.endpoint_override.clone(),
        });
        let weak = Arc::downgrade(&state);
        let egress = Arc::new(move |out: PoolOutput| {
            if let Some(st) = weak.upgrade() {
                let tx = st.waiters.lock().get(&out.unit.meta.flow).cloned();
                if let Some(tx) = tx {
                    let _ = tx.send(out);
                }
            }
        });
        *state.pool.lock() = Some(WorkerPool::spawn(l7, shared, opts.n_workers, opts.queue_depth, egress));

        let admin_addr = match opts.admin {
            Some(a) => {
                let l = TcpListener::bind(a)?;
                let local = l.local_addr()?;
                let st = state.clone();
                thread::Builder::new()
                    .name("admin".into())
                    .spawn(move || admin_loop(l, st))?;
                Some(local)
            }
            None => None,
        };

        let st = state.clone();
        let acceptor = thread::Builder::new().name("acceptor".into()).spawn(move || {
            for conn in listener.incoming() {
                if st.stop.load(Ordering::Relaxed) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let st = st.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_client(conn, &st) {
                        log::debug!("client connection ended: {e}");
                    }
                });
            }
        })?;
        log::info!("listening on {addr}");
        Ok(LiveProxy {
            state,
            addr,
            admin_addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin_addr
    }

    pub fn reload(&self, cfg: MeshConfig) -> std::collections::BTreeMap<String, u64> {
        reload_state(&self.state, cfg)
    }

    pub fn stats(&self) -> serde_json::Value {
        snapshot(&self.state)
    }

    /// Stops accepting, drains the pool and returns the final snapshot.
    pub fn shutdown(mut self) -> serde_json::Value {
        self.stop_all();
        snapshot(&self.state)
    }

    fn stop_all(&mut self) {
        self.state.stop.store(true, Ordering::Relaxed);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(a) = self.admin_addr {
            let _ = TcpStream::connect_timeout(&a, Duration::from_millis(200));
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        if let Some(p) = self.state.pool.lock().take() {
            p.shutdown();
        }
    }
}

impl Drop for LiveProxy {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_all();
        }
    }
}

fn reload_state(st: &State, cfg: MeshConfig) -> std::collections::BTreeMap<String, u64> {
    let cfg = match &st.endpoint_override {
        Some(eps) => with_endpoints(&cfg, eps),
        None => cfg,
    };
    *st.listener_key.lock() = pick_listener(&cfg, st.listen);
    st.slow.lock().reload(cfg)
}

fn snapshot(st: &State) -> serde_json::Value {
    let mut s = st.slow.lock().stats_snapshot();
    let g = |k: &str| st.counters.get(k);
    let inp = g("fast_path.ingress") + g("fast_path.reinjected");
    let out = g("fast_path.delivered") + g("fast_path.dropped") + g("fast_path.slow_path");
    s["conservation"] = serde_json::json!({ "in": inp, "out": out, "holds": inp == out });
    s
}

fn admin_loop(l: TcpListener, st: Arc<State>) {
    for conn in l.incoming() {
        if st.stop.load(Ordering::Relaxed) {
            break;
        }
        let Ok(mut conn) = conn else { continue };
        let mut line = String::new();
        if BufReader::new(&conn).read_line(&mut line).is_err() {
            continue;
        }
        let reply = admin_command(&st, line.trim());
        let _ = conn.write_all(reply.as_bytes());
    }
}

fn admin_command(st: &State, line: &str) -> String {
    let (cmd, arg) = line.split_once(' ').unwrap_or((line, ""));
    match cmd {
        "STATS" => format!("{}\n", snapshot(st)),
        "RELOAD" => {
            let path = if arg.is_empty() {
                st.config_path.clone()
            } else {
                Some(arg.into())
            };
            let Some(path) = path else {
                return "ERR no config path\n".into();
            };
            match crate::config::load_config_file(&path) {
                Ok(cfg) => format!("OK {}\n", serde_json::json!(reload_state(st, cfg))),
                Err(e) => format!("ERR {e}\n"),
            }
        }
        _ => format!("ERR unknown command \"{cmd}\"\n"),
    }
}

/// Sends one admin command and returns the reply line.
pub fn send_admin(addr: SocketAddr, command: &str) -> io::Result<String> {
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    s.write_all(format!("{command}\n").as_bytes())?;
    let mut out = String::new();
    BufReader::new(s).read_line(&mut out)?;
    Ok(out.trim_end().to_owned())
}

fn serve_client(mut conn: TcpStream, st: &Arc<State>) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let peer = conn.peer_addr()?;
    let sip = match peer.ip() {
        std::net::IpAddr::V4(a) => a,
        std::net::IpAddr::V6(_) => Ipv4Addr::LOCALHOST,
    };
    let (dip, dport) = *st.listener_key.lock();
    let flow = FlowKey::new(sip, peer.port(), dip, dport, Proto::Tcp);
    let (tx, rx) = bounded(1);
    st.waiters.lock().insert(flow, tx);
    let result = (|| -> io::Result<()> {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 16384];
        loop {
            loop {
                match http::message_len(&buf) {
                    Ok(Some(n)) => {
                        let msg: Vec<u8> = buf.drain(..n).collect();
                        let close = wants_close(&msg);
                        let reply = handle_request(st, flow, msg, &rx);
                        conn.write_all(&reply)?;
                        if close {
                            return Ok(());
                        }
                    }
                    Ok(None) => break,
                    Err(_) => {
                        st.counters.incr("live.malformed");
                        conn.write_all(&http::write_response(400, &[], b"malformed request\n"))?;
                        return Ok(());
                    }
                }
            }
            let n = conn.read(&mut chunk)?;
            if n == 0 {
                return Ok(());
            }
            buf.extend_from_slice(&chunk[..n]);
        }
    })();
    st.waiters.lock().remove(&flow);
    let mut slow = st.slow.lock();
    if st.conns.record(&flow).is_some() {
        slow.connection_closed(&flow);
    }
    result
}

fn wants_close(msg: &[u8]) -> bool {
    http::parse_request(msg).is_ok_and(|(f, _)| {
        f.headers
            .iter()
            .any(|(k, v)| k.eq_ignore_ascii_case(b"connection") && v.trim_ascii().eq_ignore_ascii_case(b"close"))
    })
}

fn handle_request(st: &State, flow: FlowKey, msg: Vec<u8>, rx: &crossbeam_channel::Receiver<PoolOutput>) -> Vec<u8> {
    st.counters.incr("fast_path.ingress");
    let mut unit = TrafficUnit::message(Metadata::new(flow), msg);
    for _ in 0..MAX_ROUNDS {
        let original = unit.clone();
        match st.pool.lock().as_mut() {
            Some(p) => p.submit(unit),
            None => return http::write_response(503, &[], b"shutting down\n"),
        }
        let Ok(out) = rx.recv() else {
            return http::write_response(503, &[], b"shutting down\n");
        };
        let v = out.unit.meta.verdict();
        if slow_reason(v).is_some() {
            st.counters.incr("fast_path.slow_path");
            let d = st.slow.lock().handle(original, &out.unit);
            match d {
                Disposition::Reinject(u) => {
                    st.counters.incr("fast_path.reinjected");
                    unit = u;
                    continue;
                }
                Disposition::Respond { bytes, .. } => return bytes,
                Disposition::Drop(why) => {
                    return http::write_response(502, &[], format!("{why}\n").as_bytes());
                }
            }
        }
        return match v {
            Verdict::Deliver => {
                st.counters.incr("fast_path.delivered");
                forward(st, &out.unit)
            }
            Verdict::Drop(r) => {
                st.counters.incr("fast_path.dropped");
                st.counters.incr(&format!("fast_path.drop.{}", r.as_str()));
                let status = if r == DropReason::Filtered { 403 } else { 502 };
                http::write_response(status, &[], format!("{}\n", r.as_str()).as_bytes())
            }
            _ => {
                st.counters.incr("fast_path.dropped");
                http::write_response(502, &[], b"unexpected verdict\n")
            }
        };
    }
    http::write_response(502, &[], b"slow path loop\n")
}

fn forward(st: &State, unit: &TrafficUnit) -> Vec<u8> {
    let Some(q) = unit.meta.queue() else {
        return http::write_response(502, &[], b"no upstream queue\n");
    };
    st.conns.touch(&unit.meta.flow);
    let t = st.conns.transport().clone();
    match t.send(q, &unit.payload).and_then(|_| t.recv(q)) {
        Ok(reply) => {
            st.counters.incr("live.upstream_ok");
            reply
        }
        Err(e) => {
            st.counters.incr("live.upstream_error");
            // Drop the broken binding so the next request reconnects.
            st.shared.queues.remove(&unit.meta.flow);
            http::write_response(502, &[], format!("upstream: {e}\n").as_bytes())
        }
    }
}
