//! One proxy instance: tables, fast path, slow path and transport wired
//! together. Runs single-threaded so the simulator and tests get exactly
//! repeatable results.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::config::{ConfigError, MeshConfig};
use crate::fast_path::InlinePool;
use crate::match_action::{DsaStub, Env, ExecutableChain, Shared};
use crate::model::{DropReason, EndpointId, FlowKey, TrafficUnit, UnitKind, Verdict};
use crate::slow_path::{slow_reason, ConnManager, Disposition, SlowPath, TableSet};
use crate::stats::Counters;
use crate::vq::Transport;

/// Final state of one unit after the fast path and any slow-path rounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub flow: FlowKey,
    pub verdict: Verdict,
    /// Module ids visited, across reinjections.
    pub trace: Vec<String>,
    pub endpoint: Option<EndpointId>,
    /// Upstream reply, or the synthesized response.
    pub reply: Option<Vec<u8>>,
    pub status: Option<u16>,
    pub slow_path_calls: u32,
    pub dsa: Vec<DsaStub>,
    /// Slow-path disposition label of the last round, if any.
    pub disposition: Option<String>,
}

impl Completion {
    fn new(flow: FlowKey) -> Self {
        Completion {
            flow,
            verdict: Verdict::Continue,
            trace: Vec::new(),
            endpoint: None,
            reply: None,
            status: None,
            slow_path_calls: 0,
            dsa: Vec::new(),
            disposition: None,
        }
    }

    /// Touched an L7 module.
    pub fn reached_l7(&self, l7_ids: &[String]) -> bool {
        self.trace.iter().any(|t| l7_ids.contains(t))
    }
}

enum Work {
    Frame(TrafficUnit, Completion),
    Message(TrafficUnit, Completion),
}

pub struct Dataplane {
    pub tables: Arc<TableSet>,
    pub shared: Arc<Shared>,
    pub conns: Arc<ConnManager>,
    pub slow: SlowPath,
    pub counters: Arc<Counters>,
    front: ExecutableChain,
    l4: ExecutableChain,
    l7: Arc<ExecutableChain>,
    pool: InlinePool,
    env: Env,
    n_workers: usize,
}

impl std::fmt::Debug for Dataplane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataplane").field("n_workers", &self.n_workers).finish_non_exhaustive()
    }
}

impl Dataplane {
    /// Builds and distributes `cfg`. The chain is compiled once; a reload
    /// only republishes tables.
    pub fn new(cfg: MeshConfig, transport: Arc<dyn Transport>, n_workers: usize) -> Result<Self, ConfigError> {
        let tables = Arc::new(TableSet::new());
        let chain = tables.compile(&cfg.chain, &cfg.dsas)?;
        let front = tables.front();
        let b = chain.l7_boundary();
        let l4 = chain.slice(0..b);
        let l7 = Arc::new(chain.slice(b..chain.len()));
        let counters = Arc::new(Counters::new());
        let conns = Arc::new(ConnManager::new(transport));
        let shared = Arc::new(Shared::new(conns.clone(), counters.clone()));
        let mut slow = SlowPath::new(cfg, tables.clone(), shared.clone(), conns.clone());
        slow.distribute();
        Ok(Dataplane {
            pool: InlinePool::new(l7.clone(), shared.clone(), n_workers),
            env: Env::new(shared.clone()),
            tables,
            shared,
            conns,
            slow,
            counters,
            front,
            l4,
            l7,
            n_workers: n_workers.max(1),
        })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn l7_chain(&self) -> &Arc<ExecutableChain> {
        &self.l7
    }

    pub fn l7_ids(&self) -> Vec<String> {
        self.l7.order().into_iter().map(|p| p.0).collect()
    }

    pub fn reload(&mut self, cfg: MeshConfig) {
        self.slow.reload(cfg);
    }

    pub fn set_now(&mut self, t: u64) {
        self.conns.set_now(t);
    }

    /// A frame from the wire.
    pub fn ingress(&mut self, frame: TrafficUnit) -> Vec<Completion> {
        self.counters.incr("fast_path.ingress");
        let c = Completion::new(frame.meta.flow);
        self.run(Work::Frame(frame, c))
    }

    /// An already framed L7 message; skips L2 to L4.
    pub fn ingress_message(&mut self, msg: TrafficUnit) -> Vec<Completion> {
        self.counters.incr("fast_path.ingress");
        let c = Completion::new(msg.meta.flow);
        self.run(Work::Message(msg, c))
    }

    fn run(&mut self, first: Work) -> Vec<Completion> {
        let mut work = VecDeque::from([first]);
        let mut done = Vec::new();
        while let Some(w) = work.pop_front() {
            let (original, mut processed, mut c) = match w {
                Work::Frame(unit, mut c) => {
                    let original = unit.clone();
                    let mut unit = self.run_front(unit, &mut c);
                    // Extra messages completed by the same segment.
                    for m in std::mem::take(&mut self.env.pending) {
                        self.counters.incr("fast_path.toe_extra");
                        let mut c2 = Completion::new(m.meta.flow);
                        c2.trace = c.trace.clone();
                        work.push_back(Work::Message(m, c2));
                    }
                    if !unit.meta.verdict().is_terminal() && unit.kind() == UnitKind::Message {
                        work.push_front(Work::Message(unit, c));
                        continue;
                    }
                    if !unit.meta.verdict().is_terminal() {
                        // Chain has no L4 stage to frame the stream.
                        let _ = unit.meta.set_verdict(Verdict::Drop(DropReason::MalformedFrame));
                    }
                    (original, unit, c)
                }
                Work::Message(unit, mut c) => {
                    let original = unit.clone();
                    let unit = if unit.meta.verdict().is_terminal() {
                        unit
                    } else {
                        let out = self.pool.submit(unit);
                        c.trace.extend(out.trace.iter().map(|t| t.ppm.0.clone()));
                        c.dsa.extend(out.dsa_calls);
                        out.unit
                    };
                    (original, unit, c)
                }
            };
            self.drain_closed();
            let v = processed.meta.verdict();
            c.verdict = v;
            if slow_reason(v).is_some() {
                self.counters.incr("fast_path.slow_path");
                c.slow_path_calls += 1;
                match self.slow.handle(original, &processed) {
                    Disposition::Reinject(u) => {
                        c.disposition = Some("reinject".into());
                        self.counters.incr("fast_path.reinjected");
                        match u.kind() {
                            UnitKind::Frame => work.push_front(Work::Frame(u, c)),
                            _ => work.push_front(Work::Message(u, c)),
                        }
                    }
                    Disposition::Respond { status, bytes, .. } => {
                        c.disposition = Some(format!("respond:{status}"));
                        c.status = Some(status);
                        c.reply = Some(bytes);
                        done.push(c);
                    }
                    Disposition::Drop(why) => {
                        c.disposition = Some(format!("drop:{why}"));
                        done.push(c);
                    }
                }
                continue;
            }
            match v {
                Verdict::Deliver => {
                    self.counters.incr("fast_path.delivered");
                    self.deliver(&mut processed, &mut c);
                }
                Verdict::Held => self.counters.incr("fast_path.held"),
                _ => {
                    self.counters.incr("fast_path.dropped");
                    if let Verdict::Drop(d) = v {
                        self.counters.incr(&format!("fast_path.drop.{}", d.as_str()));
                    }
                }
            }
            done.push(c);
        }
        done
    }

    fn run_front(&mut self, unit: TrafficUnit, c: &mut Completion) -> TrafficUnit {
        let mut unit = match self.front.execute(unit, &mut self.env) {
            Ok(ex) => {
                c.trace.extend(ex.trace.iter().map(|t| t.ppm.0.clone()));
                ex.unit
            }
            Err(_) => unreachable!("front chain accepts frames"),
        };
        if unit.meta.verdict().is_terminal() || self.l4.is_empty() {
            return unit;
        }
        let fallback = unit.clone();
        match self.l4.execute(unit, &mut self.env) {
            Ok(ex) => {
                c.trace.extend(ex.trace.iter().map(|t| t.ppm.0.clone()));
                unit = ex.unit;
            }
            Err(_) => {
                unit = fallback;
                let _ = unit.meta.set_verdict(Verdict::Drop(DropReason::MalformedFrame));
            }
        }
        c.flow = unit.meta.flow;
        unit
    }

    fn deliver(&mut self, unit: &mut TrafficUnit, c: &mut Completion) {
        let Some(q) = unit.meta.queue() else {
            return;
        };
        self.conns.touch(&unit.meta.flow);
        c.endpoint = self.conns.record(&unit.meta.flow).map(|r| r.endpoint.id);
        let t = self.conns.transport().clone();
        match t.send(q, &unit.payload) {
            Ok(()) => c.reply = t.recv(q).ok(),
            Err(e) => {
                log::debug!("send on {q:?} failed: {e}");
                self.counters.incr("fast_path.send_failed");
            }
        }
    }

    fn drain_closed(&mut self) {
        for f in std::mem::take(&mut self.env.toe.closed) {
            self.slow.connection_closed(&f);
        }
    }

    /// ingress + reinjected + toe_extra = delivered + dropped + slow_path + held
    pub fn conservation(&self) -> (u64, u64) {
        let g = |k: &str| self.counters.get(k);
        (
            g("fast_path.ingress") + g("fast_path.reinjected") + g("fast_path.toe_extra"),
            g("fast_path.delivered") + g("fast_path.dropped") + g("fast_path.slow_path") + g("fast_path.held"),
        )
    }

    pub fn stats_snapshot(&self) -> serde_json::Value {
        let mut s = self.slow.stats_snapshot();
        let (inp, out) = self.conservation();
        s["conservation"] = serde_json::json!({ "in": inp, "out": out, "holds": inp == out });
        s
    }
}
