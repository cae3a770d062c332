//! Deterministic discrete-event network simulator hosting actors, reactors
//! and flocks on peers connected through simulated links.
//!
//! Events are ordered by `(tick, sequence)`; with a fixed latency per link
//! this keeps delivery FIFO per link. Peers discover each other through a
//! simulator-internal registry, connect under the initiator rule and detect
//! failures through heartbeats.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::actor::{ActorBehaviour, ActorContext, ActorError, Command};
use crate::bag::{IncrementalBag, Patch};
use crate::behaviour::{CollectionMode, ReactorBehaviour};
use crate::flock::{FlockError, FlockState, Members};
use crate::reactor::{PriorityScheme, ReactInput, Reactor, Stimulus, TurnError, TurnOutcome};
use crate::stream::{Effect, NodeTag, Payload, StreamDirectory, StreamLookup};
use crate::trace::TraceRecord;
use crate::value::{PeerId, ProcessRef, StreamRef, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("peer {0} is not running")]
    PeerDown(PeerId),
    #[error("peer {0} already joined")]
    AlreadyJoined(PeerId),
    #[error("unknown process {0}")]
    UnknownProcess(ProcessRef),
    #[error("peer {peer} has no flock {flock:?}")]
    UnknownFlock { peer: PeerId, flock: String },
    #[error("initiator rule needs two distinct peers, got {0} twice")]
    SamePeer(PeerId),
    #[error("{0} is not an actor")]
    NotAnActor(ProcessRef),
    #[error("{0} is not a reactor")]
    NotAReactor(ProcessRef),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Turn(#[from] TurnError),
    #[error(transparent)]
    Flock(#[from] FlockError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub heartbeat_interval: u64,
    pub miss_threshold: u64,
    /// Latency of links between distinct peers, in ticks.
    pub latency: u64,
    pub jitter_window: u64,
    pub seed: u64,
    pub scheme: PriorityScheme,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { heartbeat_interval: 5, miss_threshold: 3, latency: 1, jitter_window: 4, seed: 0, scheme: PriorityScheme::Hierarchical }
    }
}

/// The peer that opens the connection between `a` and `b`.
pub fn initiator_rule(a: PeerId, b: PeerId) -> Result<PeerId, SimError> {
    if a == b {
        return Err(SimError::SamePeer(a));
    }
    Ok(a.min(b))
}

/// How a subscriber wants deliveries dispatched.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SubTag {
    Node(NodeTag),
    Method(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subscriber {
    pub process: ProcessRef,
    pub tag: SubTag,
    pub format: CollectionMode,
}

#[derive(Debug, Clone, Default)]
struct StreamState {
    retained: Option<Payload>,
    subscribers: Vec<Subscriber>,
}

enum ProcessKind {
    Actor { behaviour: Arc<ActorBehaviour>, state: BTreeMap<String, Value> },
    Reactor(Box<Reactor>),
    Flock(FlockState),
}

struct Process {
    kind: ProcessKind,
    streams: BTreeMap<Arc<str>, StreamState>,
}

#[derive(Debug, Clone)]
enum ProcessMsg {
    StreamValue { stream: StreamRef, sub: Subscriber, payload: Payload },
    Call { method: String, args: Vec<Value> },
    ReactTo(ReactInput),
    Subscribe { stream: StreamRef, sub: Subscriber, replay: bool },
    Unsubscribe { stream: StreamRef, process: ProcessRef, tag: SubTag },
}

#[derive(Debug, Clone)]
enum PeerMsg {
    Connect,
    Ack,
    Heartbeat(BTreeMap<String, (u64, Members)>),
    Delta { flock: String, version: u64, member: ProcessRef, added: bool },
}

#[derive(Debug, Clone)]
enum Body {
    Process { to: ProcessRef, msg: ProcessMsg },
    Peer(PeerMsg),
    HeartbeatTimer,
    ConnectTimer(PeerId),
}

#[derive(Debug, Clone)]
struct Envelope {
    from: Option<PeerId>,
    to: PeerId,
    to_incarnation: u64,
    body: Body,
}

#[derive(Debug, Clone, Default)]
struct Link {
    connected: bool,
    last_heard: u64,
    connect_sent: Option<u64>,
}

#[derive(Default)]
struct Peer {
    alive: bool,
    incarnation: u64,
    flocks: BTreeMap<String, u32>,
    processes: BTreeMap<u32, Process>,
    links: BTreeMap<PeerId, Link>,
    known: BTreeSet<PeerId>,
    pending: Vec<(PeerId, ProcessRef, ProcessMsg)>,
    next_local: u32,
}

/// One entry of the delivery log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub tick: u64,
    pub seq: u64,
    pub from: Option<PeerId>,
    pub to: PeerId,
    pub kind: &'static str,
    pub detail: String,
    pub dropped: bool,
}

impl LogRecord {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tick": self.tick,
            "seq": self.seq,
            "from": self.from.map(|p| p.0),
            "to": self.to.0,
            "kind": self.kind,
            "detail": self.detail,
            "dropped": self.dropped,
        })
    }
}

/// A flock contents message as received by a subscriber.
#[derive(Debug, Clone)]
pub struct ContentsDelivery {
    pub tick: u64,
    pub flock: ProcessRef,
    pub subscriber: Subscriber,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub tick: u64,
    pub reactor: ProcessRef,
    pub value: Value,
}

struct PeerDir<'a> {
    id: PeerId,
    peer: &'a Peer,
}

impl StreamDirectory for PeerDir<'_> {
    fn lookup(&self, stream: &StreamRef) -> StreamLookup {
        if stream.owner.peer != self.id {
            return StreamLookup::Remote;
        }
        match self.peer.processes.get(&stream.owner.local).and_then(|p| p.streams.get(&stream.name)) {
            Some(s) => StreamLookup::Local(s.retained.as_ref().map(payload_value)),
            None => StreamLookup::UnknownStream,
        }
    }

    fn flock(&self, name: &str) -> Option<ProcessRef> {
        self.peer.flocks.get(name).map(|local| ProcessRef { peer: self.id, local: *local })
    }
}

fn payload_value(p: &Payload) -> Value {
    match p {
        Payload::Value(v) => v.clone(),
        Payload::Snapshot(b) => Value::Bag(b.clone()),
        Payload::Patch(p) => Value::tuple([Value::symbol(p.kind()), Value::Number(p.key().0 as f64)]),
    }
}

fn contents_name() -> Arc<str> {
    Arc::from("contents")
}

pub struct NetSim {
    cfg: SimConfig,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    peers: BTreeMap<PeerId, Peer>,
    registry: BTreeMap<String, BTreeSet<PeerId>>,
    cuts: BTreeSet<(PeerId, PeerId)>,
    latencies: BTreeMap<(PeerId, PeerId), u64>,
    link_clock: BTreeMap<(PeerId, PeerId), u64>,
    log: Vec<LogRecord>,
    contents_log: Vec<ContentsDelivery>,
    emissions: Vec<Emission>,
    actor_log: Vec<(u64, ProcessRef, Value)>,
    diagnostics: Vec<(u64, String)>,
    connect_attempts: Vec<(u64, PeerId, PeerId)>,
    trace_propagation: bool,
    propagation_trace: Vec<TraceRecord>,
}

fn pair(a: PeerId, b: PeerId) -> (PeerId, PeerId) {
    (a.min(b), a.max(b))
}

impl NetSim {
    pub fn new(cfg: SimConfig) -> Self {
        NetSim {
            cfg,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            peers: BTreeMap::new(),
            registry: BTreeMap::new(),
            cuts: BTreeSet::new(),
            latencies: BTreeMap::new(),
            link_clock: BTreeMap::new(),
            log: Vec::new(),
            contents_log: Vec::new(),
            emissions: Vec::new(),
            actor_log: Vec::new(),
            diagnostics: Vec::new(),
            connect_attempts: Vec::new(),
            trace_propagation: false,
            propagation_trace: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn set_trace_propagation(&mut self, on: bool) {
        self.trace_propagation = on;
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn contents_log(&self) -> &[ContentsDelivery] {
        &self.contents_log
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emissions
    }

    pub fn actor_log(&self) -> &[(u64, ProcessRef, Value)] {
        &self.actor_log
    }

    pub fn diagnostics(&self) -> &[(u64, String)] {
        &self.diagnostics
    }

    pub fn connect_attempts(&self) -> &[(u64, PeerId, PeerId)] {
        &self.connect_attempts
    }

    pub fn propagation_trace(&self) -> &[TraceRecord] {
        &self.propagation_trace
    }

    pub fn is_alive(&self, p: PeerId) -> bool {
        self.peers.get(&p).is_some_and(|x| x.alive)
    }

    pub fn alive_peers(&self) -> Vec<PeerId> {
        self.peers.iter().filter(|(_, p)| p.alive).map(|(id, _)| *id).collect()
    }

    pub fn is_cut(&self, a: PeerId, b: PeerId) -> bool {
        a != b && self.cuts.contains(&pair(a, b))
    }

    pub fn latency(&self, a: PeerId, b: PeerId) -> u64 {
        if a == b {
            0
        } else {
            self.latencies.get(&pair(a, b)).copied().unwrap_or(self.cfg.latency)
        }
    }

    pub fn set_latency(&mut self, a: PeerId, b: PeerId, ticks: u64) {
        self.latencies.insert(pair(a, b), ticks);
    }

    /// Ticks after which a quiet network has converged.
    pub fn settle_ticks(&self) -> u64 {
        let max_latency = self.latencies.values().copied().chain([self.cfg.latency]).max().unwrap_or(0);
        let hb = self.cfg.heartbeat_interval;
        3 * self.cfg.miss_threshold * hb + 2 * hb + self.cfg.jitter_window + 4 * max_latency
    }

    fn jitter(&self, a: PeerId, b: PeerId) -> u64 {
        if self.cfg.jitter_window <= 1 {
            return 0;
        }
        let (lo, hi) = pair(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ((lo.0 as u64) << 32 | hi.0 as u64));
        rng.gen_range(0..self.cfg.jitter_window)
    }

    fn peer(&self, p: PeerId) -> Result<&Peer, SimError> {
        match self.peers.get(&p) {
            Some(x) if x.alive => Ok(x),
            Some(_) => Err(SimError::PeerDown(p)),
            None => Err(SimError::UnknownPeer(p)),
        }
    }

    fn peer_mut(&mut self, p: PeerId) -> Result<&mut Peer, SimError> {
        match self.peers.get_mut(&p) {
            Some(x) if x.alive => Ok(x),
            Some(_) => Err(SimError::PeerDown(p)),
            None => Err(SimError::UnknownPeer(p)),
        }
    }

    fn diag(&mut self, msg: String) {
        self.diagnostics.push((self.now, msg));
    }

    // ---- topology ----

    /// Starts `p` and defines the given flocks on it.
    pub fn join(&mut self, p: PeerId, flocks: &[&str]) -> Result<(), SimError> {
        let peer = self.peers.entry(p).or_default();
        if peer.alive {
            return Err(SimError::AlreadyJoined(p));
        }
        peer.alive = true;
        peer.incarnation += 1;
        let next = self.now + self.cfg.heartbeat_interval;
        self.enqueue(next, None, p, Body::HeartbeatTimer);
        for f in flocks {
            self.define_flock(p, f)?;
        }
        Ok(())
    }

    /// `(def-flock name)` on a running peer.
    pub fn define_flock(&mut self, p: PeerId, name: &str) -> Result<ProcessRef, SimError> {
        if let Some(local) = self.peer(p)?.flocks.get(name) {
            return Ok(ProcessRef { peer: p, local: *local });
        }
        let mut streams = BTreeMap::new();
        streams.insert(
            contents_name(),
            StreamState { retained: Some(Payload::Snapshot(IncrementalBag::new())), subscribers: Vec::new() },
        );
        let r = self.add_process(p, Process { kind: ProcessKind::Flock(FlockState::new(name)), streams })?;
        self.peer_mut(p)?.flocks.insert(name.to_string(), r.local);
        let others: Vec<PeerId> = self.registry.entry(name.to_string()).or_default().iter().copied().collect();
        self.registry.get_mut(name).expect("just inserted").insert(p);
        for q in others {
            if q == p || !self.is_alive(q) {
                continue;
            }
            self.introduce(p, q);
        }
        Ok(r)
    }

    fn introduce(&mut self, p: PeerId, q: PeerId) {
        let fresh = self.peers.get_mut(&p).map(|x| x.known.insert(q)).unwrap_or(false);
        if let Some(x) = self.peers.get_mut(&q) {
            x.known.insert(p);
        }
        let already = self.peers.get(&p).and_then(|x| x.links.get(&q)).is_some_and(|l| l.connected);
        if !fresh && already {
            return;
        }
        let initiator = p.min(q);
        let other = p.max(q);
        let at = self.now + self.jitter(initiator, other);
        self.enqueue(at, None, initiator, Body::ConnectTimer(other));
    }

    /// Stops `p`: its processes vanish and the registry forgets it. Other
    /// peers notice through missed heartbeats.
    pub fn leave(&mut self, p: PeerId) -> Result<(), SimError> {
        let peer = self.peer_mut(p)?;
        peer.alive = false;
        peer.processes.clear();
        peer.flocks.clear();
        peer.links.clear();
        peer.known.clear();
        peer.pending.clear();
        for members in self.registry.values_mut() {
            members.remove(&p);
        }
        Ok(())
    }

    pub fn partition(&mut self, a: &[PeerId], b: &[PeerId]) {
        for x in a {
            for y in b {
                if x != y {
                    self.cuts.insert(pair(*x, *y));
                }
            }
        }
    }

    pub fn heal(&mut self) {
        self.cuts.clear();
    }

    fn shares_flock(&self, p: PeerId, q: PeerId) -> bool {
        let Some(peer) = self.peers.get(&p) else { return false };
        peer.flocks.keys().any(|f| self.registry.get(f).is_some_and(|s| s.contains(&q)))
    }

    // ---- processes ----

    fn add_process(&mut self, p: PeerId, proc: Process) -> Result<ProcessRef, SimError> {
        let peer = self.peer_mut(p)?;
        let local = peer.next_local;
        peer.next_local += 1;
        peer.processes.insert(local, proc);
        Ok(ProcessRef { peer: p, local })
    }

    /// Spawns an actor and runs its constructor.
    pub fn spawn_actor(
        &mut self,
        p: PeerId,
        behaviour: &ActorBehaviour,
        constructor: &str,
        args: &[Value],
    ) -> Result<ProcessRef, SimError> {
        behaviour.check_constructor(constructor, args)?;
        let streams = behaviour.streams().iter().map(|s| (s.clone(), StreamState::default())).collect();
        let kind = ProcessKind::Actor { behaviour: Arc::new(behaviour.clone()), state: BTreeMap::new() };
        let r = self.add_process(p, Process { kind, streams })?;
        self.run_actor(r, constructor, args, true)?;
        Ok(r)
    }

    /// Spawns a reactor and runs its initial turn.
    pub fn spawn_reactor(&mut self, p: PeerId, behaviour: &ReactorBehaviour) -> Result<ProcessRef, SimError> {
        let (reactor, outcome) = {
            let peer = self.peer(p)?;
            let dir = PeerDir { id: p, peer };
            Reactor::spawn_with(behaviour, &dir, self.cfg.scheme, self.trace_propagation)?
        };
        let mut streams = BTreeMap::new();
        streams.insert(Arc::from("out"), StreamState::default());
        let r = self.add_process(p, Process { kind: ProcessKind::Reactor(Box::new(reactor)), streams })?;
        self.apply_outcome(r, outcome);
        Ok(r)
    }

    pub fn reactor(&self, r: ProcessRef) -> Option<&Reactor> {
        match self.peers.get(&r.peer)?.processes.get(&r.local)?.kind {
            ProcessKind::Reactor(ref x) => Some(x),
            _ => None,
        }
    }

    /// Retained value of a stream, if any.
    pub fn retained(&self, s: &StreamRef) -> Option<Value> {
        let st = self.peers.get(&s.owner.peer)?.processes.get(&s.owner.local)?.streams.get(&s.name)?;
        st.retained.as_ref().map(payload_value)
    }

    /// Sends a method call to an actor from outside the simulation.
    pub fn send(&mut self, to: ProcessRef, method: &str, args: Vec<Value>) {
        self.send_msg(Some(to.peer), to, ProcessMsg::Call { method: method.to_string(), args });
    }

    pub fn react_to(&mut self, reactor: ProcessRef, input: ReactInput) {
        self.send_msg(Some(reactor.peer), reactor, ProcessMsg::ReactTo(input));
    }

    /// `(monitor! target.stream 'method)` on behalf of `subscriber`.
    pub fn monitor(&mut self, subscriber: ProcessRef, stream: StreamRef, method: &str) {
        let sub = Subscriber { process: subscriber, tag: SubTag::Method(method.to_string()), format: CollectionMode::Incremental };
        self.subscribe(subscriber.peer, stream, sub, true);
    }

    /// Emits on behalf of `owner`; the stream must be one it declared.
    pub fn emit_as(&mut self, owner: ProcessRef, stream: &str, value: Value) -> Result<(), SimError> {
        let proc = self.peer(owner.peer)?.processes.get(&owner.local).ok_or(SimError::UnknownProcess(owner))?;
        if !matches!(proc.kind, ProcessKind::Actor { .. }) {
            return Err(SimError::NotAnActor(owner));
        }
        if !proc.streams.contains_key(stream) {
            return Err(ActorError::UnknownStream(stream.to_string()).into());
        }
        self.emit(owner, stream, value);
        Ok(())
    }

    pub fn publish(&mut self, flock: &str, member: ProcessRef) -> Result<(), SimError> {
        self.flock_change(member.peer, flock, member, true)
    }

    pub fn unpublish(&mut self, flock: &str, member: ProcessRef) -> Result<(), SimError> {
        self.flock_change(member.peer, flock, member, false)
    }

    fn flock_ref(&self, p: PeerId, name: &str) -> Result<ProcessRef, SimError> {
        match self.peer(p)?.flocks.get(name) {
            Some(local) => Ok(ProcessRef { peer: p, local: *local }),
            None => Err(SimError::UnknownFlock { peer: p, flock: name.to_string() }),
        }
    }

    /// The flock process `name` on peer `p`.
    pub fn flock(&self, p: PeerId, name: &str) -> Option<ProcessRef> {
        self.flock_ref(p, name).ok()
    }

    fn flock_state(&mut self, f: ProcessRef) -> Option<&mut FlockState> {
        match &mut self.peers.get_mut(&f.peer)?.processes.get_mut(&f.local)?.kind {
            ProcessKind::Flock(s) => Some(s),
            _ => None,
        }
    }

    /// The flock's current contents on peer `p`, as a multiset.
    pub fn contents(&self, p: PeerId, flock: &str) -> Option<Members> {
        let f = self.flock_ref(p, flock).ok()?;
        match &self.peers[&p].processes[&f.local].kind {
            ProcessKind::Flock(s) => Some(s.content_members()),
            _ => None,
        }
    }

    fn own_members(&self, p: PeerId, flock: &str) -> Members {
        let Ok(f) = self.flock_ref(p, flock) else { return Members::new() };
        match &self.peers[&p].processes[&f.local].kind {
            ProcessKind::Flock(s) => s.own_members().clone(),
            _ => Members::new(),
        }
    }

    /// What `p`'s contents should be: its own members plus those of every
    /// running peer in the registry for `flock` that it is not cut off from.
    pub fn ground_truth(&self, p: PeerId, flock: &str) -> Members {
        let mut out = self.own_members(p, flock);
        if !self.is_alive(p) {
            return out;
        }
        if let Some(peers) = self.registry.get(flock) {
            for q in peers {
                if *q == p || !self.is_alive(*q) || self.is_cut(p, *q) {
                    continue;
                }
                for (m, n) in self.own_members(*q, flock) {
                    *out.entry(m).or_default() += n;
                }
            }
        }
        out
    }

    /// Pairs whose both ends consider the link connected.
    pub fn connections(&self) -> Vec<(PeerId, PeerId)> {
        let mut out = Vec::new();
        for (p, peer) in &self.peers {
            for (q, l) in &peer.links {
                if p < q && l.connected && self.peers.get(q).and_then(|x| x.links.get(p)).is_some_and(|m| m.connected) {
                    out.push((*p, *q));
                }
            }
        }
        out
    }

    /// Links that only one end considers connected.
    pub fn half_open(&self) -> usize {
        let mut n = 0;
        for (p, peer) in &self.peers {
            for (q, l) in &peer.links {
                let other = self.peers.get(q).and_then(|x| x.links.get(p)).is_some_and(|m| m.connected);
                if l.connected && !other {
                    n += 1;
                }
            }
        }
        n
    }
}

// ---- messaging and event loop ----

impl NetSim {
    fn enqueue(&mut self, tick: u64, from: Option<PeerId>, to: PeerId, body: Body) {
        let to_incarnation = self.peers.get(&to).map(|p| p.incarnation).unwrap_or(0);
        self.seq += 1;
        self.queue.insert((tick, self.seq), Envelope { from, to, to_incarnation, body });
    }

    fn kind_of(body: &Body) -> (&'static str, String) {
        match body {
            Body::Process { to, msg } => match msg {
                ProcessMsg::StreamValue { stream, payload, .. } => {
                    ("stream", format!("{}.{} -> {} {}", stream.owner, stream.name, to, payload.kind()))
                }
                ProcessMsg::Call { method, .. } => ("call", format!("{to} {method}")),
                ProcessMsg::ReactTo(_) => ("react", to.to_string()),
                ProcessMsg::Subscribe { stream, .. } => ("subscribe", format!("{}.{}", stream.owner, stream.name)),
                ProcessMsg::Unsubscribe { stream, .. } => ("unsubscribe", format!("{}.{}", stream.owner, stream.name)),
            },
            Body::Peer(m) => match m {
                PeerMsg::Connect => ("connect", String::new()),
                PeerMsg::Ack => ("ack", String::new()),
                PeerMsg::Heartbeat(fs) => {
                    let parts: Vec<String> = fs.iter().map(|(f, (v, m))| format!("{f}@{v}:{}", m.values().sum::<u32>())).collect();
                    ("heartbeat", parts.join(","))
                }
                PeerMsg::Delta { flock, version, member, added } => {
                    ("delta", format!("{flock}@{version} {}{member}", if *added { '+' } else { '-' }))
                }
            },
            Body::HeartbeatTimer => ("heartbeat-timer", String::new()),
            Body::ConnectTimer(q) => ("connect-timer", q.to_string()),
        }
    }

    fn record(&mut self, seq: u64, from: Option<PeerId>, to: PeerId, body: &Body, dropped: bool) {
        if matches!(body, Body::HeartbeatTimer | Body::ConnectTimer(_)) {
            return;
        }
        let (kind, detail) = Self::kind_of(body);
        self.log.push(LogRecord { tick: self.now, seq, from, to, kind, detail, dropped });
    }

    /// Sends over the link `from -> to`; messages into a cut are lost.
    fn transmit(&mut self, from: PeerId, to: PeerId, body: Body) {
        if self.is_cut(from, to) {
            self.seq += 1;
            let seq = self.seq;
            self.record(seq, Some(from), to, &body, true);
            return;
        }
        let mut tick = self.now + self.latency(from, to);
        let clock = self.link_clock.entry((from, to)).or_default();
        tick = tick.max(*clock);
        *clock = tick;
        self.enqueue(tick, Some(from), to, body);
    }

    fn send_msg(&mut self, from: Option<PeerId>, to: ProcessRef, msg: ProcessMsg) {
        let body = Body::Process { to, msg };
        match from {
            Some(f) => self.transmit(f, to.peer, body),
            None => self.enqueue(self.now, None, to.peer, body),
        }
    }

    /// Delivers the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((tick, seq), env)) = self.queue.pop_first() else { return false };
        self.now = self.now.max(tick);
        let live = self.peers.get(&env.to).is_some_and(|p| p.alive && p.incarnation == env.to_incarnation);
        let cut = env.from.is_some_and(|f| self.is_cut(f, env.to));
        self.record(seq, env.from, env.to, &env.body, !live || cut);
        if !live || cut {
            return true;
        }
        match env.body {
            Body::Process { to, msg } => self.on_process_msg(to, msg),
            Body::Peer(m) => {
                if let Some(from) = env.from {
                    self.on_peer_msg(from, env.to, m);
                }
            }
            Body::HeartbeatTimer => self.on_heartbeat_timer(env.to),
            Body::ConnectTimer(q) => self.on_connect_timer(env.to, q),
        }
        true
    }

    /// Runs every event scheduled at or before `tick`.
    pub fn run_until(&mut self, tick: u64) {
        while self.queue.first_key_value().is_some_and(|((t, _), _)| *t <= tick) {
            self.step();
        }
        self.now = self.now.max(tick);
    }

    pub fn run_for(&mut self, ticks: u64) {
        self.run_until(self.now + ticks);
    }

    pub fn settle(&mut self) {
        self.run_for(self.settle_ticks());
    }

    // ---- process messages ----

    fn on_process_msg(&mut self, to: ProcessRef, msg: ProcessMsg) {
        let Some(proc) = self.peers.get(&to.peer).and_then(|p| p.processes.get(&to.local)) else {
            self.diag(format!("message for unknown process {to}"));
            return;
        };
        let is_reactor = matches!(proc.kind, ProcessKind::Reactor(_));
        let is_actor = matches!(proc.kind, ProcessKind::Actor { .. });
        match msg {
            ProcessMsg::StreamValue { stream, sub, payload } => {
                if matches!(payload, Payload::Snapshot(_) | Payload::Patch(_)) {
                    self.contents_log.push(ContentsDelivery {
                        tick: self.now,
                        flock: stream.owner,
                        subscriber: sub.clone(),
                        payload: payload.clone(),
                    });
                }
                match sub.tag {
                    SubTag::Node(tag) if is_reactor => self.run_reactor(to, Stimulus::Stream { tag, payload }),
                    SubTag::Method(m) if is_actor => {
                        if let Err(e) = self.run_actor(to, &m, &[payload_value(&payload)], false) {
                            self.diag(format!("{to}: {e}"));
                        }
                    }
                    _ => self.diag(format!("{to} cannot take stream values")),
                }
            }
            ProcessMsg::Call { method, args } => {
                if !is_actor {
                    self.diag(format!("{to} is not an actor"));
                } else if let Err(e) = self.run_actor(to, &method, &args, false) {
                    self.diag(format!("{to}: {e}"));
                }
            }
            ProcessMsg::ReactTo(input) => {
                if is_reactor {
                    self.run_reactor(to, Stimulus::ReactTo(input));
                } else {
                    self.diag(format!("{to} is not a reactor"));
                }
            }
            ProcessMsg::Subscribe { stream, sub, replay } => self.add_subscriber(&stream, sub, replay),
            ProcessMsg::Unsubscribe { stream, process, tag } => self.remove_subscriber(&stream, process, &tag),
        }
    }

    fn stream_state(&mut self, s: &StreamRef) -> Option<&mut StreamState> {
        self.peers.get_mut(&s.owner.peer)?.processes.get_mut(&s.owner.local)?.streams.get_mut(&s.name)
    }

    fn add_subscriber(&mut self, stream: &StreamRef, sub: Subscriber, replay: bool) {
        let Some(st) = self.stream_state(stream) else {
            self.diag(format!("subscribe to unknown stream {}.{}", stream.owner, stream.name));
            return;
        };
        st.subscribers.retain(|s| !(s.process == sub.process && s.tag == sub.tag));
        st.subscribers.push(sub.clone());
        let retained = if replay { st.retained.clone() } else { None };
        if let Some(payload) = retained {
            self.deliver(stream, sub, payload);
        }
    }

    fn remove_subscriber(&mut self, stream: &StreamRef, process: ProcessRef, tag: &SubTag) {
        if let Some(st) = self.stream_state(stream) {
            st.subscribers.retain(|s| !(s.process == process && &s.tag == tag));
        }
    }

    fn deliver(&mut self, stream: &StreamRef, sub: Subscriber, payload: Payload) {
        let to = sub.process;
        self.send_msg(Some(stream.owner.peer), to, ProcessMsg::StreamValue { stream: stream.clone(), sub, payload });
    }

    fn subscribe(&mut self, from: PeerId, stream: StreamRef, sub: Subscriber, replay: bool) {
        if stream.owner.peer == from {
            self.add_subscriber(&stream, sub, replay);
            return;
        }
        let owner = stream.owner;
        let msg = ProcessMsg::Subscribe { stream, sub, replay };
        if self.is_cut(from, owner.peer) {
            if let Some(p) = self.peers.get_mut(&from) {
                p.pending.push((owner.peer, owner, msg));
            }
        } else {
            self.send_msg(Some(from), owner, msg);
        }
    }

    /// Sets the retained value of a stream and pushes it to every subscriber.
    fn emit(&mut self, owner: ProcessRef, stream: &str, value: Value) {
        let s = StreamRef::new(owner, stream);
        let Some(st) = self.stream_state(&s) else { return };
        st.retained = Some(Payload::Value(value.clone()));
        let subs = st.subscribers.clone();
        for sub in subs {
            self.deliver(&s, sub, Payload::Value(value.clone()));
        }
    }

    fn take_process(&mut self, r: ProcessRef) -> Option<Process> {
        self.peers.get_mut(&r.peer)?.processes.remove(&r.local)
    }

    fn put_process(&mut self, r: ProcessRef, p: Process) {
        if let Some(peer) = self.peers.get_mut(&r.peer) {
            peer.processes.insert(r.local, p);
        }
    }

    fn run_reactor(&mut self, r: ProcessRef, stimulus: Stimulus) {
        let Some(mut proc) = self.take_process(r) else { return };
        let result = match &mut proc.kind {
            ProcessKind::Reactor(reactor) => {
                let peer = &self.peers[&r.peer];
                reactor.handle(stimulus, &PeerDir { id: r.peer, peer })
            }
            _ => Ok(TurnOutcome::default()),
        };
        self.put_process(r, proc);
        match result {
            Ok(outcome) => self.apply_outcome(r, outcome),
            Err(e) => self.diag(format!("{r}: {e}")),
        }
    }

    fn apply_outcome(&mut self, r: ProcessRef, outcome: TurnOutcome) {
        if self.trace_propagation {
            self.propagation_trace.extend(outcome.trace);
        }
        for effect in outcome.effects {
            match effect {
                Effect::Subscribe { stream, tag, replay_retained, format } => {
                    let sub = Subscriber { process: r, tag: SubTag::Node(tag), format };
                    self.subscribe(r.peer, stream, sub, replay_retained);
                }
                Effect::Unsubscribe { stream, tag } => {
                    if stream.owner.peer == r.peer {
                        self.remove_subscriber(&stream, r, &SubTag::Node(tag));
                    } else {
                        let owner = stream.owner;
                        self.send_msg(Some(r.peer), owner, ProcessMsg::Unsubscribe { stream, process: r, tag: SubTag::Node(tag) });
                    }
                }
            }
        }
        if let Some(v) = outcome.emission {
            self.emissions.push(Emission { tick: self.now, reactor: r, value: v.clone() });
            self.emit(r, "out", v);
        }
    }

    fn run_actor(&mut self, r: ProcessRef, name: &str, args: &[Value], constructor: bool) -> Result<(), SimError> {
        let proc = self.peer_mut(r.peer)?.processes.get_mut(&r.local).ok_or(SimError::UnknownProcess(r))?;
        let ProcessKind::Actor { behaviour, state } = &mut proc.kind else { return Err(SimError::NotAnActor(r)) };
        let behaviour = behaviour.clone();
        let mut scratch = state.clone();
        let streams = behaviour.streams().to_vec();
        let mut cx = ActorContext::new(r, self.now, &streams, &mut scratch);
        let result = if constructor {
            behaviour.run_constructor(&mut cx, name, args)
        } else {
            behaviour.run_method(&mut cx, name, args)
        };
        let commands = cx.into_commands();
        if let Err(e) = result {
            if constructor {
                self.take_process(r);
            }
            return Err(e.into());
        }
        if let Some(ProcessKind::Actor { state, .. }) =
            self.peers.get_mut(&r.peer).and_then(|p| p.processes.get_mut(&r.local)).map(|p| &mut p.kind)
        {
            *state = scratch;
        }
        for c in commands {
            self.run_command(r, c);
        }
        Ok(())
    }

    fn run_command(&mut self, r: ProcessRef, c: Command) {
        match c {
            Command::Emit { stream, value } => self.emit(r, &stream, value),
            Command::Send { to, method, args } => self.send_msg(Some(r.peer), to, ProcessMsg::Call { method, args }),
            Command::Monitor { stream, method } => self.monitor(r, stream, &method),
            Command::Publish { flock, member } => {
                if let Err(e) = self.flock_change(r.peer, &flock, member, true) {
                    self.diag(format!("{r}: {e}"));
                }
            }
            Command::Unpublish { flock, member } => {
                if let Err(e) = self.flock_change(r.peer, &flock, member, false) {
                    self.diag(format!("{r}: {e}"));
                }
            }
            Command::ReactTo { reactor, input } => self.send_msg(Some(r.peer), reactor, ProcessMsg::ReactTo(input)),
            Command::Log(v) => self.actor_log.push((self.now, r, v)),
        }
    }
}

// ---- flocks and the peer protocol ----

impl NetSim {
    fn flock_change(&mut self, p: PeerId, name: &str, member: ProcessRef, added: bool) -> Result<(), SimError> {
        let f = self.flock_ref(p, name)?;
        let state = self.flock_state(f).ok_or(SimError::UnknownProcess(f))?;
        let patch = if added { state.publish(member)? } else { state.unpublish(member)? };
        let version = state.version();
        self.emit_contents(f, vec![patch]);
        let targets: Vec<PeerId> = self.peers[&p]
            .links
            .iter()
            .filter(|(q, l)| l.connected && self.registry.get(name).is_some_and(|s| s.contains(q)))
            .map(|(q, _)| *q)
            .collect();
        for q in targets {
            let msg = PeerMsg::Delta { flock: name.to_string(), version, member, added };
            self.transmit(p, q, Body::Peer(msg));
        }
        Ok(())
    }

    /// Pushes contents changes to subscribers in their requested format.
    fn emit_contents(&mut self, f: ProcessRef, patches: Vec<Patch>) {
        if patches.is_empty() {
            return;
        }
        let Some(bag) = self.flock_state(f).map(|s| s.contents().clone()) else { return };
        let s = StreamRef::new(f, "contents");
        let Some(st) = self.stream_state(&s) else { return };
        st.retained = Some(Payload::Snapshot(bag.clone()));
        let subs = st.subscribers.clone();
        for sub in subs {
            match sub.format {
                CollectionMode::Incremental => {
                    for p in &patches {
                        self.deliver(&s, sub.clone(), Payload::Patch(p.clone()));
                    }
                }
                CollectionMode::Bag => self.deliver(&s, sub, Payload::Snapshot(bag.clone())),
            }
        }
    }

    fn local_flocks(&self, p: PeerId) -> Vec<(String, ProcessRef)> {
        self.peers
            .get(&p)
            .map(|x| x.flocks.iter().map(|(n, l)| (n.clone(), ProcessRef { peer: p, local: *l })).collect())
            .unwrap_or_default()
    }

    /// Forgets everything learned from `q` on peer `p`.
    fn drop_views(&mut self, p: PeerId, q: PeerId) {
        for (name, f) in self.local_flocks(p) {
            let Some(state) = self.flock_state(f) else { continue };
            match state.drop_view(q) {
                Ok(patches) => self.emit_contents(f, patches),
                Err(e) => self.diag(format!("{name}: {e}")),
            }
        }
    }

    fn heartbeat_for(&self, p: PeerId) -> BTreeMap<String, (u64, Members)> {
        let mut out = BTreeMap::new();
        for (name, f) in self.local_flocks(p) {
            if let ProcessKind::Flock(s) = &self.peers[&p].processes[&f.local].kind {
                out.insert(name, (s.version(), s.own_members().clone()));
            }
        }
        out
    }

    fn link(&mut self, p: PeerId, q: PeerId) -> Option<&mut Link> {
        self.peers.get_mut(&p).map(|x| x.links.entry(q).or_default())
    }

    fn send_heartbeat(&mut self, p: PeerId, q: PeerId) {
        let hb = self.heartbeat_for(p);
        self.transmit(p, q, Body::Peer(PeerMsg::Heartbeat(hb)));
    }

    fn on_peer_msg(&mut self, from: PeerId, to: PeerId, msg: PeerMsg) {
        let now = self.now;
        let Some(link) = self.link(to, from) else { return };
        link.last_heard = now;
        let connected = link.connected;
        match msg {
            PeerMsg::Connect => {
                if connected {
                    self.drop_views(to, from);
                }
                if let Some(l) = self.link(to, from) {
                    l.connected = true;
                }
                self.peers.get_mut(&to).map(|x| x.known.insert(from));
                self.transmit(to, from, Body::Peer(PeerMsg::Ack));
                self.send_heartbeat(to, from);
            }
            PeerMsg::Ack => {
                if let Some(l) = self.link(to, from) {
                    l.connected = true;
                    l.connect_sent = None;
                }
                self.send_heartbeat(to, from);
            }
            PeerMsg::Heartbeat(flocks) => {
                if !connected {
                    return;
                }
                for (name, f) in self.local_flocks(to) {
                    let Some(state) = self.flock_state(f) else { continue };
                    let result = match flocks.get(&name) {
                        Some((v, members)) if state.view_version(from) != Some(*v) => state.set_view(from, *v, members),
                        Some(_) => Ok(Vec::new()),
                        None if state.has_view(from) => state.drop_view(from),
                        None => Ok(Vec::new()),
                    };
                    match result {
                        Ok(patches) => self.emit_contents(f, patches),
                        Err(e) => self.diag(format!("{name}: {e}")),
                    }
                }
            }
            PeerMsg::Delta { flock, version, member, added } => {
                if !connected {
                    return;
                }
                let Ok(f) = self.flock_ref(to, &flock) else { return };
                let Some(state) = self.flock_state(f) else { return };
                match state.apply_delta(from, version, member, added) {
                    Ok(Some(patches)) => self.emit_contents(f, patches),
                    Ok(None) => {}
                    Err(e) => self.diag(format!("{flock}: {e}")),
                }
            }
        }
    }

    fn detection_window(&self) -> u64 {
        self.cfg.miss_threshold * self.cfg.heartbeat_interval
    }

    fn send_connect(&mut self, p: PeerId, q: PeerId) {
        let now = self.now;
        if let Some(l) = self.link(p, q) {
            l.connect_sent = Some(now);
        }
        self.connect_attempts.push((now, p, q));
        self.transmit(p, q, Body::Peer(PeerMsg::Connect));
    }

    fn on_connect_timer(&mut self, p: PeerId, q: PeerId) {
        if !self.shares_flock(p, q) {
            return;
        }
        let connected = self.peers[&p].links.get(&q).is_some_and(|l| l.connected);
        if connected {
            // The other side restarted: resynchronise from scratch.
            self.drop_views(p, q);
            if let Some(l) = self.link(p, q) {
                l.connected = false;
            }
        }
        self.send_connect(p, q);
    }

    fn on_heartbeat_timer(&mut self, p: PeerId) {
        let now = self.now;
        let window = self.detection_window();
        let links: Vec<(PeerId, Link)> = self.peers[&p].links.iter().map(|(q, l)| (*q, l.clone())).collect();
        for (q, l) in &links {
            if l.connected && now.saturating_sub(l.last_heard) >= window {
                if let Some(x) = self.link(p, *q) {
                    x.connected = false;
                }
                self.drop_views(p, *q);
            }
        }
        let known: Vec<PeerId> = self.peers[&p].known.iter().copied().collect();
        for q in known {
            let link = self.peers[&p].links.get(&q).cloned().unwrap_or_default();
            if link.connected {
                self.send_heartbeat(p, q);
            } else if p < q && self.shares_flock(p, q) && link.connect_sent.is_none_or(|t| now.saturating_sub(t) >= window) {
                self.send_connect(p, q);
            }
        }
        let pending = std::mem::take(&mut self.peers.get_mut(&p).expect("running peer").pending);
        for (q, to, msg) in pending {
            if self.is_cut(p, q) {
                self.peers.get_mut(&p).expect("running peer").pending.push((q, to, msg));
            } else {
                self.send_msg(Some(p), to, msg);
            }
        }
        let next = now + self.cfg.heartbeat_interval;
        self.enqueue(next, None, p, Body::HeartbeatTimer);
    }
}
