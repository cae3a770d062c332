//! The reactor runtime: instantiates behaviours into live node graphs and
//! runs glitch-free propagation turns over them.
//!
//! All runtime state lives in persistent maps, so a turn works on a cheap
//! clone and simply drops it when an error occurs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bag::{BagError, DeploymentKey, IncrementalBag, Patch};
use crate::behaviour::{BindArg, CollectionMode, FeedTemplate, ReactorBehaviour, TemplateId, TemplateKind};
use crate::deploy_star::{DeployStarError, DeployStarOutput, DeployStarState};
use crate::fold::{fold_full, size_step, FoldSpec, FoldState};
use crate::ops::{EvalError, Op};
use crate::priority::{Priority, TurnQueue};
use crate::stream::{Effect, NodeTag, Payload, StreamDirectory, StreamLookup};
use crate::trace::TraceRecord;
use crate::value::{values_equal, StreamRef, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeploymentId(pub u64);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TurnError {
    #[error("node {label} failed: {error}")]
    Eval { label: String, error: EvalError },
    #[error(transparent)]
    DeployStar(#[from] DeployStarError),
    #[error(transparent)]
    Bag(#[from] BagError),
    #[error("message rejected: {0}")]
    Rejected(String),
    #[error("unknown flock {0:?}")]
    UnknownFlock(String),
    #[error("{0}")]
    Contract(String),
}

/// How child deployments are prioritised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorityScheme {
    /// Child heights are prefixed with the creator's priority.
    #[default]
    Hierarchical,
    /// Every node only gets its static height, as if deployments were flat.
    FlatHeights,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnStats {
    pub node_executions: u64,
    /// Bag elements touched by full recomputations and per-key output checks.
    pub element_visits: u64,
    pub deployments_created: u64,
    pub deployments_destroyed: u64,
    /// deploy-* children only, without the deployments nested inside them.
    pub elements_deployed: u64,
    pub elements_torn_down: u64,
    pub max_executions_per_node: u32,
    pub elapsed: Duration,
}

impl TurnStats {
    /// Total work: executions plus element visits.
    pub fn work(&self) -> u64 {
        self.node_executions + self.element_visits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub turn: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct TurnOutcome {
    pub emission: Option<Value>,
    pub effects: Vec<Effect>,
    pub stats: TurnStats,
    pub trace: Vec<TraceRecord>,
}

/// Arguments of a `react-to` message.
#[derive(Debug, Clone, PartialEq)]
pub enum ReactInput {
    Positional(Vec<Value>),
    Named(Vec<(String, Value)>),
}

#[derive(Debug, Clone)]
pub enum Stimulus {
    ReactTo(ReactInput),
    Stream { tag: NodeTag, payload: Payload },
}

#[derive(Debug, Clone)]
enum Feed {
    External,
    Const(Value),
    Node(NodeId),
    Element,
}

#[derive(Debug, Clone)]
struct DsNode {
    behaviour: ReactorBehaviour,
    feeds: Arc<[FeedTemplate]>,
    mode: CollectionMode,
    state: DeployStarState,
    children: im::OrdMap<DeploymentKey, DeploymentId>,
    initialized: bool,
    out: Option<NodeId>,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Source(Feed),
    Constant,
    Apply(Op),
    Sink { notify: Option<(NodeId, DeploymentKey)> },
    Deploy { child: Option<DeploymentId> },
    DeployOut { sink: NodeId },
    DeployStar(Box<DsNode>),
    DeployStarOut { ds: NodeId },
    Qualify { stream: Arc<str>, sub: Option<(StreamRef, u64)>, next_gen: u64 },
    FlockContents { sub: Option<(StreamRef, u64)> },
    Size,
    Fold { spec: FoldSpec, state: Option<FoldState> },
}

#[derive(Debug, Clone)]
struct Node {
    deployment: DeploymentId,
    template: TemplateId,
    kind: NodeKind,
    inputs: Arc<[NodeId]>,
    dependents: im::OrdSet<NodeId>,
    priority: Priority,
    value: Value,
}

#[derive(Debug, Clone)]
struct Deployment {
    behaviour: ReactorBehaviour,
    nodes: Arc<[NodeId]>,
    sinks: Arc<[NodeId]>,
    sources: Arc<[NodeId]>,
    creator: Option<NodeId>,
    /// The Bag-mode deploy-* node this deployment (transitively) belongs to.
    bag_owner: Option<NodeId>,
    /// Created by deploy-* for one collection element.
    element: bool,
}

/// Persistent map whose values sit behind `Arc`, so a write after a
/// clone copies one entry rather than a whole tree chunk of entries.
#[derive(Debug)]
struct Table<K: Ord + Clone, V>(im::OrdMap<K, Arc<V>>);

impl<K: Ord + Clone, V> Clone for Table<K, V> {
    fn clone(&self) -> Self {
        Table(self.0.clone())
    }
}

impl<K: Ord + Clone, V> Default for Table<K, V> {
    fn default() -> Self {
        Table(im::OrdMap::new())
    }
}

impl<K: Ord + Clone, V: Clone> Table<K, V> {
    fn get(&self, k: &K) -> Option<&V> {
        self.0.get(k).map(|v| &**v)
    }

    fn get_mut(&mut self, k: &K) -> Option<&mut V> {
        self.0.get_mut(k).map(Arc::make_mut)
    }

    fn insert(&mut self, k: K, v: V) {
        self.0.insert(k, Arc::new(v));
    }

    fn remove(&mut self, k: &K) -> Option<V> {
        self.0.remove(k).map(|v| Arc::try_unwrap(v).unwrap_or_else(|a| (*a).clone()))
    }

    fn len(&self) -> usize {
        self.0.len()
    }

    fn iter(&self) -> impl Iterator<Item = (&K, &V)> {
        self.0.iter().map(|(k, v)| (k, &**v))
    }
}

impl<K: Ord + Clone, V: Clone> std::ops::Index<&K> for Table<K, V> {
    type Output = V;

    fn index(&self, k: &K) -> &V {
        self.get(k).expect("entry exists")
    }
}

#[derive(Debug, Clone, Default)]
struct State {
    nodes: Table<NodeId, Node>,
    deployments: Table<DeploymentId, Deployment>,
    next_node: u64,
    next_deployment: u64,
}

/// What changed about a collection-valued node during the current turn.
#[derive(Debug, Clone)]
enum Delta {
    Snapshot,
    Patches(Vec<Patch>),
}

#[derive(Debug, Default)]
struct DsScratch {
    snapshot: bool,
    dirty: bool,
    removals: Vec<Patch>,
    touched: BTreeSet<DeploymentKey>,
}

/// Per-turn scratch space, discarded after the turn.
struct Turn<'d> {
    number: u64,
    dir: &'d dyn StreamDirectory,
    scheme: PriorityScheme,
    queue: TurnQueue<NodeId>,
    staged: BTreeMap<NodeId, Value>,
    payloads: BTreeMap<NodeId, Payload>,
    deltas: BTreeMap<NodeId, Delta>,
    ds: BTreeMap<NodeId, DsScratch>,
    exec_counts: BTreeMap<NodeId, u32>,
    effects: Vec<Effect>,
    diagnostics: Vec<String>,
    root_sink_changed: bool,
    stats: TurnStats,
    tracing: bool,
    trace: Vec<TraceRecord>,
}

/// Summary of one live deployment, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentInfo {
    pub id: DeploymentId,
    pub behaviour: String,
    pub creator: Option<NodeId>,
    pub priorities: Vec<Priority>,
}

/// A running reactor: one root deployment plus everything it deployed.
#[derive(Debug, Clone)]
pub struct Reactor {
    behaviour: ReactorBehaviour,
    state: State,
    root: DeploymentId,
    scheme: PriorityScheme,
    tracing: bool,
    turns: u64,
    diagnostics: Vec<Diagnostic>,
}

impl Reactor {
    /// Instantiates `behaviour` and runs its initial turn.
    pub fn spawn(behaviour: &ReactorBehaviour, dir: &dyn StreamDirectory) -> Result<(Reactor, TurnOutcome), TurnError> {
        Self::spawn_with(behaviour, dir, PriorityScheme::default(), false)
    }

    pub fn spawn_with(
        behaviour: &ReactorBehaviour,
        dir: &dyn StreamDirectory,
        scheme: PriorityScheme,
        tracing: bool,
    ) -> Result<(Reactor, TurnOutcome), TurnError> {
        let mut feeds = Vec::new();
        for b in behaviour.bound() {
            match b {
                BindArg::Value(v) => feeds.push(Feed::Const(v.clone())),
                BindArg::Node(_) => {
                    return Err(TurnError::Contract(format!("{} is bound to nodes of another behaviour", behaviour.name())))
                }
            }
        }
        feeds.extend((0..behaviour.unbound_count()).map(|_| Feed::External));
        let mut r = Reactor {
            behaviour: behaviour.clone(),
            state: State::default(),
            root: DeploymentId(0),
            scheme,
            tracing,
            turns: 0,
            diagnostics: Vec::new(),
        };
        let b = behaviour.clone();
        let outcome = r.run_turn(dir, move |state, turn| instantiate(state, turn, &b, None, feeds, None, None, None).map(|_| ()))?;
        Ok((r, outcome))
    }

    pub fn behaviour(&self) -> &ReactorBehaviour {
        &self.behaviour
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn turns(&self) -> u64 {
        self.turns
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn node_count(&self) -> usize {
        self.state.nodes.len()
    }

    pub fn deployment_count(&self) -> usize {
        self.state.deployments.len()
    }

    /// Current sink values of the root deployment.
    pub fn sink_values(&self) -> Vec<Value> {
        self.state.deployments[&self.root].sinks.iter().map(|s| self.state.nodes[s].value.clone()).collect()
    }

    /// The value the reactor would emit now: its single sink value, or the
    /// tuple of all sinks. None while any sink is NoValue.
    pub fn output(&self) -> Option<Value> {
        let sinks = self.sink_values();
        if sinks.iter().any(Value::is_no_value) {
            return None;
        }
        if sinks.len() == 1 {
            sinks.into_iter().next()
        } else {
            Some(Value::tuple(sinks))
        }
    }

    pub fn deployments(&self) -> Vec<DeploymentInfo> {
        let mut out: Vec<DeploymentInfo> = self
            .state
            .deployments
            .iter()
            .map(|(id, d)| DeploymentInfo {
                id: *id,
                behaviour: d.behaviour.name().to_string(),
                creator: d.creator,
                priorities: d.nodes.iter().map(|n| self.state.nodes[n].priority.clone()).collect(),
            })
            .collect();
        out.sort_by_key(|d| d.id);
        out
    }

    /// Live stream subscriptions held by qualification and flock nodes.
    pub fn subscriptions(&self) -> Vec<(StreamRef, NodeTag)> {
        let mut out: Vec<(StreamRef, NodeTag)> = self
            .state
            .nodes
            .iter()
            .filter_map(|(id, n)| match &n.kind {
                NodeKind::Qualify { sub: Some((s, g)), .. } | NodeKind::FlockContents { sub: Some((s, g)) } => {
                    Some((s.clone(), NodeTag { node: id.0, generation: *g }))
                }
                _ => None,
            })
            .collect();
        out.sort();
        out
    }

    /// Whether a delivery for `tag` would still be accepted.
    pub fn accepts(&self, tag: NodeTag) -> bool {
        match self.state.nodes.get(&NodeId(tag.node)).map(|n| &n.kind) {
            Some(NodeKind::Qualify { sub: Some((_, g)), .. }) | Some(NodeKind::FlockContents { sub: Some((_, g)) }) => {
                *g == tag.generation
            }
            _ => false,
        }
    }

    pub fn react_to(&mut self, input: ReactInput, dir: &dyn StreamDirectory) -> Result<TurnOutcome, TurnError> {
        self.handle(Stimulus::ReactTo(input), dir)
    }

    /// Positional `react-to`.
    pub fn react(&mut self, values: &[Value], dir: &dyn StreamDirectory) -> Result<TurnOutcome, TurnError> {
        self.react_to(ReactInput::Positional(values.to_vec()), dir)
    }

    /// Runs one turn for `stimulus`. Stale stream deliveries are dropped
    /// without a turn. On error the reactor keeps its pre-turn state.
    pub fn handle(&mut self, stimulus: Stimulus, dir: &dyn StreamDirectory) -> Result<TurnOutcome, TurnError> {
        match stimulus {
            Stimulus::ReactTo(input) => {
                let staged = match self.stage_react(input) {
                    Ok(s) => s,
                    Err(e) => {
                        self.diagnostics.push(Diagnostic { turn: self.turns, message: e.to_string() });
                        return Err(e);
                    }
                };
                self.run_turn(dir, move |state, turn| {
                    for (id, v) in staged {
                        turn.staged.insert(id, v);
                        schedule(state, turn, id);
                    }
                    Ok(())
                })
            }
            Stimulus::Stream { tag, payload } => {
                if !self.accepts(tag) {
                    return Ok(TurnOutcome::default());
                }
                let id = NodeId(tag.node);
                self.run_turn(dir, move |state, turn| {
                    turn.payloads.insert(id, payload);
                    schedule(state, turn, id);
                    Ok(())
                })
            }
        }
    }

    fn stage_react(&self, input: ReactInput) -> Result<Vec<(NodeId, Value)>, TurnError> {
        let root = &self.state.deployments[&self.root];
        let bound = self.behaviour.bound().len();
        let external = &root.sources[bound..];
        let names = self.behaviour.unbound_source_names();
        match input {
            ReactInput::Positional(values) => {
                if values.len() != external.len() {
                    return Err(TurnError::Rejected(format!(
                        "{} expects {} values, got {}",
                        self.behaviour.name(),
                        external.len(),
                        values.len()
                    )));
                }
                Ok(external.iter().copied().zip(values).collect())
            }
            ReactInput::Named(pairs) => {
                let mut out = Vec::with_capacity(pairs.len());
                for (name, v) in pairs {
                    let Some(i) = names.iter().position(|n| n.as_ref() == name) else {
                        return Err(TurnError::Rejected(format!("{} has no source {name:?}", self.behaviour.name())));
                    };
                    if out.iter().any(|(id, _)| *id == external[i]) {
                        return Err(TurnError::Rejected(format!("source {name:?} given twice")));
                    }
                    out.push((external[i], v));
                }
                if out.len() != external.len() {
                    return Err(TurnError::Rejected(format!(
                        "{} expects {} named values, got {}",
                        self.behaviour.name(),
                        external.len(),
                        out.len()
                    )));
                }
                Ok(out)
            }
        }
    }

    fn run_turn(
        &mut self,
        dir: &dyn StreamDirectory,
        seed: impl FnOnce(&mut State, &mut Turn) -> Result<(), TurnError>,
    ) -> Result<TurnOutcome, TurnError> {
        self.turns += 1;
        let start = Instant::now();
        let mut state = self.state.clone();
        let mut turn = Turn {
            number: self.turns,
            dir,
            scheme: self.scheme,
            queue: TurnQueue::new(),
            staged: BTreeMap::new(),
            payloads: BTreeMap::new(),
            deltas: BTreeMap::new(),
            ds: BTreeMap::new(),
            exec_counts: BTreeMap::new(),
            effects: Vec::new(),
            diagnostics: Vec::new(),
            root_sink_changed: false,
            stats: TurnStats::default(),
            tracing: self.tracing,
            trace: Vec::new(),
        };
        let result = seed(&mut state, &mut turn).and_then(|_| propagate(&mut state, &mut turn, self.root));
        let number = self.turns;
        self.diagnostics.extend(turn.diagnostics.drain(..).map(|message| Diagnostic { turn: number, message }));
        if let Err(e) = result {
            self.diagnostics.push(Diagnostic { turn: number, message: e.to_string() });
            return Err(e);
        }
        self.state = state;
        let emission = if turn.root_sink_changed { self.output() } else { None };
        turn.stats.elapsed = start.elapsed();
        Ok(TurnOutcome { emission, effects: turn.effects, stats: turn.stats, trace: turn.trace })
    }
}

fn schedule(state: &State, turn: &mut Turn, id: NodeId) {
    if let Some(n) = state.nodes.get(&id) {
        turn.queue.schedule(id, n.priority.clone());
    }
}

fn propagate(state: &mut State, turn: &mut Turn, root: DeploymentId) -> Result<(), TurnError> {
    while let Some((id, _)) = turn.queue.pop() {
        execute(state, turn, id, root)?;
    }
    Ok(())
}

enum Computed {
    Value(Value),
    /// A collection-valued result; it counts as changed when a delta is
    /// given or it moves between NoValue and a bag.
    Collection(Value, Option<Delta>),
    Unchanged,
}

fn value_of(state: &State, id: NodeId) -> Value {
    state.nodes.get(&id).map(|n| n.value.clone()).unwrap_or_default()
}

fn label_of(state: &State, id: NodeId) -> String {
    let n = &state.nodes[&id];
    let d = &state.deployments[&n.deployment];
    format!("{}/{}", d.behaviour.name(), d.behaviour.node(n.template).kind.label())
}

fn execute(state: &mut State, turn: &mut Turn, id: NodeId, root: DeploymentId) -> Result<(), TurnError> {
    let Some(node) = state.nodes.get(&id) else { return Ok(()) };
    let kind = node.kind.clone();
    let inputs = node.inputs.clone();
    let old = node.value.clone();
    if let Some(owner) = state.deployments.get(&node.deployment).and_then(|d| d.bag_owner) {
        mark_dirty(state, turn, owner);
    }
    turn.stats.node_executions += 1;
    let count = turn.exec_counts.entry(id).or_insert(0);
    *count += 1;
    turn.stats.max_executions_per_node = turn.stats.max_executions_per_node.max(*count);

    let computed = match kind {
        NodeKind::Source(Feed::External | Feed::Element) => match turn.staged.remove(&id) {
            Some(v) => Computed::Value(v),
            None => Computed::Unchanged,
        },
        NodeKind::Source(Feed::Const(v)) => Computed::Value(v),
        NodeKind::Source(Feed::Node(n)) => Computed::Value(value_of(state, n)),
        NodeKind::Constant => Computed::Unchanged,
        NodeKind::Apply(op) => {
            let args: Vec<Value> = inputs.iter().map(|i| value_of(state, *i)).collect();
            if args.iter().any(Value::is_no_value) {
                Computed::Value(Value::NoValue)
            } else {
                let v = op.call(&args).map_err(|error| TurnError::Eval { label: label_of(state, id), error })?;
                Computed::Value(v)
            }
        }
        NodeKind::Sink { .. } => Computed::Value(value_of(state, inputs[0])),
        NodeKind::Deploy { .. } => Computed::Value(Value::tuple(inputs.iter().map(|i| value_of(state, *i)))),
        NodeKind::DeployOut { sink } => Computed::Value(value_of(state, sink)),
        NodeKind::DeployStar(_) => {
            run_deploy_star(state, turn, id)?;
            Computed::Unchanged
        }
        NodeKind::DeployStarOut { ds } => run_deploy_star_out(state, turn, ds, &inputs, &old)?,
        NodeKind::Qualify { .. } => run_qualify(state, turn, id, &old)?,
        NodeKind::FlockContents { .. } => match turn.payloads.remove(&id) {
            None => Computed::Unchanged,
            Some(Payload::Snapshot(b)) => Computed::Collection(Value::Bag(b), Some(Delta::Snapshot)),
            Some(Payload::Patch(p)) => {
                let Some(cur) = old.as_bag() else {
                    return Err(TurnError::Contract(format!("{}: patch before snapshot", label_of(state, id))));
                };
                let next = cur.apply(&p)?;
                Computed::Collection(Value::Bag(next), Some(Delta::Patches(vec![p])))
            }
            Some(Payload::Value(v)) => {
                return Err(TurnError::Contract(format!("{}: expected a collection, got {v}", label_of(state, id))))
            }
        },
        NodeKind::Size => run_size(state, turn, id, inputs[0], &old)?,
        NodeKind::Fold { spec, state: fs } => run_fold(state, turn, id, inputs[0], spec, fs)?,
    };

    let (new, delta) = match computed {
        Computed::Unchanged => {
            record(state, turn, id, true, &old, &old);
            return Ok(());
        }
        Computed::Value(v) => {
            if values_equal(&v, &old) {
                record(state, turn, id, true, &old, &old);
                return Ok(());
            }
            (v, None)
        }
        Computed::Collection(v, delta) => {
            if delta.is_none() && v.is_no_value() == old.is_no_value() {
                record(state, turn, id, true, &old, &old);
                return Ok(());
            }
            (v, delta)
        }
    };
    record(state, turn, id, true, &old, &new);
    let node = state.nodes.get_mut(&id).expect("executed node exists");
    node.value = new;
    let dependents: Vec<NodeId> = node.dependents.iter().copied().collect();
    let deployment = node.deployment;
    if let NodeKind::Sink { notify } = &node.kind {
        match notify {
            Some((ds, key)) => {
                turn.ds.entry(*ds).or_default().touched.insert(*key);
            }
            None if deployment == root => turn.root_sink_changed = true,
            None => {}
        }
    }
    match delta {
        Some(d) => {
            turn.deltas.insert(id, d);
        }
        None => {
            turn.deltas.remove(&id);
        }
    }
    for d in dependents {
        schedule(state, turn, d);
    }
    Ok(())
}

/// Any activity inside a Bag-mode deploy-* forces a whole new output bag.
fn mark_dirty(state: &State, turn: &mut Turn, ds: NodeId) {
    turn.ds.entry(ds).or_default().dirty = true;
    if let Some(Node { kind: NodeKind::DeployStar(d), .. }) = state.nodes.get(&ds) {
        if let Some(out) = d.out {
            schedule(state, turn, out);
        }
    }
}

fn record(state: &State, turn: &mut Turn, id: NodeId, executed: bool, old: &Value, new: &Value) {
    if !turn.tracing {
        return;
    }
    let n = &state.nodes[&id];
    turn.trace.push(TraceRecord {
        turn: turn.number,
        node: id.0,
        deployment: n.deployment.0,
        priority: n.priority.heights().to_vec(),
        label: label_of(state, id),
        executed,
        old: old.clone(),
        new: new.clone(),
    });
}

fn collection_input(state: &State, id: NodeId, input: NodeId) -> Result<Option<IncrementalBag>, TurnError> {
    match value_of(state, input) {
        Value::NoValue => Ok(None),
        Value::Bag(b) => Ok(Some(b)),
        other => Err(TurnError::Eval {
            label: label_of(state, id),
            error: EvalError::Type { op: label_of(state, id), expected: "bag", got: other.to_string() },
        }),
    }
}

fn run_size(state: &State, turn: &mut Turn, id: NodeId, input: NodeId, old: &Value) -> Result<Computed, TurnError> {
    let Some(bag) = collection_input(state, id, input)? else { return Ok(Computed::Value(Value::NoValue)) };
    if let (Some(Delta::Patches(ps)), Some(n)) = (turn.deltas.get(&input), old.as_number()) {
        turn.stats.element_visits += ps.len() as u64;
        return Ok(Computed::Value(Value::Number(ps.iter().fold(n, size_step))));
    }
    let n = bag.values().count();
    turn.stats.element_visits += n as u64;
    Ok(Computed::Value(Value::Number(n as f64)))
}

fn run_fold(
    state: &mut State,
    turn: &mut Turn,
    id: NodeId,
    input: NodeId,
    spec: FoldSpec,
    fs: Option<FoldState>,
) -> Result<Computed, TurnError> {
    let eval = |state: &State, error| TurnError::Eval { label: label_of(state, id), error };
    let Some(bag) = collection_input(state, id, input)? else {
        set_fold_state(state, id, None);
        return Ok(Computed::Value(Value::NoValue));
    };
    let mut next: Option<(Value, FoldState)> = None;
    if let (Some(Delta::Patches(ps)), Some(mut st)) = (turn.deltas.get(&input).cloned(), fs) {
        let mut acc = st.acc.clone();
        let mut refolded = false;
        for p in &ps {
            if spec.refold_every.is_some_and(|every| st.steps_since_refold + 1 >= every) {
                refolded = true;
                break;
            }
            turn.stats.element_visits += 1;
            let (a, s) = crate::fold::fold_step(&st, p, &spec).map_err(|e| eval(state, e))?;
            acc = a;
            st = s;
        }
        if !refolded {
            next = Some((acc, st));
        }
    }
    let (acc, st) = match next {
        Some(r) => r,
        None => {
            turn.stats.element_visits += bag.len() as u64;
            fold_full(&bag, &spec).map_err(|e| eval(state, e))?
        }
    };
    set_fold_state(state, id, Some(st));
    Ok(Computed::Value(acc))
}

fn set_fold_state(state: &mut State, id: NodeId, fs: Option<FoldState>) {
    if let Some(NodeKind::Fold { state: s, .. }) = state.nodes.get_mut(&id).map(|n| &mut n.kind) {
        *s = fs;
    }
}

#[allow(clippy::too_many_arguments)]
fn instantiate(
    state: &mut State,
    turn: &mut Turn,
    behaviour: &ReactorBehaviour,
    prefix: Option<&Priority>,
    feeds: Vec<Feed>,
    creator: Option<NodeId>,
    notify: Option<(NodeId, DeploymentKey)>,
    bag_owner: Option<NodeId>,
) -> Result<DeploymentId, TurnError> {
    let dep = DeploymentId(state.next_deployment);
    state.next_deployment += 1;
    let mut ids: Vec<NodeId> = Vec::with_capacity(behaviour.nodes().len());
    for (i, t) in behaviour.nodes().iter().enumerate() {
        let id = NodeId(state.next_node);
        state.next_node += 1;
        ids.push(id);
        let priority = match (prefix, turn.scheme) {
            (Some(p), PriorityScheme::Hierarchical) => p.child(t.height),
            _ => Priority::root(t.height),
        };
        let mut inputs: Vec<NodeId> = t.inputs.iter().map(|x| ids[x.0]).collect();
        let mut value = Value::NoValue;
        let mut run_now = true;
        let kind = match &t.kind {
            TemplateKind::Source { index } => {
                let f = feeds.get(*index).cloned().unwrap_or(Feed::External);
                if let Feed::Node(n) = f {
                    inputs.push(n);
                }
                NodeKind::Source(f)
            }
            TemplateKind::Constant(v) => {
                value = v.clone();
                run_now = false;
                NodeKind::Constant
            }
            TemplateKind::Apply { op } => NodeKind::Apply(op.clone()),
            TemplateKind::Sink => NodeKind::Sink { notify },
            TemplateKind::Deploy { .. } => NodeKind::Deploy { child: None },
            TemplateKind::DeployOut => {
                let Some(NodeKind::Deploy { child: Some(c) }) = state.nodes.get(&inputs[0]).map(|n| &n.kind) else {
                    return Err(TurnError::Contract("deploy-out without a deployment".into()));
                };
                NodeKind::DeployOut { sink: state.deployments[c].sinks[0] }
            }
            TemplateKind::DeployStar { behaviour, feeds, default, mode } => NodeKind::DeployStar(Box::new(DsNode {
                behaviour: behaviour.clone(),
                feeds: feeds.clone().into(),
                mode: *mode,
                state: DeployStarState::new(default.clone()),
                children: im::OrdMap::new(),
                initialized: false,
                out: None,
            })),
            TemplateKind::DeployStarOut => {
                if let Some(NodeKind::DeployStar(ds)) = state.nodes.get_mut(&inputs[0]).map(|n| &mut n.kind) {
                    ds.out = Some(id);
                }
                NodeKind::DeployStarOut { ds: inputs[0] }
            }
            TemplateKind::Qualify { stream } => NodeKind::Qualify { stream: stream.clone(), sub: None, next_gen: 0 },
            TemplateKind::FlockContents { flock, mode } => {
                let owner = turn.dir.flock(flock).ok_or_else(|| TurnError::UnknownFlock(flock.to_string()))?;
                let stream = StreamRef::new(owner, "contents");
                let tag = NodeTag { node: id.0, generation: 0 };
                turn.effects.push(Effect::Subscribe { stream: stream.clone(), tag, replay_retained: true, format: *mode });
                run_now = false;
                NodeKind::FlockContents { sub: Some((stream, 0)) }
            }
            TemplateKind::Size => NodeKind::Size,
            TemplateKind::Fold { spec } => NodeKind::Fold { spec: spec.clone(), state: None },
        };
        for inp in &inputs {
            if let Some(n) = state.nodes.get_mut(inp) {
                n.dependents.insert(id);
            }
        }
        if let NodeKind::DeployOut { sink } = &kind {
            if let Some(s) = state.nodes.get_mut(sink) {
                s.dependents.insert(id);
            }
        }
        state.nodes.insert(
            id,
            Node {
                deployment: dep,
                template: TemplateId(i),
                kind,
                inputs: inputs.clone().into(),
                dependents: im::OrdSet::new(),
                priority: priority.clone(),
                value,
            },
        );
        if let TemplateKind::Deploy { behaviour: child_b, feeds: child_feeds } = &t.kind {
            let mut cf = Vec::with_capacity(child_feeds.len());
            for f in child_feeds {
                cf.push(match f {
                    FeedTemplate::Const(v) => Feed::Const(v.clone()),
                    FeedTemplate::Input(k) => Feed::Node(inputs[*k]),
                    FeedTemplate::Element => return Err(TurnError::Contract("element feed outside deploy-*".into())),
                });
            }
            let child = instantiate(state, turn, child_b, Some(&priority), cf, Some(id), None, bag_owner)?;
            if let Some(NodeKind::Deploy { child: c }) = state.nodes.get_mut(&id).map(|n| &mut n.kind) {
                *c = Some(child);
            }
        }
        if run_now {
            turn.queue.schedule(id, priority);
        }
    }
    let sinks: Vec<NodeId> = behaviour.sinks().iter().map(|t| ids[t.0]).collect();
    let sources: Vec<NodeId> = behaviour.source_nodes().iter().map(|t| ids[t.0]).collect();
    state.deployments.insert(
        dep,
        Deployment {
            behaviour: behaviour.clone(),
            nodes: ids.into(),
            sinks: sinks.into(),
            sources: sources.into(),
            creator,
            bag_owner,
            element: false,
        },
    );
    turn.stats.deployments_created += 1;
    Ok(dep)
}

fn teardown(state: &mut State, turn: &mut Turn, dep: DeploymentId) {
    let Some(d) = state.deployments.remove(&dep) else { return };
    for &n in d.nodes.iter().rev() {
        if turn.queue.remove(n) && turn.tracing {
            if let Some(node) = state.nodes.get(&n) {
                let v = node.value.clone();
                turn.trace.push(TraceRecord {
                    turn: turn.number,
                    node: n.0,
                    deployment: dep.0,
                    priority: node.priority.heights().to_vec(),
                    label: d.behaviour.node(node.template).kind.label(),
                    executed: false,
                    old: v.clone(),
                    new: v,
                });
            }
        }
        let Some(node) = state.nodes.remove(&n) else { continue };
        match &node.kind {
            NodeKind::Deploy { child: Some(c) } => teardown(state, turn, *c),
            NodeKind::DeployStar(ds) => {
                for c in ds.children.values() {
                    teardown(state, turn, *c);
                }
            }
            NodeKind::Qualify { sub: Some((s, g)), .. } | NodeKind::FlockContents { sub: Some((s, g)) } => {
                turn.effects.push(Effect::Unsubscribe { stream: s.clone(), tag: NodeTag { node: n.0, generation: *g } });
            }
            _ => {}
        }
        turn.staged.remove(&n);
        turn.payloads.remove(&n);
        turn.deltas.remove(&n);
        turn.ds.remove(&n);
        for inp in node.inputs.iter() {
            if let Some(x) = state.nodes.get_mut(inp) {
                x.dependents.remove(&n);
            }
        }
    }
    turn.stats.deployments_destroyed += 1;
    if d.element {
        turn.stats.elements_torn_down += 1;
    }
}

fn ds_node(state: &State, id: NodeId) -> Result<(DsNode, Priority, Arc<[NodeId]>), TurnError> {
    match state.nodes.get(&id) {
        Some(Node { kind: NodeKind::DeployStar(ds), priority, inputs, .. }) => {
            Ok(((**ds).clone(), priority.clone(), inputs.clone()))
        }
        _ => Err(TurnError::Contract("not a deploy-* node".into())),
    }
}

fn put_ds_node(state: &mut State, id: NodeId, ds: DsNode) {
    if let Some(n) = state.nodes.get_mut(&id) {
        n.kind = NodeKind::DeployStar(Box::new(ds));
    }
}

#[allow(clippy::too_many_arguments)]
fn create_child(
    state: &mut State,
    turn: &mut Turn,
    ds_id: NodeId,
    ds: &DsNode,
    prefix: &Priority,
    ds_inputs: &[NodeId],
    key: DeploymentKey,
    element: Value,
) -> Result<DeploymentId, TurnError> {
    let feeds: Vec<Feed> = ds
        .feeds
        .iter()
        .map(|f| match f {
            FeedTemplate::Const(v) => Feed::Const(v.clone()),
            FeedTemplate::Input(i) => Feed::Node(ds_inputs[*i]),
            FeedTemplate::Element => Feed::Element,
        })
        .collect();
    let bag_owner = match ds.mode {
        CollectionMode::Bag => Some(ds_id),
        CollectionMode::Incremental => state.deployments.get(&state.nodes[&ds_id].deployment).and_then(|d| d.bag_owner),
    };
    let dep = instantiate(state, turn, &ds.behaviour, Some(prefix), feeds, Some(ds_id), Some((ds_id, key)), bag_owner)?;
    if let Some(d) = state.deployments.get_mut(&dep) {
        d.element = true;
    }
    turn.stats.elements_deployed += 1;
    stage_element(state, turn, dep, element);
    if let Some(out) = ds.out {
        let sink = state.deployments[&dep].sinks[0];
        if let Some(s) = state.nodes.get_mut(&sink) {
            s.dependents.insert(out);
        }
    }
    Ok(dep)
}

fn stage_element(state: &State, turn: &mut Turn, dep: DeploymentId, element: Value) {
    for s in state.deployments[&dep].sources.iter() {
        if matches!(state.nodes[s].kind, NodeKind::Source(Feed::Element)) {
            turn.staged.insert(*s, element.clone());
            schedule(state, turn, *s);
        }
    }
}

/// Topology phase: applies the collection's snapshot or patches to the set
/// of child deployments. Outputs are collected later by the out node.
fn run_deploy_star(state: &mut State, turn: &mut Turn, id: NodeId) -> Result<(), TurnError> {
    let (mut ds, prefix, inputs) = ds_node(state, id)?;
    let coll = inputs[0];
    let Some(bag) = collection_input(state, id, coll)? else { return Ok(()) };
    let delta = turn.deltas.get(&coll).cloned();
    let replace = !ds.initialized
        || matches!(delta, Some(Delta::Snapshot))
        || (ds.mode == CollectionMode::Bag && delta.is_some());
    let mut scratch = turn.ds.remove(&id).unwrap_or_default();
    if replace {
        let plan = ds.state.begin_snapshot(&bag);
        for k in plan.torn_down {
            if let Some(c) = ds.children.get(&k) {
                teardown(state, turn, *c);
            }
        }
        ds.children = im::OrdMap::new();
        turn.stats.element_visits += bag.len() as u64;
        for (k, v) in plan.created {
            let c = create_child(state, turn, id, &ds, &prefix, &inputs, k, v)?;
            ds.children.insert(k, c);
        }
        ds.initialized = true;
        scratch = DsScratch { snapshot: true, ..Default::default() };
    } else if let Some(Delta::Patches(ps)) = delta {
        for p in ps {
            match p {
                Patch::Insert { key, value } => {
                    ds.state.insert_key(key)?;
                    let c = create_child(state, turn, id, &ds, &prefix, &inputs, key, value)?;
                    ds.children.insert(key, c);
                    scratch.touched.insert(key);
                }
                Patch::Update { key, new, .. } => {
                    ds.state.check_live(key)?;
                    let c = ds.children[&key];
                    stage_element(state, turn, c, new);
                }
                Patch::Remove { key, .. } => {
                    if let DeployStarOutput::OnePatch(p) = ds.state.remove_key(key)? {
                        scratch.removals.push(p);
                    }
                    scratch.touched.remove(&key);
                    if let Some(c) = ds.children.remove(&key) {
                        teardown(state, turn, c);
                    }
                }
            }
        }
    }
    let out = ds.out;
    put_ds_node(state, id, ds);
    turn.ds.insert(id, scratch);
    if let Some(out) = out {
        schedule(state, turn, out);
    }
    Ok(())
}

fn child_output(state: &State, dep: DeploymentId) -> Value {
    value_of(state, state.deployments[&dep].sinks[0])
}

/// Output phase: turns the children's sink values into one snapshot or a
/// list of patches. Stays NoValue while the collection or any bound input is.
fn run_deploy_star_out(
    state: &mut State,
    turn: &mut Turn,
    ds_id: NodeId,
    inputs: &[NodeId],
    old: &Value,
) -> Result<Computed, TurnError> {
    let gate = inputs[1..].iter().all(|n| value_of(state, *n).is_materialized());
    let (mut ds, _, _) = ds_node(state, ds_id)?;
    let scratch = turn.ds.remove(&ds_id).unwrap_or_default();
    let rebuild = scratch.snapshot
        || (ds.mode == CollectionMode::Bag
            && (scratch.dirty || !scratch.touched.is_empty() || !scratch.removals.is_empty()));
    let mut delta = None;
    if rebuild {
        let outputs: Vec<(DeploymentKey, Value)> =
            ds.children.iter().map(|(k, c)| (*k, child_output(state, *c))).collect();
        turn.stats.element_visits += outputs.len() as u64;
        ds.state.finish_snapshot(outputs)?;
        delta = Some(Delta::Snapshot);
    } else {
        let mut ps = scratch.removals;
        for k in scratch.touched {
            if !ds.state.is_live(k) {
                continue;
            }
            turn.stats.element_visits += 1;
            let o = child_output(state, ds.children[&k]);
            if let DeployStarOutput::OnePatch(p) = ds.state.on_child_output(k, &o)? {
                ps.push(p);
            }
        }
        if !ps.is_empty() {
            delta = Some(Delta::Patches(ps));
        }
    }
    let bag = ds.state.pre_snapshot().clone();
    let initialized = ds.initialized;
    put_ds_node(state, ds_id, ds);
    if !gate || !initialized {
        return Ok(Computed::Collection(Value::NoValue, None));
    }
    if old.is_no_value() {
        return Ok(Computed::Collection(Value::Bag(bag), Some(Delta::Snapshot)));
    }
    Ok(match delta {
        Some(d) => Computed::Collection(Value::Bag(bag), Some(d)),
        None => Computed::Unchanged,
    })
}

fn run_qualify(state: &mut State, turn: &mut Turn, id: NodeId, old: &Value) -> Result<Computed, TurnError> {
    let node = &state.nodes[&id];
    let NodeKind::Qualify { stream, sub, mut next_gen } = node.kind.clone() else { unreachable!() };
    let target = value_of(state, node.inputs[0]);
    let payload = turn.payloads.remove(&id);
    let want = target.as_actor().map(|r| StreamRef::new(r, &stream));
    if target.is_materialized() && want.is_none() {
        turn.diagnostics.push(format!("{}: {target} is not an actor", label_of(state, id)));
    }
    if want.as_ref() == sub.as_ref().map(|(s, _)| s) {
        return Ok(match payload {
            Some(Payload::Value(v)) => Computed::Value(v),
            Some(other) => {
                return Err(TurnError::Contract(format!("{}: unexpected {} payload", label_of(state, id), other.kind())))
            }
            None => Computed::Value(old.clone()),
        });
    }
    if let Some((s, g)) = sub {
        turn.effects.push(Effect::Unsubscribe { stream: s, tag: NodeTag { node: id.0, generation: g } });
    }
    let mut new_sub = None;
    let mut value = Value::NoValue;
    if let Some(s) = want {
        let lookup = turn.dir.lookup(&s);
        let replay = match lookup {
            StreamLookup::UnknownStream => {
                turn.diagnostics.push(format!("{}: unknown stream {}/{}", label_of(state, id), s.owner, s.name));
                None
            }
            StreamLookup::Local(v) => {
                value = v.unwrap_or_default();
                Some(false)
            }
            StreamLookup::Remote => Some(true),
        };
        if let Some(replay_retained) = replay {
            let tag = NodeTag { node: id.0, generation: next_gen };
            next_gen += 1;
            turn.effects.push(Effect::Subscribe {
                stream: s.clone(),
                tag,
                replay_retained,
                format: CollectionMode::Incremental,
            });
            new_sub = Some((s, tag.generation));
        }
    }
    if let Some(n) = state.nodes.get_mut(&id) {
        n.kind = NodeKind::Qualify { stream, sub: new_sub, next_gen };
    }
    Ok(Computed::Value(value))
}
