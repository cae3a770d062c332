//! Reactor behaviours: immutable DAG templates built through an embedded
//! builder, with partial application through [`bind`].

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::fold::FoldSpec;
use crate::ops::{EvalError, Op};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("behaviour {0} needs at least one source")]
    NoSources(String),
    #[error("behaviour {0} needs at least one sink")]
    NoSinks(String),
    #[error("cycle detected among nodes {0:?}")]
    Cycle(Vec<usize>),
    #[error("unknown source name {0:?}")]
    UnknownSource(String),
    #[error("duplicate source name {0:?}")]
    DuplicateSource(String),
    #[error("over-application: {given} arguments for {unbound} unbound sources")]
    OverApplication { given: usize, unbound: usize },
    #[error("deploy of {behaviour}: expected {expected} arguments, got {got}")]
    DeployArity { behaviour: String, expected: usize, got: usize },
    #[error("deploy of {0}: exactly one sink required")]
    DeploySinks(String),
    #[error("deploy-* arity: {0} must have exactly one unbound source and one sink")]
    DeployStarArity(String),
    #[error("node handle belongs to a different behaviour")]
    ForeignHandle,
    #[error("constant folding failed: {0}")]
    ConstantFolding(EvalError),
}

/// Index of a node inside one behaviour template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateId(pub usize);

/// Handle to a node under construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeHandle {
    builder: u64,
    id: TemplateId,
}

/// Argument given to [`bind`]: a fixed value or a node of the behaviour that
/// will deploy the bound behaviour.
#[derive(Debug, Clone)]
pub enum BindArg {
    Value(Value),
    Node(NodeHandle),
}

impl From<Value> for BindArg {
    fn from(v: Value) -> Self {
        BindArg::Value(v)
    }
}

impl From<NodeHandle> for BindArg {
    fn from(h: NodeHandle) -> Self {
        BindArg::Node(h)
    }
}

/// How a collection travels between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollectionMode {
    /// Snapshot first, then one patch per change.
    #[default]
    Incremental,
    /// A whole new bag on every change (the non-incremental baseline).
    Bag,
}

/// Where a child deployment's source gets its value.
#[derive(Debug, Clone)]
pub enum FeedTemplate {
    Const(Value),
    /// Index into the creating node's inputs.
    Input(usize),
    /// The collection element (deploy-* only).
    Element,
}

#[derive(Debug, Clone)]
pub enum TemplateKind {
    Source { index: usize },
    Constant(Value),
    Apply { op: Op },
    Sink,
    /// Manages a child deployment; its value is the tuple of its inputs.
    Deploy { behaviour: ReactorBehaviour, feeds: Vec<FeedTemplate> },
    /// Implicit source receiving the deployed behaviour's sink. Input: the deploy node.
    DeployOut,
    /// Input 0 is the collection; the rest are bound nodes.
    DeployStar { behaviour: ReactorBehaviour, feeds: Vec<FeedTemplate>, default: Option<Value>, mode: CollectionMode },
    /// Implicit source building deploy-* output. Inputs: the deploy-* node followed by its inputs.
    DeployStarOut,
    Qualify { stream: Arc<str> },
    FlockContents { flock: Arc<str>, mode: CollectionMode },
    Size,
    Fold { spec: FoldSpec },
}

impl TemplateKind {
    pub fn label(&self) -> String {
        match self {
            TemplateKind::Source { index } => format!("source#{index}"),
            TemplateKind::Constant(v) => format!("const {v}"),
            TemplateKind::Apply { op } => op.name().to_string(),
            TemplateKind::Sink => "sink".into(),
            TemplateKind::Deploy { behaviour, .. } => format!("deploy {}", behaviour.name()),
            TemplateKind::DeployOut => "deploy-out".into(),
            TemplateKind::DeployStar { behaviour, .. } => format!("deploy* {}", behaviour.name()),
            TemplateKind::DeployStarOut => "deploy*-out".into(),
            TemplateKind::Qualify { stream } => format!(".{stream}"),
            TemplateKind::FlockContents { flock, .. } => format!("{flock}.contents"),
            TemplateKind::Size => "size".into(),
            TemplateKind::Fold { .. } => "fold".into(),
        }
    }

    fn is_height_zero(&self) -> bool {
        matches!(self, TemplateKind::Source { .. } | TemplateKind::Constant(_) | TemplateKind::FlockContents { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TemplateNode {
    pub kind: TemplateKind,
    pub inputs: Vec<TemplateId>,
    pub height: u32,
}

#[derive(Debug)]
struct BehaviourDef {
    name: String,
    sources: Vec<Arc<str>>,
    nodes: Vec<TemplateNode>,
    sinks: Vec<TemplateId>,
    source_nodes: Vec<TemplateId>,
}

/// A reusable, immutable reactor template, possibly partially applied.
#[derive(Clone)]
pub struct ReactorBehaviour {
    def: Arc<BehaviourDef>,
    bound: Arc<[BindArg]>,
}

impl fmt::Debug for ReactorBehaviour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactorBehaviour")
            .field("name", &self.def.name)
            .field("sources", &self.def.sources)
            .field("bound", &self.bound.len())
            .finish()
    }
}

impl ReactorBehaviour {
    /// Builds a behaviour. `sources` names the inputs in positional order.
    pub fn define(
        name: &str,
        sources: &[&str],
        build: impl FnOnce(&mut BehaviourBuilder),
    ) -> Result<ReactorBehaviour, BuildError> {
        let mut b = BehaviourBuilder::new(name, sources);
        build(&mut b);
        b.finish()
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn source_names(&self) -> &[Arc<str>] {
        &self.def.sources
    }

    pub fn unbound_source_names(&self) -> &[Arc<str>] {
        &self.def.sources[self.bound.len()..]
    }

    pub fn unbound_count(&self) -> usize {
        self.def.sources.len() - self.bound.len()
    }

    pub fn bound(&self) -> &[BindArg] {
        &self.bound
    }

    pub fn nodes(&self) -> &[TemplateNode] {
        &self.def.nodes
    }

    pub fn node(&self, id: TemplateId) -> &TemplateNode {
        &self.def.nodes[id.0]
    }

    pub fn sinks(&self) -> &[TemplateId] {
        &self.def.sinks
    }

    /// Template node of each declared source, positional.
    pub fn source_nodes(&self) -> &[TemplateId] {
        &self.def.source_nodes
    }

    pub fn heights(&self) -> Vec<u32> {
        self.def.nodes.iter().map(|n| n.height).collect()
    }

    /// True when both values share the same underlying template.
    pub fn same_template(&self, other: &ReactorBehaviour) -> bool {
        Arc::ptr_eq(&self.def, &other.def)
    }
}

/// Partial application: wires the first `args.len()` unbound sources.
pub fn bind(behaviour: &ReactorBehaviour, args: impl IntoIterator<Item = BindArg>) -> Result<ReactorBehaviour, BuildError> {
    let args: Vec<BindArg> = args.into_iter().collect();
    if args.is_empty() {
        return Ok(behaviour.clone());
    }
    let unbound = behaviour.unbound_count();
    if args.len() >= unbound {
        return Err(BuildError::OverApplication { given: args.len(), unbound });
    }
    let bound: Vec<BindArg> = behaviour.bound.iter().cloned().chain(args).collect();
    Ok(ReactorBehaviour { def: behaviour.def.clone(), bound: bound.into() })
}

/// Builds a behaviour from source names and a builder closure.
pub fn define_behaviour(
    name: &str,
    sources: &[&str],
    build: impl FnOnce(&mut BehaviourBuilder),
) -> Result<ReactorBehaviour, BuildError> {
    ReactorBehaviour::define(name, sources, build)
}

static NEXT_BUILDER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Default)]
pub struct DeployStarOptions {
    pub default: Option<Value>,
    pub mode: CollectionMode,
}

pub struct BehaviourBuilder {
    id: u64,
    name: String,
    sources: Vec<Arc<str>>,
    nodes: Vec<TemplateNode>,
    sinks: Vec<TemplateId>,
    source_nodes: Vec<TemplateId>,
    error: Option<BuildError>,
}

impl BehaviourBuilder {
    fn new(name: &str, sources: &[&str]) -> Self {
        let mut b = BehaviourBuilder {
            id: NEXT_BUILDER.fetch_add(1, Ordering::Relaxed),
            name: name.to_string(),
            sources: Vec::new(),
            nodes: Vec::new(),
            sinks: Vec::new(),
            source_nodes: Vec::new(),
            error: None,
        };
        for (index, s) in sources.iter().enumerate() {
            if b.sources.iter().any(|x| x.as_ref() == *s) {
                b.fail(BuildError::DuplicateSource(s.to_string()));
            }
            b.sources.push(Arc::from(*s));
            let id = b.push(TemplateKind::Source { index }, vec![]);
            b.source_nodes.push(id.id);
        }
        b
    }

    fn fail(&mut self, e: BuildError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn push(&mut self, kind: TemplateKind, inputs: Vec<TemplateId>) -> NodeHandle {
        let id = TemplateId(self.nodes.len());
        self.nodes.push(TemplateNode { kind, inputs, height: 0 });
        NodeHandle { builder: self.id, id }
    }

    fn own(&mut self, h: NodeHandle) -> TemplateId {
        if h.builder != self.id {
            self.fail(BuildError::ForeignHandle);
        }
        h.id
    }

    fn own_all(&mut self, hs: &[NodeHandle]) -> Vec<TemplateId> {
        hs.iter().map(|h| self.own(*h)).collect()
    }

    /// The source node for a declared source name.
    pub fn source(&mut self, name: &str) -> NodeHandle {
        match self.sources.iter().position(|s| s.as_ref() == name) {
            Some(i) => NodeHandle { builder: self.id, id: self.source_nodes[i] },
            None => {
                self.fail(BuildError::UnknownSource(name.to_string()));
                NodeHandle { builder: self.id, id: TemplateId(0) }
            }
        }
    }

    pub fn constant(&mut self, v: impl Into<Value>) -> NodeHandle {
        self.push(TemplateKind::Constant(v.into()), vec![])
    }

    /// Applies a pure operation. When every input is a constant, the result
    /// is computed now and the node collapses into a single constant.
    pub fn apply(&mut self, op: Op, inputs: &[NodeHandle]) -> NodeHandle {
        let ids = self.own_all(inputs);
        let consts: Option<Vec<Value>> = ids
            .iter()
            .map(|id| match &self.nodes.get(id.0).map(|n| &n.kind) {
                Some(TemplateKind::Constant(v)) => Some(v.clone()),
                _ => None,
            })
            .collect();
        if let (Some(args), false) = (consts, ids.is_empty()) {
            let folded = if args.iter().any(Value::is_no_value) { Ok(Value::NoValue) } else { op.call(&args) };
            match folded {
                Ok(v) => return self.constant(v),
                Err(e) => self.fail(BuildError::ConstantFolding(e)),
            }
        }
        self.push(TemplateKind::Apply { op }, ids)
    }

    pub fn binary(&mut self, op: Op, a: NodeHandle, b: NodeHandle) -> NodeHandle {
        self.apply(op, &[a, b])
    }

    pub fn unary(&mut self, op: Op, a: NodeHandle) -> NodeHandle {
        self.apply(op, &[a])
    }

    /// Declares a sink.
    pub fn out(&mut self, node: NodeHandle) {
        let id = self.own(node);
        let sink = self.push(TemplateKind::Sink, vec![id]);
        self.sinks.push(sink.id);
    }

    /// Deploys `behaviour`, feeding its unbound sources from `args`. Returns
    /// the implicit source carrying the deployment's sink value.
    pub fn deploy(&mut self, behaviour: &ReactorBehaviour, args: &[NodeHandle]) -> NodeHandle {
        if behaviour.sinks().len() != 1 {
            self.fail(BuildError::DeploySinks(behaviour.name().to_string()));
        }
        if args.len() != behaviour.unbound_count() {
            self.fail(BuildError::DeployArity {
                behaviour: behaviour.name().to_string(),
                expected: behaviour.unbound_count(),
                got: args.len(),
            });
        }
        let mut inputs = Vec::new();
        let mut feeds = Vec::new();
        for b in behaviour.bound() {
            feeds.push(self.bound_feed(b, &mut inputs));
        }
        for a in args {
            let id = self.own(*a);
            feeds.push(FeedTemplate::Input(inputs.len()));
            inputs.push(id);
        }
        let node = self.push(TemplateKind::Deploy { behaviour: behaviour.clone(), feeds }, inputs);
        self.push(TemplateKind::DeployOut, vec![node.id])
    }

    fn bound_feed(&mut self, arg: &BindArg, inputs: &mut Vec<TemplateId>) -> FeedTemplate {
        match arg {
            BindArg::Value(v) => FeedTemplate::Const(v.clone()),
            // node-bound behaviours may only be deployed where the handle was made
            BindArg::Node(h) => {
                let id = self.own(*h);
                inputs.push(id);
                FeedTemplate::Input(inputs.len() - 1)
            }
        }
    }

    /// One deployment of `behaviour` per element of `collection`.
    pub fn deploy_star(&mut self, behaviour: &ReactorBehaviour, collection: NodeHandle) -> NodeHandle {
        self.deploy_star_with(behaviour, collection, DeployStarOptions::default())
    }

    pub fn deploy_star_with(
        &mut self,
        behaviour: &ReactorBehaviour,
        collection: NodeHandle,
        options: DeployStarOptions,
    ) -> NodeHandle {
        if behaviour.unbound_count() != 1 || behaviour.sinks().len() != 1 {
            self.fail(BuildError::DeployStarArity(behaviour.name().to_string()));
        }
        let coll = self.own(collection);
        let mut inputs = vec![coll];
        let mut feeds = Vec::new();
        for b in behaviour.bound() {
            feeds.push(self.bound_feed(b, &mut inputs));
        }
        feeds.push(FeedTemplate::Element);
        let out_inputs = inputs.clone();
        let ds = self.push(
            TemplateKind::DeployStar { behaviour: behaviour.clone(), feeds, default: options.default, mode: options.mode },
            inputs,
        );
        let mut all = vec![ds.id];
        all.extend(out_inputs);
        self.push(TemplateKind::DeployStarOut, all)
    }

    /// `target.stream`: tracks the named stream of the process `target` refers to.
    pub fn qualify(&mut self, target: NodeHandle, stream: &str) -> NodeHandle {
        let id = self.own(target);
        self.push(TemplateKind::Qualify { stream: Arc::from(stream) }, vec![id])
    }

    /// `Flock.contents`
    pub fn flock_contents(&mut self, flock: &str) -> NodeHandle {
        self.flock_contents_with(flock, CollectionMode::Incremental)
    }

    pub fn flock_contents_with(&mut self, flock: &str, mode: CollectionMode) -> NodeHandle {
        self.push(TemplateKind::FlockContents { flock: Arc::from(flock), mode }, vec![])
    }

    pub fn size(&mut self, collection: NodeHandle) -> NodeHandle {
        let id = self.own(collection);
        self.push(TemplateKind::Size, vec![id])
    }

    pub fn fold(&mut self, collection: NodeHandle, spec: FoldSpec) -> NodeHandle {
        let id = self.own(collection);
        self.push(TemplateKind::Fold { spec }, vec![id])
    }

    fn finish(mut self) -> Result<ReactorBehaviour, BuildError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let has_flock = self.nodes.iter().any(|n| matches!(n.kind, TemplateKind::FlockContents { .. }));
        if self.sources.is_empty() && !has_flock {
            return Err(BuildError::NoSources(self.name));
        }
        if self.sinks.is_empty() {
            return Err(BuildError::NoSinks(self.name));
        }
        self.prune_orphan_constants();
        let graph: Vec<(bool, Vec<usize>)> =
            self.nodes.iter().map(|n| (n.kind.is_height_zero(), n.inputs.iter().map(|i| i.0).collect())).collect();
        let heights = assign_static_heights(&graph)?;
        for (n, h) in self.nodes.iter_mut().zip(heights) {
            n.height = h;
        }
        Ok(ReactorBehaviour {
            def: Arc::new(BehaviourDef {
                name: self.name,
                sources: self.sources,
                nodes: self.nodes,
                sinks: self.sinks,
                source_nodes: self.source_nodes,
            }),
            bound: Arc::from([]),
        })
    }

    fn prune_orphan_constants(&mut self) {
        let mut used = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for i in &n.inputs {
                used[i.0] = true;
            }
        }
        let keep: Vec<bool> = self
            .nodes
            .iter()
            .zip(&used)
            .map(|(n, u)| *u || !matches!(n.kind, TemplateKind::Constant(_)))
            .collect();
        if keep.iter().all(|k| *k) {
            return;
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for (i, k) in keep.iter().enumerate() {
            if *k {
                remap[i] = next;
                next += 1;
            }
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.nodes = nodes
            .into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(mut n, _)| {
                n.inputs = n.inputs.iter().map(|i| TemplateId(remap[i.0])).collect();
                n
            })
            .collect();
        self.sinks = self.sinks.iter().map(|i| TemplateId(remap[i.0])).collect();
        self.source_nodes = self.source_nodes.iter().map(|i| TemplateId(remap[i.0])).collect();
    }
}

/// Topological heights over an index graph given as `(is_leaf, inputs)`.
/// Leaves (sources, constants) sit at height 0; every other node is one
/// above its highest input.
pub fn assign_static_heights(graph: &[(bool, Vec<usize>)]) -> Result<Vec<u32>, BuildError> {
    let n = graph.len();
    let mut indegree = vec![0usize; n];
    let mut dependents = vec![Vec::new(); n];
    for (i, (_, inputs)) in graph.iter().enumerate() {
        for &j in inputs {
            indegree[i] += 1;
            dependents[j].push(i);
        }
    }
    let mut heights = vec![0u32; n];
    let mut ready: VecDeque<usize> = (0..n).filter(|i| indegree[*i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop_front() {
        seen += 1;
        let (leaf, inputs) = &graph[i];
        heights[i] = if *leaf || inputs.is_empty() { 0 } else { 1 + inputs.iter().map(|j| heights[*j]).max().unwrap_or(0) };
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push_back(d);
            }
        }
    }
    if seen < n {
        return Err(BuildError::Cycle((0..n).filter(|i| indegree[*i] > 0).collect()));
    }
    Ok(heights)
}
