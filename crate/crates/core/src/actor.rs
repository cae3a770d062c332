//! Actor behaviours: named constructors and methods run as host closures
//! against an [`ActorContext`], which buffers the commands they issue.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::ops::EvalError;
use crate::reactor::ReactInput;
use crate::value::{ProcessRef, StreamRef, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActorError {
    #[error("{behaviour} has no constructor {name:?}")]
    UnknownConstructor { behaviour: String, name: String },
    #[error("{behaviour} has no method {name:?}")]
    UnknownMethod { behaviour: String, name: String },
    #[error("{name}: expected {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("cannot emit to {0}: not owned by the caller")]
    NotOwner(String),
    #[error("no stream named {0:?}")]
    UnknownStream(String),
    #[error("{0} is not a local process")]
    NotLocal(ProcessRef),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Failed(String),
}

pub type Handler = Arc<dyn Fn(&mut ActorContext<'_>, &[Value]) -> Result<(), ActorError> + Send + Sync>;

#[derive(Clone)]
struct Callable {
    arity: usize,
    f: Handler,
}

/// A reusable actor template.
#[derive(Clone)]
pub struct ActorBehaviour {
    name: Arc<str>,
    streams: Vec<Arc<str>>,
    constructors: BTreeMap<String, Callable>,
    methods: BTreeMap<String, Callable>,
}

impl fmt::Debug for ActorBehaviour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActorBehaviour")
            .field("name", &self.name)
            .field("streams", &self.streams)
            .field("constructors", &self.constructors.keys().collect::<Vec<_>>())
            .field("methods", &self.methods.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ActorBehaviour {
    pub fn new(name: &str) -> Self {
        ActorBehaviour {
            name: Arc::from(name),
            streams: Vec::new(),
            constructors: BTreeMap::new(),
            methods: BTreeMap::new(),
        }
    }

    /// Declares an exported stream.
    pub fn stream(mut self, name: &str) -> Self {
        self.streams.push(Arc::from(name));
        self
    }

    pub fn constructor(
        mut self,
        name: &str,
        arity: usize,
        f: impl Fn(&mut ActorContext<'_>, &[Value]) -> Result<(), ActorError> + Send + Sync + 'static,
    ) -> Self {
        self.constructors.insert(name.to_string(), Callable { arity, f: Arc::new(f) });
        self
    }

    pub fn method(
        mut self,
        name: &str,
        arity: usize,
        f: impl Fn(&mut ActorContext<'_>, &[Value]) -> Result<(), ActorError> + Send + Sync + 'static,
    ) -> Self {
        self.methods.insert(name.to_string(), Callable { arity, f: Arc::new(f) });
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn streams(&self) -> &[Arc<str>] {
        &self.streams
    }

    pub fn has_method(&self, name: &str) -> bool {
        self.methods.contains_key(name)
    }

    fn lookup<'a>(
        &self,
        table: &'a BTreeMap<String, Callable>,
        name: &str,
        args: &[Value],
        constructor: bool,
    ) -> Result<&'a Callable, ActorError> {
        let c = table.get(name).ok_or_else(|| {
            let (behaviour, name) = (self.name.to_string(), name.to_string());
            if constructor {
                ActorError::UnknownConstructor { behaviour, name }
            } else {
                ActorError::UnknownMethod { behaviour, name }
            }
        })?;
        if c.arity != args.len() {
            return Err(ActorError::Arity { name: name.to_string(), expected: c.arity, got: args.len() });
        }
        Ok(c)
    }

    pub fn check_constructor(&self, name: &str, args: &[Value]) -> Result<(), ActorError> {
        self.lookup(&self.constructors, name, args, true).map(|_| ())
    }

    pub fn run_constructor(&self, cx: &mut ActorContext<'_>, name: &str, args: &[Value]) -> Result<(), ActorError> {
        let c = self.lookup(&self.constructors, name, args, true)?;
        (c.f)(cx, args)
    }

    pub fn run_method(&self, cx: &mut ActorContext<'_>, name: &str, args: &[Value]) -> Result<(), ActorError> {
        let c = self.lookup(&self.methods, name, args, false)?;
        (c.f)(cx, args)
    }
}

/// Side effects requested by a handler, executed by the host after it returns.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Emit { stream: Arc<str>, value: Value },
    Send { to: ProcessRef, method: String, args: Vec<Value> },
    Monitor { stream: StreamRef, method: String },
    Publish { flock: String, member: ProcessRef },
    Unpublish { flock: String, member: ProcessRef },
    ReactTo { reactor: ProcessRef, input: ReactInput },
    Log(Value),
}

pub struct ActorContext<'a> {
    me: ProcessRef,
    now: u64,
    streams: &'a [Arc<str>],
    state: &'a mut BTreeMap<String, Value>,
    commands: Vec<Command>,
}

impl<'a> ActorContext<'a> {
    pub fn new(me: ProcessRef, now: u64, streams: &'a [Arc<str>], state: &'a mut BTreeMap<String, Value>) -> Self {
        ActorContext { me, now, streams, state, commands: Vec::new() }
    }

    pub fn me(&self) -> ProcessRef {
        self.me
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn get(&self, key: &str) -> Value {
        self.state.get(key).cloned().unwrap_or_default()
    }

    pub fn set(&mut self, key: &str, v: Value) {
        self.state.insert(key.to_string(), v);
    }

    /// Emits to one of this actor's own streams.
    pub fn emit(&mut self, stream: &str, value: Value) -> Result<(), ActorError> {
        let Some(s) = self.streams.iter().find(|s| s.as_ref() == stream) else {
            return Err(ActorError::UnknownStream(stream.to_string()));
        };
        self.commands.push(Command::Emit { stream: s.clone(), value });
        Ok(())
    }

    /// Emits to a stream given by reference; fails unless this actor owns it.
    pub fn emit_to(&mut self, stream: &StreamRef, value: Value) -> Result<(), ActorError> {
        if stream.owner != self.me {
            return Err(ActorError::NotOwner(format!("{}.{}", stream.owner, stream.name)));
        }
        self.emit(&stream.name.clone(), value)
    }

    pub fn send(&mut self, to: ProcessRef, method: &str, args: Vec<Value>) {
        self.commands.push(Command::Send { to, method: method.to_string(), args });
    }

    /// `(monitor! target.stream 'method)`
    pub fn monitor(&mut self, target: ProcessRef, stream: &str, method: &str) {
        self.commands.push(Command::Monitor { stream: StreamRef::new(target, stream), method: method.to_string() });
    }

    pub fn publish(&mut self, flock: &str, member: ProcessRef) -> Result<(), ActorError> {
        if member.peer != self.me.peer {
            return Err(ActorError::NotLocal(member));
        }
        self.commands.push(Command::Publish { flock: flock.to_string(), member });
        Ok(())
    }

    pub fn unpublish(&mut self, flock: &str, member: ProcessRef) -> Result<(), ActorError> {
        if member.peer != self.me.peer {
            return Err(ActorError::NotLocal(member));
        }
        self.commands.push(Command::Unpublish { flock: flock.to_string(), member });
        Ok(())
    }

    pub fn react_to(&mut self, reactor: ProcessRef, values: Vec<Value>) {
        self.commands.push(Command::ReactTo { reactor, input: ReactInput::Positional(values) });
    }

    pub fn log(&mut self, v: Value) {
        self.commands.push(Command::Log(v));
    }

    pub fn into_commands(self) -> Vec<Command> {
        self.commands
    }
}

/// `Bike`: exports `location`; `init` and `update-location!` emit to it.
pub fn bike_behaviour() -> ActorBehaviour {
    ActorBehaviour::new("Bike")
        .stream("location")
        .constructor("init", 1, |cx, args| cx.emit("location", args[0].clone()))
        .method("update-location!", 1, |cx, args| cx.emit("location", args[0].clone()))
}

/// Logs every value it is sent through `log!`.
pub fn recorder_behaviour() -> ActorBehaviour {
    ActorBehaviour::new("Recorder").constructor("start", 0, |_, _| Ok(())).method("log!", 1, |cx, args| {
        cx.log(args[0].clone());
        Ok(())
    })
}
