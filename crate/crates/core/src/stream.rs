//! Stream payloads, subscription tags and the lookup interface reactors use
//! to reach streams owned by other processes.

use crate::bag::{IncrementalBag, Patch};
use crate::behaviour::CollectionMode;
use crate::value::{ProcessRef, StreamRef, Value};

/// What travels on a stream. Flock contents streams carry a snapshot first
/// and patches afterwards; every other stream carries plain values.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Value(Value),
    Snapshot(IncrementalBag),
    Patch(Patch),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Value(_) => "value",
            Payload::Snapshot(_) => "snapshot",
            Payload::Patch(_) => "patch",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Payload::Value(v) => v.to_json(),
            Payload::Snapshot(b) => Value::Bag(b.clone()).to_json(),
            Payload::Patch(p) => p.to_json(),
        }
    }
}

/// Identifies the reactor node a subscription feeds. The generation changes
/// whenever the node resubscribes, which lets stale deliveries be dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeTag {
    pub node: u64,
    pub generation: u64,
}

/// Result of resolving a stream from inside a reactor turn.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamLookup {
    /// Owned by a process on this peer; carries the retained value, if any.
    Local(Option<Value>),
    /// Owned by a process on another peer; values arrive by message.
    Remote,
    UnknownStream,
}

pub trait StreamDirectory {
    fn lookup(&self, stream: &StreamRef) -> StreamLookup;
    /// The local flock process of that name.
    fn flock(&self, name: &str) -> Option<ProcessRef>;
}

/// A directory with no streams and no flocks, for reactors used on their own.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoStreams;

impl StreamDirectory for NoStreams {
    fn lookup(&self, _stream: &StreamRef) -> StreamLookup {
        StreamLookup::UnknownStream
    }

    fn flock(&self, _name: &str) -> Option<ProcessRef> {
        None
    }
}

/// Subscription changes requested by a turn; applied by the host only when
/// the turn commits.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Subscribe { stream: StreamRef, tag: NodeTag, replay_retained: bool, format: CollectionMode },
    Unsubscribe { stream: StreamRef, tag: NodeTag },
}
