//! Immutable dynamically-typed values that flow through reactor DAGs.

use std::fmt;
use std::sync::Arc;

use serde_json::json;

use crate::bag::IncrementalBag;

/// Identifies a peer of the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Location-transparent handle to an actor, reactor or flock process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessRef {
    pub peer: PeerId,
    pub local: u32,
}

impl fmt::Display for ProcessRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.peer, self.local)
    }
}

/// A named stream exported by a process.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamRef {
    pub owner: ProcessRef,
    pub name: Arc<str>,
}

impl StreamRef {
    pub fn new(owner: ProcessRef, name: &str) -> Self {
        StreamRef { owner, name: Arc::from(name) }
    }
}

impl fmt::Display for StreamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.name)
    }
}

/// A runtime value.
///
/// `NoValue` is the distinguished "nothing yet / filtered out" sentinel. Every
/// pure operation in a reactor is strict in it.
#[derive(Debug, Clone, Default)]
pub enum Value {
    Number(f64),
    Text(Arc<str>),
    Boolean(bool),
    Symbol(Arc<str>),
    Tuple(Arc<[Value]>),
    LngLat { lng: f64, lat: f64 },
    Actor(ProcessRef),
    Stream(StreamRef),
    Bag(IncrementalBag),
    #[default]
    NoValue,
}

impl Value {
    pub fn number(n: impl Into<f64>) -> Self {
        Value::Number(n.into())
    }

    pub fn text(s: &str) -> Self {
        Value::Text(Arc::from(s))
    }

    pub fn symbol(s: &str) -> Self {
        Value::Symbol(Arc::from(s))
    }

    pub fn tuple(items: impl IntoIterator<Item = Value>) -> Self {
        Value::Tuple(items.into_iter().collect::<Vec<_>>().into())
    }

    pub fn lnglat(lng: f64, lat: f64) -> Self {
        Value::LngLat { lng, lat }
    }

    pub fn is_no_value(&self) -> bool {
        matches!(self, Value::NoValue)
    }

    pub fn is_materialized(&self) -> bool {
        !self.is_no_value()
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_actor(&self) -> Option<ProcessRef> {
        match self {
            Value::Actor(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_bag(&self) -> Option<&IncrementalBag> {
        match self {
            Value::Bag(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_lnglat(&self) -> Option<(f64, f64)> {
        match self {
            Value::LngLat { lng, lat } => Some((*lng, *lat)),
            _ => None,
        }
    }

    pub fn as_tuple(&self) -> Option<&[Value]> {
        match self {
            Value::Tuple(items) => Some(items),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Text(_) => "text",
            Value::Boolean(_) => "boolean",
            Value::Symbol(_) => "symbol",
            Value::Tuple(_) => "tuple",
            Value::LngLat { .. } => "lnglat",
            Value::Actor(_) => "actor",
            Value::Stream(_) => "stream",
            Value::Bag(_) => "bag",
            Value::NoValue => "no-value",
        }
    }

    /// JSON rendering used by traces, logs and scenario output.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(n) => json!(n),
            Value::Text(s) => json!(s.as_ref()),
            Value::Boolean(b) => json!(b),
            Value::Symbol(s) => json!({ "symbol": s.as_ref() }),
            Value::Tuple(items) => serde_json::Value::Array(items.iter().map(Value::to_json).collect()),
            Value::LngLat { lng, lat } => json!({ "lng": lng, "lat": lat }),
            Value::Actor(r) => json!({ "actor": r.to_string() }),
            Value::Stream(s) => json!({ "stream": s.to_string() }),
            Value::Bag(b) => serde_json::Value::Array(
                b.iter().map(|(k, v)| json!([k.0, v.to_json()])).collect(),
            ),
            Value::NoValue => serde_json::Value::Null,
        }
    }
}

fn numbers_equal(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Structural equality. Numbers compare by value (NaN equals NaN so that
/// equality stays an equivalence relation); references compare by identity.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => numbers_equal(*x, *y),
        (Value::Text(x), Value::Text(y)) => x == y,
        (Value::Boolean(x), Value::Boolean(y)) => x == y,
        (Value::Symbol(x), Value::Symbol(y)) => x == y,
        (Value::Tuple(x), Value::Tuple(y)) => {
            Arc::ptr_eq(x, y) || (x.len() == y.len() && x.iter().zip(y.iter()).all(|(p, q)| values_equal(p, q)))
        }
        (Value::LngLat { lng: a1, lat: a2 }, Value::LngLat { lng: b1, lat: b2 }) => {
            numbers_equal(*a1, *b1) && numbers_equal(*a2, *b2)
        }
        (Value::Actor(x), Value::Actor(y)) => x == y,
        (Value::Stream(x), Value::Stream(y)) => x == y,
        (Value::Bag(x), Value::Bag(y)) => x.entries_equal(y),
        (Value::NoValue, Value::NoValue) => true,
        _ => false,
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        values_equal(self, other)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::Number(n as f64)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Boolean(b)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::text(s)
    }
}

impl From<ProcessRef> for Value {
    fn from(r: ProcessRef) -> Self {
        Value::Actor(r)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(n) => write!(f, "{n}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Symbol(s) => write!(f, "'{s}"),
            Value::Tuple(items) => {
                f.write_str("(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
            Value::LngLat { lng, lat } => write!(f, "<lnglat {lng} {lat}>"),
            Value::Actor(r) => write!(f, "<actor {r}>"),
            Value::Stream(s) => write!(f, "<stream {s}>"),
            Value::Bag(b) => write!(f, "<bag of {}>", b.len()),
            Value::NoValue => f.write_str("#no-value"),
        }
    }
}
