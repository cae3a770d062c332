//! Pure operations usable in `Apply` nodes.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{op}: expected {expected}, got {got}")]
    Type { op: String, expected: &'static str, got: String },
    #[error("{op}: expected {expected} arguments, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("{0}")]
    Failed(String),
}

type OpFn = dyn Fn(&[Value]) -> Result<Value, EvalError> + Send + Sync;

/// A named, pure, terminating operation over values.
#[derive(Clone)]
pub struct Op {
    name: Arc<str>,
    arity: usize,
    f: Arc<OpFn>,
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Op({}/{})", self.name, self.arity)
    }
}

impl Op {
    pub fn new(
        name: &str,
        arity: usize,
        f: impl Fn(&[Value]) -> Result<Value, EvalError> + Send + Sync + 'static,
    ) -> Self {
        Op { name: Arc::from(name), arity, f: Arc::new(f) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn call(&self, args: &[Value]) -> Result<Value, EvalError> {
        if args.len() != self.arity {
            return Err(EvalError::Arity { op: self.name.to_string(), expected: self.arity, got: args.len() });
        }
        (self.f)(args)
    }

    pub fn numeric1(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let op = name.to_string();
        Op::new(name, 1, move |args| Ok(Value::Number(f(num(&op, &args[0])?))))
    }

    pub fn numeric2(name: &str, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        let op = name.to_string();
        Op::new(name, 2, move |args| Ok(Value::Number(f(num(&op, &args[0])?, num(&op, &args[1])?))))
    }
}

pub fn num(op: &str, v: &Value) -> Result<f64, EvalError> {
    v.as_number().ok_or_else(|| EvalError::Type { op: op.to_string(), expected: "number", got: v.to_string() })
}

pub fn add2(a: &Value, b: &Value) -> Result<Value, EvalError> {
    Ok(Value::Number(num("+", a)? + num("+", b)?))
}

pub fn sub2(a: &Value, b: &Value) -> Result<Value, EvalError> {
    Ok(Value::Number(num("-", a)? - num("-", b)?))
}

pub fn add() -> Op {
    Op::numeric2("+", |a, b| a + b)
}

pub fn sub() -> Op {
    Op::numeric2("-", |a, b| a - b)
}

pub fn mul() -> Op {
    Op::numeric2("*", |a, b| a * b)
}

pub fn div() -> Op {
    Op::numeric2("/", |a, b| a / b)
}

pub fn expt() -> Op {
    Op::numeric2("expt", f64::powf)
}

pub fn atan2() -> Op {
    Op::numeric2("atan2", f64::atan2)
}

pub fn sin() -> Op {
    Op::numeric1("sin", f64::sin)
}

pub fn cos() -> Op {
    Op::numeric1("cos", f64::cos)
}

pub fn sqrt() -> Op {
    Op::numeric1("sqrt", f64::sqrt)
}

pub fn lt() -> Op {
    Op::new("<", 2, |args| Ok(Value::Boolean(num("<", &args[0])? < num("<", &args[1])?)))
}

/// `(if test then)` with no alternative: yields NoValue when the test fails.
pub fn when() -> Op {
    Op::new("if", 2, |args| match &args[0] {
        Value::Boolean(true) => Ok(args[1].clone()),
        Value::Boolean(false) => Ok(Value::NoValue),
        other => Err(EvalError::Type { op: "if".into(), expected: "boolean", got: other.to_string() }),
    })
}

pub fn get_lat() -> Op {
    Op::new("get-lat", 1, |args| match args[0] {
        Value::LngLat { lat, .. } => Ok(Value::Number(lat)),
        ref other => Err(EvalError::Type { op: "get-lat".into(), expected: "lnglat", got: other.to_string() }),
    })
}

pub fn get_lng() -> Op {
    Op::new("get-lng", 1, |args| match args[0] {
        Value::LngLat { lng, .. } => Ok(Value::Number(lng)),
        ref other => Err(EvalError::Type { op: "get-lng".into(), expected: "lnglat", got: other.to_string() }),
    })
}

/// Packs its arguments into a tuple.
pub fn tuple(arity: usize) -> Op {
    Op::new("tuple", arity, |args| Ok(Value::tuple(args.iter().cloned())))
}
