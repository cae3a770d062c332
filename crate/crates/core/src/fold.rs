//! Patch-aware aggregates over incremental bags.

use std::fmt;
use std::sync::Arc;

use crate::bag::{IncrementalBag, Patch};
use crate::ops::EvalError;
use crate::value::Value;

pub type BinaryFn = Arc<dyn Fn(&Value, &Value) -> Result<Value, EvalError> + Send + Sync>;

/// A fold with an inverse: `inverse(combine(a, e), e) == a` must hold for all
/// reachable accumulators, which lets updates and removals be undone in O(1).
#[derive(Clone)]
pub struct FoldSpec {
    pub init: Value,
    pub combine: BinaryFn,
    pub inverse: BinaryFn,
    /// Recompute from scratch after this many steps. `None` never refolds.
    pub refold_every: Option<u64>,
}

impl fmt::Debug for FoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FoldSpec").field("init", &self.init).field("refold_every", &self.refold_every).finish()
    }
}

impl FoldSpec {
    pub fn new(
        init: Value,
        combine: impl Fn(&Value, &Value) -> Result<Value, EvalError> + Send + Sync + 'static,
        inverse: impl Fn(&Value, &Value) -> Result<Value, EvalError> + Send + Sync + 'static,
    ) -> Self {
        FoldSpec { init, combine: Arc::new(combine), inverse: Arc::new(inverse), refold_every: None }
    }

    /// `(fold bag 0 '+ '-)`
    pub fn sum() -> Self {
        FoldSpec::new(Value::Number(0.0), crate::ops::add2, crate::ops::sub2)
    }

    pub fn with_refold_every(mut self, steps: u64) -> Self {
        self.refold_every = Some(steps);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldState {
    pub acc: Value,
    /// Total combine/inverse invocations performed through this state.
    pub invocations: u64,
    pub steps_since_refold: u64,
}

pub fn fold_full(bag: &IncrementalBag, spec: &FoldSpec) -> Result<(Value, FoldState), EvalError> {
    let mut acc = spec.init.clone();
    let mut invocations = 0;
    for v in bag.values() {
        acc = (spec.combine)(&acc, v)?;
        invocations += 1;
    }
    Ok((acc.clone(), FoldState { acc, invocations, steps_since_refold: 0 }))
}

/// One inverse and/or one combine per patch.
pub fn fold_step(state: &FoldState, patch: &Patch, spec: &FoldSpec) -> Result<(Value, FoldState), EvalError> {
    let mut invocations = state.invocations;
    let acc = match patch {
        Patch::Insert { value, .. } => {
            invocations += 1;
            (spec.combine)(&state.acc, value)?
        }
        Patch::Update { old, new, .. } => {
            invocations += 2;
            let undone = (spec.inverse)(&state.acc, old)?;
            (spec.combine)(&undone, new)?
        }
        Patch::Remove { old, .. } => {
            invocations += 1;
            (spec.inverse)(&state.acc, old)?
        }
    };
    Ok((acc.clone(), FoldState { acc, invocations, steps_since_refold: state.steps_since_refold + 1 }))
}

/// Steps the fold, refolding from `bag` (the post-patch snapshot) when the
/// spec's `refold_every` budget is exhausted.
pub fn fold_step_with_refold(
    state: &FoldState,
    patch: &Patch,
    bag: &IncrementalBag,
    spec: &FoldSpec,
) -> Result<(Value, FoldState), EvalError> {
    match spec.refold_every {
        Some(every) if state.steps_since_refold + 1 >= every => {
            let (v, mut s) = fold_full(bag, spec)?;
            s.invocations += state.invocations;
            Ok((v, s))
        }
        _ => fold_step(state, patch, spec),
    }
}

pub fn size_step(count: f64, patch: &Patch) -> f64 {
    match patch {
        Patch::Insert { .. } => count + 1.0,
        Patch::Update { .. } => count,
        Patch::Remove { .. } => count - 1.0,
    }
}
