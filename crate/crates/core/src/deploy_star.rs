//! The topology-reactive `deploy-*` rule engine.
//!
//! [`DeployStarState`] tracks the input key set and the output snapshot and
//! decides, for every input snapshot or patch and every child output, which
//! snapshot or patch to propagate. It knows nothing about DAG evaluation: the
//! reactor drives it in two phases (topology first, child outputs after the
//! children ran), while [`DeployStarState::on_input`] runs both phases
//! synchronously against a [`ChildEvaluator`].

use thiserror::Error;

use crate::bag::{BagError, DeploymentKey, IncrementalBag, Patch};
use crate::ops::EvalError;
use crate::value::{values_equal, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeployStarError {
    #[error("deploy-*: no deployment for key {0}")]
    UnknownKey(DeploymentKey),
    #[error("deploy-*: deployment for key {0} already exists")]
    KeyPresent(DeploymentKey),
    #[error("deploy-*: {0}")]
    Bag(#[from] BagError),
    #[error("deploy-* child failed: {0}")]
    Child(#[from] EvalError),
}

#[derive(Debug, Clone)]
pub enum DeployStarInput {
    Snapshot(IncrementalBag),
    Patch(Patch),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeployStarOutput {
    NewSnapshot(IncrementalBag),
    OnePatch(Patch),
    Nothing,
}

impl DeployStarOutput {
    pub fn is_nothing(&self) -> bool {
        matches!(self, DeployStarOutput::Nothing)
    }
}

/// Evaluates child deployments synchronously.
pub trait ChildEvaluator {
    /// Creates the deployment for `key`, feeds it `element` and returns its sink value.
    fn create(&mut self, key: DeploymentKey, element: &Value) -> Result<Value, EvalError>;
    /// Feeds a new element to an existing deployment and returns its sink value.
    fn update(&mut self, key: DeploymentKey, element: &Value) -> Result<Value, EvalError>;
    fn destroy(&mut self, key: DeploymentKey);
}

/// Deployments to tear down and create for a snapshot replace.
#[derive(Debug, Clone, Default)]
pub struct SnapshotPlan {
    pub torn_down: Vec<DeploymentKey>,
    pub created: Vec<(DeploymentKey, Value)>,
}

#[derive(Debug, Clone, Default)]
pub struct DeployStarState {
    default: Option<Value>,
    live: im::OrdSet<DeploymentKey>,
    pre_snapshot: IncrementalBag,
}

impl DeployStarState {
    pub fn new(default: Option<Value>) -> Self {
        DeployStarState { default, ..Default::default() }
    }

    pub fn default_value(&self) -> Option<&Value> {
        self.default.as_ref()
    }

    /// Current output snapshot.
    pub fn pre_snapshot(&self) -> &IncrementalBag {
        &self.pre_snapshot
    }

    pub fn live_keys(&self) -> impl Iterator<Item = DeploymentKey> + '_ {
        self.live.iter().copied()
    }

    pub fn is_live(&self, key: DeploymentKey) -> bool {
        self.live.contains(&key)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    fn substitute(&self, o: &Value) -> Value {
        match (o, &self.default) {
            (Value::NoValue, Some(d)) => d.clone(),
            _ => o.clone(),
        }
    }

    /// Snapshot (empty state) and snapshot replace: every existing deployment
    /// goes, one new deployment per input entry in ascending key order.
    pub fn begin_snapshot(&mut self, input: &IncrementalBag) -> SnapshotPlan {
        let torn_down = self.live.iter().copied().collect();
        self.live = input.keys().collect();
        self.pre_snapshot = IncrementalBag::new();
        SnapshotPlan { torn_down, created: input.iter().map(|(k, v)| (k, v.clone())).collect() }
    }

    /// Collects the new deployments' outputs; NoValue outputs are left out.
    pub fn finish_snapshot(
        &mut self,
        outputs: impl IntoIterator<Item = (DeploymentKey, Value)>,
    ) -> Result<DeployStarOutput, DeployStarError> {
        let mut entries = Vec::new();
        for (k, o) in outputs {
            if !self.live.contains(&k) {
                return Err(DeployStarError::UnknownKey(k));
            }
            let o = self.substitute(&o);
            if o.is_materialized() {
                entries.push((k, o));
            }
        }
        self.pre_snapshot = IncrementalBag::from_entries(entries)?;
        Ok(DeployStarOutput::NewSnapshot(self.pre_snapshot.clone()))
    }

    /// Insert patch: registers the new deployment. Its output follows
    /// [`Self::on_child_output`].
    pub fn insert_key(&mut self, key: DeploymentKey) -> Result<(), DeployStarError> {
        if self.live.insert(key).is_some() {
            return Err(DeployStarError::KeyPresent(key));
        }
        Ok(())
    }

    pub fn check_live(&self, key: DeploymentKey) -> Result<(), DeployStarError> {
        if self.live.contains(&key) {
            Ok(())
        } else {
            Err(DeployStarError::UnknownKey(key))
        }
    }

    /// Remove patch: drops the deployment and retracts its output if it had one.
    pub fn remove_key(&mut self, key: DeploymentKey) -> Result<DeployStarOutput, DeployStarError> {
        if self.live.remove(&key).is_none() {
            return Err(DeployStarError::UnknownKey(key));
        }
        match self.pre_snapshot.get(key).cloned() {
            Some(prev) => {
                let patch = Patch::Remove { key, old: prev };
                self.pre_snapshot = self.pre_snapshot.apply(&patch)?;
                Ok(DeployStarOutput::OnePatch(patch))
            }
            None => Ok(DeployStarOutput::Nothing),
        }
    }

    /// A child deployment produced `output` (possibly NoValue).
    pub fn on_child_output(&mut self, key: DeploymentKey, output: &Value) -> Result<DeployStarOutput, DeployStarError> {
        self.check_live(key)?;
        let o = self.substitute(output);
        let prev = self.pre_snapshot.get(key).cloned();
        let patch = match (prev, o.is_materialized()) {
            (Some(prev), true) if values_equal(&prev, &o) => return Ok(DeployStarOutput::Nothing),
            (Some(prev), true) => Patch::Update { key, old: prev, new: o },
            (None, true) => Patch::Insert { key, value: o },
            (Some(prev), false) => Patch::Remove { key, old: prev },
            (None, false) => return Ok(DeployStarOutput::Nothing),
        };
        self.pre_snapshot = self.pre_snapshot.apply(&patch)?;
        Ok(DeployStarOutput::OnePatch(patch))
    }

    /// Processes one input synchronously.
    pub fn on_input(
        &mut self,
        input: &DeployStarInput,
        children: &mut impl ChildEvaluator,
    ) -> Result<DeployStarOutput, DeployStarError> {
        match input {
            DeployStarInput::Snapshot(bag) => {
                let plan = self.begin_snapshot(bag);
                for k in plan.torn_down {
                    children.destroy(k);
                }
                let mut outputs = Vec::with_capacity(plan.created.len());
                for (k, v) in plan.created {
                    outputs.push((k, children.create(k, &v)?));
                }
                self.finish_snapshot(outputs)
            }
            DeployStarInput::Patch(Patch::Insert { key, value }) => {
                self.insert_key(*key)?;
                let o = children.create(*key, value)?;
                self.on_child_output(*key, &o)
            }
            DeployStarInput::Patch(Patch::Update { key, new, .. }) => {
                self.check_live(*key)?;
                let o = children.update(*key, new)?;
                self.on_child_output(*key, &o)
            }
            DeployStarInput::Patch(Patch::Remove { key, .. }) => {
                let out = self.remove_key(*key)?;
                children.destroy(*key);
                Ok(out)
            }
        }
    }
}

/// Child evaluator backed by a pure function of the element, with deployment
/// counters.
pub struct FnChildren<F> {
    pub f: F,
    pub created: usize,
    pub destroyed: usize,
    pub evaluations: usize,
    pub live: std::collections::BTreeMap<DeploymentKey, Value>,
}

impl<F: FnMut(&Value) -> Result<Value, EvalError>> FnChildren<F> {
    pub fn new(f: F) -> Self {
        FnChildren { f, created: 0, destroyed: 0, evaluations: 0, live: Default::default() }
    }
}

impl<F: FnMut(&Value) -> Result<Value, EvalError>> ChildEvaluator for FnChildren<F> {
    fn create(&mut self, key: DeploymentKey, element: &Value) -> Result<Value, EvalError> {
        self.created += 1;
        self.evaluations += 1;
        self.live.insert(key, element.clone());
        (self.f)(element)
    }

    fn update(&mut self, key: DeploymentKey, element: &Value) -> Result<Value, EvalError> {
        self.evaluations += 1;
        self.live.insert(key, element.clone());
        (self.f)(element)
    }

    fn destroy(&mut self, key: DeploymentKey) {
        self.destroyed += 1;
        self.live.remove(&key);
    }
}
