//! Persistent keyed multisets and the insert/update/remove patch algebra.

use std::fmt;

use thiserror::Error;

use crate::value::{values_equal, Value};

/// Key binding one bag entry to the deployment that processes it.
///
/// Keys are drawn from a per-lineage counter, so they increase in insertion
/// order and are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeploymentKey(pub u64);

impl fmt::Display for DeploymentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Patch {
    Insert { key: DeploymentKey, value: Value },
    Update { key: DeploymentKey, old: Value, new: Value },
    Remove { key: DeploymentKey, old: Value },
}

impl Patch {
    pub fn key(&self) -> DeploymentKey {
        match self {
            Patch::Insert { key, .. } | Patch::Update { key, .. } | Patch::Remove { key, .. } => *key,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Patch::Insert { .. } => "insert",
            Patch::Update { .. } => "update",
            Patch::Remove { .. } => "remove",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Patch::Insert { key, value } => serde_json::json!({"insert": key.0, "value": value.to_json()}),
            Patch::Update { key, old, new } => {
                serde_json::json!({"update": key.0, "old": old.to_json(), "new": new.to_json()})
            }
            Patch::Remove { key, old } => serde_json::json!({"remove": key.0, "old": old.to_json()}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BagError {
    #[error("NoValue not storable")]
    NoValueNotStorable,
    #[error("unknown key {0}")]
    UnknownKey(DeploymentKey),
    #[error("patch does not apply: {0}")]
    PatchDoesNotApply(String),
}

/// Immutable multiset snapshot. Every mutator returns a new bag that shares
/// structure with the old one; old snapshots stay valid.
#[derive(Clone, Default)]
pub struct IncrementalBag {
    entries: im::OrdMap<DeploymentKey, Value>,
    next_key: u64,
}

impl PartialEq for IncrementalBag {
    fn eq(&self, other: &Self) -> bool {
        self.entries_equal(other)
    }
}

impl fmt::Debug for IncrementalBag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.entries.iter().map(|(k, v)| (k.0, v))).finish()
    }
}

impl IncrementalBag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_key(&self) -> u64 {
        self.next_key
    }

    pub fn get(&self, key: DeploymentKey) -> Option<&Value> {
        self.entries.get(&key)
    }

    pub fn contains_key(&self, key: DeploymentKey) -> bool {
        self.entries.contains_key(&key)
    }

    /// Entries in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (DeploymentKey, &Value)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn keys(&self) -> impl Iterator<Item = DeploymentKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn values(&self) -> impl Iterator<Item = &Value> + '_ {
        self.entries.values()
    }

    /// Same keys mapped to equal values; `next_key` is ignored.
    pub fn entries_equal(&self, other: &IncrementalBag) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((k1, v1), (k2, v2))| k1 == k2 && values_equal(v1, v2))
    }

    pub fn insert(&self, value: Value) -> Result<(IncrementalBag, Patch), BagError> {
        if value.is_no_value() {
            return Err(BagError::NoValueNotStorable);
        }
        let key = DeploymentKey(self.next_key);
        let entries = self.entries.update(key, value.clone());
        Ok((IncrementalBag { entries, next_key: self.next_key + 1 }, Patch::Insert { key, value }))
    }

    pub fn update(&self, key: DeploymentKey, value: Value) -> Result<(IncrementalBag, Patch), BagError> {
        if value.is_no_value() {
            return Err(BagError::NoValueNotStorable);
        }
        let old = self.entries.get(&key).cloned().ok_or(BagError::UnknownKey(key))?;
        let entries = self.entries.update(key, value.clone());
        Ok((IncrementalBag { entries, next_key: self.next_key }, Patch::Update { key, old, new: value }))
    }

    pub fn remove(&self, key: DeploymentKey) -> Result<(IncrementalBag, Patch), BagError> {
        let old = self.entries.get(&key).cloned().ok_or(BagError::UnknownKey(key))?;
        let entries = self.entries.without(&key);
        Ok((IncrementalBag { entries, next_key: self.next_key }, Patch::Remove { key, old }))
    }

    /// Applies a patch emitted by another bag of the same lineage.
    pub fn apply(&self, patch: &Patch) -> Result<IncrementalBag, BagError> {
        match patch {
            Patch::Insert { key, value } => {
                if value.is_no_value() {
                    return Err(BagError::NoValueNotStorable);
                }
                if self.entries.contains_key(key) {
                    return Err(BagError::PatchDoesNotApply(format!("insert of present key {key}")));
                }
                Ok(IncrementalBag {
                    entries: self.entries.update(*key, value.clone()),
                    next_key: self.next_key.max(key.0 + 1),
                })
            }
            Patch::Update { key, old, new } => {
                self.check_old(*key, old)?;
                if new.is_no_value() {
                    return Err(BagError::NoValueNotStorable);
                }
                Ok(IncrementalBag { entries: self.entries.update(*key, new.clone()), next_key: self.next_key })
            }
            Patch::Remove { key, old } => {
                self.check_old(*key, old)?;
                Ok(IncrementalBag { entries: self.entries.without(key), next_key: self.next_key })
            }
        }
    }

    fn check_old(&self, key: DeploymentKey, old: &Value) -> Result<(), BagError> {
        match self.entries.get(&key) {
            None => Err(BagError::PatchDoesNotApply(format!("key {key} absent"))),
            Some(stored) if !values_equal(stored, old) => {
                Err(BagError::PatchDoesNotApply(format!("stale old value for {key}: stored {stored}, patch {old}")))
            }
            Some(_) => Ok(()),
        }
    }

    /// Builds a bag with explicit keys. Used where an output snapshot mirrors
    /// the keys of an input snapshot.
    pub fn from_entries(entries: impl IntoIterator<Item = (DeploymentKey, Value)>) -> Result<IncrementalBag, BagError> {
        let mut map = im::OrdMap::new();
        let mut next_key = 0;
        for (k, v) in entries {
            if v.is_no_value() {
                return Err(BagError::NoValueNotStorable);
            }
            next_key = next_key.max(k.0 + 1);
            map.insert(k, v);
        }
        Ok(IncrementalBag { entries: map, next_key })
    }
}

pub fn bag_insert(bag: &IncrementalBag, v: Value) -> Result<(IncrementalBag, Patch), BagError> {
    bag.insert(v)
}

pub fn bag_update(bag: &IncrementalBag, k: DeploymentKey, v: Value) -> Result<(IncrementalBag, Patch), BagError> {
    bag.update(k, v)
}

pub fn bag_remove(bag: &IncrementalBag, k: DeploymentKey) -> Result<(IncrementalBag, Patch), BagError> {
    bag.remove(k)
}

pub fn bag_apply(bag: &IncrementalBag, p: &Patch) -> Result<IncrementalBag, BagError> {
    bag.apply(p)
}

pub fn bag_size(bag: &IncrementalBag) -> Value {
    Value::Number(bag.len() as f64)
}
