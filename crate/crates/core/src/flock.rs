//! Per-peer flock state: own published members, mirrored views of other
//! peers' members, and the merged contents bag with one key per multiplicity.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bag::{BagError, DeploymentKey, IncrementalBag, Patch};
use crate::value::{PeerId, ProcessRef, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlockError {
    #[error("{member} is not a member of {flock}")]
    NotAMember { flock: String, member: ProcessRef },
    #[error(transparent)]
    Bag(#[from] BagError),
}

/// A multiset of member references.
pub type Members = BTreeMap<ProcessRef, u32>;

#[derive(Debug, Clone, Default)]
struct View {
    version: u64,
    members: Members,
    keys: BTreeMap<ProcessRef, Vec<DeploymentKey>>,
}

#[derive(Debug, Clone)]
pub struct FlockState {
    name: String,
    own: View,
    views: BTreeMap<PeerId, View>,
    contents: IncrementalBag,
}

impl FlockState {
    pub fn new(name: &str) -> Self {
        FlockState { name: name.to_string(), own: View::default(), views: BTreeMap::new(), contents: IncrementalBag::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn contents(&self) -> &IncrementalBag {
        &self.contents
    }

    pub fn version(&self) -> u64 {
        self.own.version
    }

    pub fn own_members(&self) -> &Members {
        &self.own.members
    }

    /// Contents as a multiset of references.
    pub fn content_members(&self) -> Members {
        let mut m = Members::new();
        for v in self.contents.values() {
            if let Value::Actor(r) = v {
                *m.entry(*r).or_default() += 1;
            }
        }
        m
    }

    pub fn view_version(&self, peer: PeerId) -> Option<u64> {
        self.views.get(&peer).map(|v| v.version)
    }

    fn add(contents: &mut IncrementalBag, view: &mut View, member: ProcessRef) -> Result<Patch, FlockError> {
        let (next, patch) = contents.insert(Value::Actor(member))?;
        *contents = next;
        *view.members.entry(member).or_default() += 1;
        view.keys.entry(member).or_default().push(patch.key());
        Ok(patch)
    }

    fn take(contents: &mut IncrementalBag, view: &mut View, member: ProcessRef) -> Result<Option<Patch>, FlockError> {
        let Some(keys) = view.keys.get_mut(&member) else { return Ok(None) };
        let Some(key) = keys.pop() else { return Ok(None) };
        if keys.is_empty() {
            view.keys.remove(&member);
        }
        match view.members.get_mut(&member) {
            Some(1) | None => {
                view.members.remove(&member);
            }
            Some(n) => *n -= 1,
        }
        let (next, patch) = contents.remove(key)?;
        *contents = next;
        Ok(Some(patch))
    }

    /// Adds one multiplicity of a local member.
    pub fn publish(&mut self, member: ProcessRef) -> Result<Patch, FlockError> {
        let p = Self::add(&mut self.contents, &mut self.own, member)?;
        self.own.version += 1;
        Ok(p)
    }

    pub fn unpublish(&mut self, member: ProcessRef) -> Result<Patch, FlockError> {
        match Self::take(&mut self.contents, &mut self.own, member)? {
            Some(p) => {
                self.own.version += 1;
                Ok(p)
            }
            None => Err(FlockError::NotAMember { flock: self.name.clone(), member }),
        }
    }

    /// Brings the view of `peer` in line with its full member list.
    pub fn set_view(&mut self, peer: PeerId, version: u64, members: &Members) -> Result<Vec<Patch>, FlockError> {
        let mut view = self.views.remove(&peer).unwrap_or_default();
        let mut patches = Vec::new();
        let current: Vec<(ProcessRef, u32)> = view.members.iter().map(|(k, v)| (*k, *v)).collect();
        for (m, have) in current {
            let want = members.get(&m).copied().unwrap_or(0);
            for _ in want..have {
                patches.extend(Self::take(&mut self.contents, &mut view, m)?);
            }
        }
        for (m, want) in members {
            let have = view.members.get(m).copied().unwrap_or(0);
            for _ in have..*want {
                patches.push(Self::add(&mut self.contents, &mut view, *m)?);
            }
        }
        view.version = version;
        self.views.insert(peer, view);
        Ok(patches)
    }

    /// Applies a single membership delta if it directly follows the
    /// view's version. Returns None when it does not (a full exchange will repair).
    pub fn apply_delta(
        &mut self,
        peer: PeerId,
        version: u64,
        member: ProcessRef,
        added: bool,
    ) -> Result<Option<Vec<Patch>>, FlockError> {
        let Some(view) = self.views.get_mut(&peer) else { return Ok(None) };
        if version != view.version + 1 {
            return Ok(None);
        }
        view.version = version;
        let patch = if added {
            Some(Self::add(&mut self.contents, view, member)?)
        } else {
            Self::take(&mut self.contents, view, member)?
        };
        Ok(Some(patch.into_iter().collect()))
    }

    /// Forgets everything `peer` published.
    pub fn drop_view(&mut self, peer: PeerId) -> Result<Vec<Patch>, FlockError> {
        let mut patches = Vec::new();
        if let Some(mut view) = self.views.remove(&peer) {
            let members: Vec<ProcessRef> = view.keys.keys().copied().collect();
            for m in members {
                while let Some(p) = Self::take(&mut self.contents, &mut view, m)? {
                    patches.push(p);
                }
            }
        }
        Ok(patches)
    }

    pub fn has_view(&self, peer: PeerId) -> bool {
        self.views.contains_key(&peer)
    }
}
