//! Hierarchical node priorities and the per-turn scheduling queue.
//!
//! A node of the root deployment has priority `[h]`, its static height. A node
//! inside a deployment created by a node with priority `P` has priority
//! `P ++ [h]`. Comparing these lists lexicographically (shorter list wins on a
//! shared prefix) orders every creator before everything it created, and every
//! created node before any consumer of the creator's output, which is what
//! keeps propagation glitch-free across nested deployments.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::Hash;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid priority: empty list")]
pub struct InvalidPriority;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Priority(Arc<[u32]>);

impl Priority {
    pub fn new(heights: impl IntoIterator<Item = u32>) -> Result<Self, InvalidPriority> {
        let heights: Arc<[u32]> = heights.into_iter().collect();
        if heights.is_empty() {
            return Err(InvalidPriority);
        }
        Ok(Priority(heights))
    }

    pub fn root(height: u32) -> Self {
        Priority(Arc::from([height]))
    }

    /// `self ++ [height]`
    pub fn child(&self, height: u32) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(height);
        Priority(v.into())
    }

    pub fn heights(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Debug for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, h) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{h}")?;
        }
        f.write_str(")")
    }
}

/// Returns whether `p1` must run before `p2`.
///
/// Strict lexicographic order: the first differing position decides (smaller
/// wins); on a shared prefix the shorter list wins; equal lists are not higher.
pub fn has_higher_priority(p1: &[u32], p2: &[u32]) -> Result<bool, InvalidPriority> {
    if p1.is_empty() || p2.is_empty() {
        return Err(InvalidPriority);
    }
    for (a, b) in p1.iter().zip(p2) {
        match a.cmp(b) {
            Ordering::Less => return Ok(true),
            Ordering::Greater => return Ok(false),
            Ordering::Equal => {}
        }
    }
    Ok(p1.len() < p2.len())
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        // slice ordering is exactly the lexicographic rule above
        self.0.as_ref().cmp(other.0.as_ref())
    }
}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority queue of node ids without duplicates. Ties on equal priority are
/// broken by id so that pop order is deterministic.
#[derive(Debug, Clone)]
pub struct TurnQueue<Id> {
    pending: BTreeSet<(Priority, Id)>,
    members: BTreeMap<Id, Priority>,
}

impl<Id> Default for TurnQueue<Id> {
    fn default() -> Self {
        TurnQueue { pending: BTreeSet::new(), members: BTreeMap::new() }
    }
}

impl<Id: Copy + Ord> TurnQueue<Id> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the node was already queued.
    pub fn schedule(&mut self, id: Id, priority: Priority) -> bool {
        if self.members.contains_key(&id) {
            return false;
        }
        self.pending.insert((priority.clone(), id));
        self.members.insert(id, priority);
        true
    }

    pub fn pop(&mut self) -> Option<(Id, Priority)> {
        let (priority, id) = self.pending.pop_first()?;
        self.members.remove(&id);
        Some((id, priority))
    }

    pub fn remove(&mut self, id: Id) -> bool {
        match self.members.remove(&id) {
            Some(p) => self.pending.remove(&(p, id)),
            None => false,
        }
    }

    pub fn contains(&self, id: Id) -> bool {
        self.members.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
        self.members.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_lists(max_height: u32, max_len: usize) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = Vec::new();
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for prefix in &frontier {
                for h in 0..max_height {
                    let mut l = prefix.clone();
                    l.push(h);
                    next.push(l);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn documented_examples() {
        assert!(has_higher_priority(&[1, 2], &[2, 2]).unwrap());
        assert!(has_higher_priority(&[2], &[2, 1]).unwrap());
        assert!(!has_higher_priority(&[2, 2], &[2, 2]).unwrap());
        assert!(!has_higher_priority(&[2, 1], &[1, 3]).unwrap());
        assert!(has_higher_priority(&[1, 3], &[2, 1]).unwrap());
    }

    #[test]
    fn empty_lists_are_invalid() {
        assert_eq!(has_higher_priority(&[], &[1]), Err(InvalidPriority));
        assert_eq!(Priority::new([]), Err(InvalidPriority));
    }

    #[test]
    fn strict_total_order_on_bounded_lists() {
        let lists = all_lists(4, 3);
        assert_eq!(lists.len(), 4 + 16 + 64);
        let hp = |a: &Vec<u32>, b: &Vec<u32>| has_higher_priority(a, b).unwrap();
        for a in &lists {
            assert!(!hp(a, a));
            for b in &lists {
                if a != b {
                    assert!(hp(a, b) ^ hp(b, a), "{a:?} vs {b:?}");
                }
                for c in &lists {
                    if hp(a, b) && hp(b, c) {
                        assert!(hp(a, c));
                    }
                }
            }
        }
    }

    #[test]
    fn creator_precedes_created() {
        for h in 0..10 {
            assert!(has_higher_priority(&[2], &[2, h]).unwrap());
        }
        let p = Priority::new([2, 3]).unwrap().child(0);
        assert_eq!(p.heights(), &[2, 3, 0]);
    }

    #[test]
    fn ord_agrees_with_comparator() {
        let lists = all_lists(3, 3);
        for a in &lists {
            for b in &lists {
                let pa = Priority::new(a.iter().copied()).unwrap();
                let pb = Priority::new(b.iter().copied()).unwrap();
                assert_eq!(pa < pb, has_higher_priority(a, b).unwrap());
            }
        }
    }

    #[test]
    fn queue_deduplicates_and_orders() {
        let mut q = TurnQueue::new();
        assert!(q.schedule(3u32, Priority::root(2)));
        assert!(q.schedule(1u32, Priority::new([1, 5]).unwrap()));
        assert!(!q.schedule(3u32, Priority::root(2)));
        assert!(q.schedule(2u32, Priority::root(1)));
        assert_eq!(q.len(), 3);
        assert_eq!(q.pop().unwrap().0, 2);
        assert_eq!(q.pop().unwrap().0, 1);
        assert!(q.remove(3));
        assert!(q.pop().is_none());
    }
}
