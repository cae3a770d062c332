use proptest::prelude::*;

use flocks::bag::{IncrementalBag, Patch};
use flocks::fold::{fold_full, fold_step, fold_step_with_refold, size_step, FoldSpec};
use flocks::value::Value;

#[derive(Debug, Clone)]
enum Op {
    Insert(i32),
    Update(usize, i32),
    Remove(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (-1000i32..1000).prop_map(Op::Insert),
        2 => (any::<usize>(), -1000i32..1000).prop_map(|(s, v)| Op::Update(s, v)),
        2 => any::<usize>().prop_map(Op::Remove),
    ]
}

/// Applies `ops`, returning every intermediate bag and the patches between them.
fn history(ops: &[Op]) -> (Vec<IncrementalBag>, Vec<Patch>) {
    let mut bag = IncrementalBag::new();
    let mut bags = vec![bag.clone()];
    let mut patches = Vec::new();
    for op in ops {
        let keys: Vec<_> = bag.keys().collect();
        let step = match op {
            Op::Insert(v) => Some(bag.insert(Value::number(*v)).unwrap()),
            Op::Update(s, v) if !keys.is_empty() => Some(bag.update(keys[s % keys.len()], Value::number(*v)).unwrap()),
            Op::Remove(s) if !keys.is_empty() => Some(bag.remove(keys[s % keys.len()]).unwrap()),
            _ => None,
        };
        if let Some((next, p)) = step {
            bag = next;
            bags.push(bag.clone());
            patches.push(p);
        }
    }
    (bags, patches)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn replaying_patches_rebuilds_every_state(ops in prop::collection::vec(op(), 0..120)) {
        let (bags, patches) = history(&ops);
        let mut replay = IncrementalBag::new();
        for (i, p) in patches.iter().enumerate() {
            replay = replay.apply(p).unwrap();
            prop_assert!(replay.entries_equal(&bags[i + 1]));
        }
        prop_assert_eq!(replay.len(), bags.last().unwrap().len());
        let fresh = IncrementalBag::from_entries(replay.iter().map(|(k, v)| (k, v.clone()))).unwrap();
        prop_assert!(fresh.entries_equal(&replay));
    }

    #[test]
    fn stale_patches_are_rejected(ops in prop::collection::vec(op(), 1..60)) {
        let (bags, patches) = history(&ops);
        if let Some(p) = patches.first() {
            let last = bags.last().unwrap();
            if let Patch::Insert { key, .. } = p {
                if last.contains_key(*key) {
                    prop_assert!(last.apply(p).is_err());
                }
            }
        }
    }

    #[test]
    fn incremental_fold_equals_full_fold(ops in prop::collection::vec(op(), 0..120), every in 1u64..10) {
        let (bags, patches) = history(&ops);
        let spec = FoldSpec::sum();
        let refolding = FoldSpec::sum().with_refold_every(every);
        let (_, mut state) = fold_full(&bags[0], &spec).unwrap();
        let (_, mut rstate) = fold_full(&bags[0], &refolding).unwrap();
        let mut count = 0.0;
        for (i, p) in patches.iter().enumerate() {
            let (v, s) = fold_step(&state, p, &spec).unwrap();
            let (rv, rs) = fold_step_with_refold(&rstate, p, &bags[i + 1], &refolding).unwrap();
            let (full, _) = fold_full(&bags[i + 1], &spec).unwrap();
            prop_assert_eq!(&v, &full);
            prop_assert_eq!(&rv, &full);
            count = size_step(count, p);
            prop_assert_eq!(count, bags[i + 1].len() as f64);
            state = s;
            rstate = rs;
        }
    }
}
