mod common;

use proptest::prelude::*;

use common::{counter, event, numbers, pick, positives, run_engine, Event, OneFlock, FLOCK, MAX_KEYS};
use flocks::bag::{DeploymentKey, IncrementalBag, Patch};
use flocks::behaviour::CollectionMode;
use flocks::reactor::{Reactor, Stimulus};
use flocks::stream::{Effect, NodeTag, Payload};
use flocks::value::Value;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn engine_matches_filter_map(
        initial in prop::collection::vec(any::<i16>(), 0..20),
        events in prop::collection::vec(event(), 1..80),
        with_default in any::<bool>(),
    ) {
        let default = with_default.then(|| Value::number(-1));
        run_engine(&initial, &events, default)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn reactor_counts_match_recount(
        initial in prop::collection::vec(-5i16..5, 0..20),
        events in prop::collection::vec(event(), 1..40),
        bag_mode in any::<bool>(),
    ) {
        let mode = if bag_mode { CollectionMode::Bag } else { CollectionMode::Incremental };
        let (mut r, init) = Reactor::spawn(&counter(mode), &OneFlock).unwrap();
        let tag: NodeTag = init.effects.iter().find_map(|e| match e {
            Effect::Subscribe { stream, tag, .. } if stream.owner == FLOCK => Some(*tag),
            _ => None,
        }).unwrap();
        let mut input = numbers(&initial);
        r.handle(Stimulus::Stream { tag, payload: Payload::Snapshot(input.clone()) }, &OneFlock).unwrap();
        prop_assert_eq!(r.output(), Some(Value::number(positives(&input))));
        for ev in &events {
            let change: Option<(IncrementalBag, Patch)> = match ev {
                Event::Insert(x) if input.len() < MAX_KEYS => Some(input.insert(Value::number(*x % 5)).unwrap()),
                Event::Update(s, x) => pick(&input, *s).map(|k| input.update(k, Value::number(*x % 5)).unwrap()),
                Event::Remove(s) | Event::Flip(s, _) => pick(&input, *s).map(|k| input.remove(k).unwrap()),
                _ => None,
            };
            let payload = match (change, ev) {
                (_, Event::Replace(xs)) => {
                    let base = input.next_key();
                    input = IncrementalBag::from_entries(
                        xs.iter().enumerate().map(|(i, x)| (DeploymentKey(base + i as u64), Value::number(*x % 5))),
                    ).unwrap();
                    Payload::Snapshot(input.clone())
                }
                (Some((next, p)), _) => {
                    input = next;
                    if bag_mode { Payload::Snapshot(input.clone()) } else { Payload::Patch(p) }
                }
                (None, _) => continue,
            };
            r.handle(Stimulus::Stream { tag, payload }, &OneFlock).unwrap();
            prop_assert_eq!(r.output(), Some(Value::number(positives(&input))), "after {:?}", ev);
        }
    }
}
