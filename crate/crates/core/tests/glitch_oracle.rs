mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{build, generate, glitch_case, max_runs, MAX_NODES};
use flocks::reactor::{PriorityScheme, Reactor};
use flocks::stream::NoStreams;
use flocks::value::Value;

#[test]
fn random_nested_dags_are_glitch_free() {
    for case in 0..200u64 {
        glitch_case(case).unwrap();
    }
}
#[test]
fn flat_heights_glitch_on_some_random_dags() {
    let mut glitched = 0;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let sources = rng.gen_range(1..=3);
        let spec = generate(&mut rng, 0, sources, MAX_NODES);
        let (mut r, _) = Reactor::spawn_with(&build(&spec, "Root"), &NoStreams, PriorityScheme::FlatHeights, true).unwrap();
        let a: Vec<Value> = (0..sources).map(|i| Value::number(i as f64)).collect();
        let b: Vec<Value> = (0..sources).map(|i| Value::number(i as f64 + 7.0)).collect();
        r.react(&a, &NoStreams).unwrap();
        let out = r.react(&b, &NoStreams).unwrap();
        if max_runs(&out.trace).is_some_and(|(_, n)| n > 1) {
            glitched += 1;
        }
    }
    assert!(glitched > 0);
}
