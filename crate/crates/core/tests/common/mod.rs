//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flocks::actor::{bike_behaviour, recorder_behaviour};
use flocks::bag::{DeploymentKey, IncrementalBag};
use flocks::behaviour::{CollectionMode, DeployStarOptions, NodeHandle, ReactorBehaviour};
use flocks::deploy_star::{DeployStarInput, DeployStarOutput, DeployStarState, FnChildren};
use flocks::flock::Members;
use flocks::geo::{counting_marker, BIKES};
use flocks::net::{NetSim, SimConfig};
use flocks::ops::{self, EvalError};
use flocks::reactor::{PriorityScheme, ReactInput, Reactor};
use flocks::stream::{NoStreams, Payload, StreamDirectory, StreamLookup};
use flocks::trace::TraceRecord;
use flocks::value::{PeerId, ProcessRef, StreamRef, Value};

pub const MAX_KEYS: usize = 50;

#[derive(Debug, Clone)]
pub enum Event {
    Insert(i16),
    Update(usize, i16),
    Remove(usize),
    Replace(Vec<i16>),
    /// Child output change without an input change; None is NoValue.
    Flip(usize, Option<i16>),
}

pub fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        4 => any::<i16>().prop_map(Event::Insert),
        4 => (any::<usize>(), any::<i16>()).prop_map(|(s, v)| Event::Update(s, v)),
        3 => any::<usize>().prop_map(Event::Remove),
        1 => prop::collection::vec(any::<i16>(), 0..=MAX_KEYS).prop_map(Event::Replace),
        3 => (any::<usize>(), prop::option::of(any::<i16>())).prop_map(|(s, v)| Event::Flip(s, v)),
    ]
}

fn child(v: &Value) -> Result<Value, EvalError> {
    let x = v.as_number().ok_or_else(|| EvalError::Failed("not a number".into()))?;
    Ok(if x < 0.0 { Value::NoValue } else { Value::Number(x * 10.0) })
}

pub fn pick(bag: &IncrementalBag, sel: usize) -> Option<DeploymentKey> {
    let keys: Vec<_> = bag.keys().collect();
    (!keys.is_empty()).then(|| keys[sel % keys.len()])
}

fn expected(outputs: &BTreeMap<DeploymentKey, Value>, default: &Option<Value>) -> IncrementalBag {
    IncrementalBag::from_entries(outputs.iter().filter_map(|(k, o)| {
        let o = match (o, default) {
            (Value::NoValue, Some(d)) => d.clone(),
            _ => o.clone(),
        };
        o.is_materialized().then_some((*k, o))
    }))
    .unwrap()
}

pub fn numbers(xs: &[i16]) -> IncrementalBag {
    let mut bag = IncrementalBag::new();
    for x in xs {
        bag = bag.insert(Value::number(*x)).unwrap().0;
    }
    bag
}

pub fn run_engine(initial: &[i16], events: &[Event], default: Option<Value>) -> Result<(), TestCaseError> {
    let mut state = DeployStarState::new(default.clone());
    let mut children = FnChildren::new(child);
    let mut input = numbers(initial);
    let mut outputs: BTreeMap<DeploymentKey, Value> = BTreeMap::new();
    let mut mirror = IncrementalBag::new();

    let feed = |state: &mut DeployStarState,
                    children: &mut FnChildren<_>,
                    mirror: &mut IncrementalBag,
                    inp: DeployStarInput|
     -> Result<(), TestCaseError> {
        let before = state.pre_snapshot().clone();
        match state.on_input(&inp, children).map_err(|e| TestCaseError::fail(e.to_string()))? {
            DeployStarOutput::NewSnapshot(b) => *mirror = b,
            DeployStarOutput::OnePatch(p) => *mirror = mirror.apply(&p).map_err(|e| TestCaseError::fail(e.to_string()))?,
            DeployStarOutput::Nothing => prop_assert!(state.pre_snapshot().entries_equal(&before)),
        }
        Ok(())
    };

    feed(&mut state, &mut children, &mut mirror, DeployStarInput::Snapshot(input.clone()))?;
    for (k, v) in input.iter() {
        outputs.insert(k, child(v).unwrap());
    }
    prop_assert!(mirror.entries_equal(&expected(&outputs, &default)));

    for ev in events {
        match ev {
            Event::Insert(x) if input.len() < MAX_KEYS => {
                let (next, p) = input.insert(Value::number(*x)).unwrap();
                input = next;
                outputs.insert(p.key(), child(&Value::number(*x)).unwrap());
                feed(&mut state, &mut children, &mut mirror, DeployStarInput::Patch(p))?;
            }
            Event::Insert(_) => continue,
            Event::Update(s, x) => {
                let Some(k) = pick(&input, *s) else { continue };
                let (next, p) = input.update(k, Value::number(*x)).unwrap();
                input = next;
                outputs.insert(k, child(&Value::number(*x)).unwrap());
                feed(&mut state, &mut children, &mut mirror, DeployStarInput::Patch(p))?;
            }
            Event::Remove(s) => {
                let Some(k) = pick(&input, *s) else { continue };
                let (next, p) = input.remove(k).unwrap();
                input = next;
                outputs.remove(&k);
                feed(&mut state, &mut children, &mut mirror, DeployStarInput::Patch(p))?;
            }
            Event::Replace(xs) => {
                let base = input.next_key();
                input = IncrementalBag::from_entries(
                    xs.iter().enumerate().map(|(i, x)| (DeploymentKey(base + i as u64), Value::number(*x))),
                )
                .unwrap();
                outputs = input.iter().map(|(k, v)| (k, child(v).unwrap())).collect();
                feed(&mut state, &mut children, &mut mirror, DeployStarInput::Snapshot(input.clone()))?;
            }
            Event::Flip(s, o) => {
                let Some(k) = pick(&input, *s) else { continue };
                let o = o.map(Value::number).unwrap_or(Value::NoValue);
                outputs.insert(k, o.clone());
                let before = state.pre_snapshot().clone();
                match state.on_child_output(k, &o).map_err(|e| TestCaseError::fail(e.to_string()))? {
                    DeployStarOutput::OnePatch(p) => {
                        mirror = mirror.apply(&p).map_err(|e| TestCaseError::fail(e.to_string()))?
                    }
                    DeployStarOutput::Nothing => prop_assert!(state.pre_snapshot().entries_equal(&before)),
                    DeployStarOutput::NewSnapshot(_) => prop_assert!(false, "child output produced a snapshot"),
                }
            }
        }
        let want = expected(&outputs, &default);
        prop_assert!(state.pre_snapshot().entries_equal(&want), "after {ev:?}");
        prop_assert!(mirror.entries_equal(&want), "mirror after {ev:?}");
        prop_assert_eq!(state.live_count(), input.len());
        prop_assert_eq!(children.live.len(), input.len());
    }
    Ok(())
}


pub fn random_event(rng: &mut ChaCha8Rng) -> Event {
    match rng.gen_range(0..15) {
        0..=3 => Event::Insert(rng.gen()),
        4..=7 => Event::Update(rng.gen(), rng.gen()),
        8..=10 => Event::Remove(rng.gen()),
        11 => {
            let n = rng.gen_range(0..=MAX_KEYS);
            Event::Replace((0..n).map(|_| rng.gen()).collect())
        }
        _ => Event::Flip(rng.gen(), rng.gen_bool(0.5).then(|| rng.gen())),
    }
}

/// One randomized engine run; returns the number of events checked.
pub fn deploy_star_case(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial: Vec<i16> = (0..rng.gen_range(0..20)).map(|_| rng.gen()).collect();
    let events: Vec<Event> = (0..rng.gen_range(1..80)).map(|_| random_event(&mut rng)).collect();
    let default = rng.gen_bool(0.5).then(|| Value::number(-1));
    run_engine(&initial, &events, default).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(events.len())
}
pub const FLOCK: ProcessRef = ProcessRef { peer: PeerId(0), local: 99 };

pub struct OneFlock;

impl StreamDirectory for OneFlock {
    fn lookup(&self, _stream: &StreamRef) -> StreamLookup {
        StreamLookup::UnknownStream
    }

    fn flock(&self, name: &str) -> Option<ProcessRef> {
        (name == "F").then_some(FLOCK)
    }
}

pub fn counter(mode: CollectionMode) -> ReactorBehaviour {
    let positive = ReactorBehaviour::define("Positive", &["x"], |b| {
        let x = b.source("x");
        let zero = b.constant(0.0);
        let t = b.binary(ops::lt(), zero, x);
        let r = b.binary(ops::when(), t, x);
        b.out(r);
    })
    .unwrap();
    ReactorBehaviour::define("Count", &[], |b| {
        let c = b.flock_contents_with("F", mode);
        let kept = b.deploy_star_with(&positive, c, DeployStarOptions { default: None, mode });
        let n = b.size(kept);
        b.out(n);
    })
    .unwrap()
}

pub fn positives(bag: &IncrementalBag) -> f64 {
    bag.values().filter(|v| v.as_number().is_some_and(|x| x > 0.0)).count() as f64
}

pub const MAX_NODES: usize = 20;

#[derive(Debug, Clone)]
pub enum NodeSpec {
    Source(usize),
    Const(f64),
    Add(usize, usize),
    Sub(usize, usize),
    Deploy(Box<Spec>, Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Spec {
    sources: usize,
    nodes: Vec<NodeSpec>,
    outs: Vec<usize>,
}

pub fn generate(rng: &mut ChaCha8Rng, depth: usize, sources: usize, budget: usize) -> Spec {
    let mut nodes: Vec<NodeSpec> = (0..sources).map(NodeSpec::Source).collect();
    let total = rng.gen_range(sources + 1..=budget);
    while nodes.len() < total {
        let pick = |rng: &mut ChaCha8Rng, n: usize| rng.gen_range(0..n);
        let n = nodes.len();
        let roll = rng.gen_range(0..100);
        let node = if depth < 2 && roll < 20 {
            let k = rng.gen_range(1..=2);
            let child = generate(rng, depth + 1, k, 8);
            NodeSpec::Deploy(Box::new(child), (0..k).map(|_| pick(rng, n)).collect())
        } else if roll < 30 {
            NodeSpec::Const(rng.gen_range(-5..=5) as f64)
        } else if roll < 65 {
            NodeSpec::Add(pick(rng, n), pick(rng, n))
        } else {
            NodeSpec::Sub(pick(rng, n), pick(rng, n))
        };
        nodes.push(node);
    }
    let last = nodes.len() - 1;
    let outs = if depth == 0 && last > 0 { vec![last - 1, last] } else { vec![last] };
    Spec { sources, nodes, outs }
}

pub fn evaluate(spec: &Spec, inputs: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let v = match node {
            NodeSpec::Source(i) => inputs[*i],
            NodeSpec::Const(c) => *c,
            NodeSpec::Add(a, b) => vals[*a] + vals[*b],
            NodeSpec::Sub(a, b) => vals[*a] - vals[*b],
            NodeSpec::Deploy(child, args) => {
                let xs: Vec<f64> = args.iter().map(|a| vals[*a]).collect();
                evaluate(child, &xs)[0]
            }
        };
        vals.push(v);
    }
    spec.outs.iter().map(|o| vals[*o]).collect()
}

pub fn build(spec: &Spec, name: &str) -> ReactorBehaviour {
    let children: BTreeMap<usize, ReactorBehaviour> = spec
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n {
            NodeSpec::Deploy(child, _) => Some((i, build(child, &format!("{name}.{i}")))),
            _ => None,
        })
        .collect();
    let names: Vec<String> = (0..spec.sources).map(|i| format!("s{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ReactorBehaviour::define(name, &refs, |b| {
        let mut h: Vec<NodeHandle> = Vec::new();
        for (i, node) in spec.nodes.iter().enumerate() {
            let handle = match node {
                NodeSpec::Source(s) => b.source(&names[*s]),
                NodeSpec::Const(c) => b.constant(*c),
                NodeSpec::Add(x, y) => b.binary(ops::add(), h[*x], h[*y]),
                NodeSpec::Sub(x, y) => b.binary(ops::sub(), h[*x], h[*y]),
                NodeSpec::Deploy(_, args) => {
                    let a: Vec<NodeHandle> = args.iter().map(|x| h[*x]).collect();
                    b.deploy(&children[&i], &a)
                }
            };
            h.push(handle);
        }
        for o in &spec.outs {
            b.out(h[*o]);
        }
    })
    .expect("generated behaviour")
}

/// Runs a random nested DAG for a dozen turns under priority lists, checking
/// single execution per node per turn and values against `evaluate`.
pub fn glitch_case(case: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let sources = rng.gen_range(1..=3);
    let spec = generate(&mut rng, 0, sources, MAX_NODES);
    let behaviour = build(&spec, "Root");
    let (mut r, _) = Reactor::spawn_with(&behaviour, &NoStreams, PriorityScheme::Hierarchical, true).map_err(|e| e.to_string())?;
    let mut inputs: Vec<f64> = (0..sources).map(|_| rng.gen_range(-10..=10) as f64).collect();
    for turn in 0..12 {
        if turn > 0 {
            for x in inputs.iter_mut() {
                if rng.gen_bool(0.6) {
                    *x = rng.gen_range(-10..=10) as f64;
                }
            }
        }
        let args: Vec<Value> = inputs.iter().map(|x| Value::number(*x)).collect();
        let out = r.react(&args, &NoStreams).map_err(|e| e.to_string())?;
        if let Some((node, n)) = max_runs(&out.trace) {
            if n > 1 {
                return Err(format!("case {case} turn {turn}: node {node:?} ran {n} times"));
            }
        }
        let want: Vec<Value> = evaluate(&spec, &inputs).into_iter().map(Value::Number).collect();
        if r.sink_values() != want {
            return Err(format!("case {case} turn {turn}: got {:?}, want {want:?}", r.sink_values()));
        }
    }
    Ok(())
}

pub fn max_runs(trace: &[TraceRecord]) -> Option<((u64, u64), usize)> {
    let mut runs: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for t in trace.iter().filter(|t| t.executed) {
        *runs.entry((t.deployment, t.node)).or_default() += 1;
    }
    runs.into_iter().max_by_key(|(_, n)| *n)
}

fn watch(sim: &mut NetSim, p: PeerId) {
    let rec = sim.spawn_actor(p, &recorder_behaviour(), "start", &[]).unwrap();
    let f = sim.flock(p, BIKES).unwrap();
    sim.monitor(rec, StreamRef::new(f, "contents"), "log!");
}

fn location(rng: &mut ChaCha8Rng) -> Value {
    Value::lnglat(4.35 + rng.gen_range(-0.01..0.01), 50.85 + rng.gen_range(-0.01..0.01))
}

/// Runs one random script and returns the simulator after quiescence.
pub fn scenario(seed: u64) -> NetSim {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: u32 = rng.gen_range(3..=10);
    let mut sim = NetSim::new(SimConfig { seed, latency: rng.gen_range(1..=3), ..SimConfig::default() });
    let mut alive: Vec<PeerId> = Vec::new();
    let mut bikes: Vec<ProcessRef> = Vec::new();
    for i in 0..n {
        let p = PeerId(i);
        sim.join(p, &[BIKES]).unwrap();
        watch(&mut sim, p);
        alive.push(p);
    }
    for (i, mode) in [CollectionMode::Incremental, CollectionMode::Bag].into_iter().enumerate() {
        let m = sim.spawn_reactor(PeerId(i as u32), &counting_marker(mode)).unwrap();
        let args = vec![Value::text(&format!("m{i}")), Value::lnglat(4.35, 50.85), Value::number(800)];
        sim.react_to(m, ReactInput::Positional(args));
    }
    let mut departed: Vec<PeerId> = Vec::new();
    for _ in 0..rng.gen_range(20..60) {
        match rng.gen_range(0..100) {
            0..=39 => {
                let p = *alive.choose(&mut rng).unwrap();
                let loc = location(&mut rng);
                let b = sim.spawn_actor(p, &bike_behaviour(), "init", &[loc]).unwrap();
                sim.publish(BIKES, b).unwrap();
                if rng.gen_bool(0.2) {
                    sim.publish(BIKES, b).unwrap();
                }
                bikes.push(b);
            }
            40..=54 if !bikes.is_empty() => {
                let b = bikes.swap_remove(rng.gen_range(0..bikes.len()));
                let _ = sim.unpublish(BIKES, b);
            }
            55..=64 if !bikes.is_empty() => {
                let b = *bikes.choose(&mut rng).unwrap();
                let loc = location(&mut rng);
                sim.send(b, "update-location!", vec![loc]);
            }
            65..=71 if alive.len() > 2 => {
                let p = alive.swap_remove(rng.gen_range(1..alive.len()));
                sim.leave(p).unwrap();
                bikes.retain(|b| b.peer != p);
                departed.push(p);
            }
            72..=78 if !departed.is_empty() => {
                let p = departed.swap_remove(0);
                sim.join(p, &[BIKES]).unwrap();
                watch(&mut sim, p);
                alive.push(p);
            }
            79..=86 => {
                let mut all = alive.clone();
                all.shuffle(&mut rng);
                let cut = rng.gen_range(1..all.len());
                sim.partition(&all[..cut], &all[cut..]);
            }
            87..=94 => sim.heal(),
            _ => {}
        }
        let pause = rng.gen_range(1..40);
        sim.run_for(pause);
    }
    if rng.gen_bool(0.7) {
        sim.heal();
    }
    sim.settle();
    sim.settle();
    sim
}

pub fn members(bag: &IncrementalBag) -> Members {
    let mut m = Members::new();
    for v in bag.values() {
        *m.entry(v.as_actor().expect("actor member")).or_default() += 1;
    }
    m
}

/// Checks one scenario after quiescence; returns the number of patches delivered.
pub fn convergence_case(seed: u64) -> Result<usize, String> {
    let sim = scenario(seed);
    for p in sim.alive_peers() {
        let contents = sim.contents(p, BIKES).ok_or(format!("seed {seed}: no flock on {p}"))?;
        if contents != sim.ground_truth(p, BIKES) {
            return Err(format!("seed {seed}: peer {p} disagrees with ground truth"));
        }
    }
    let mut patches = 0;
    let mut mirrors: BTreeMap<(ProcessRef, ProcessRef, String), IncrementalBag> = BTreeMap::new();
    for d in sim.contents_log() {
        let key = (d.flock, d.subscriber.process, format!("{:?}", d.subscriber.tag));
        match (&d.payload, mirrors.get_mut(&key)) {
            (Payload::Snapshot(b), _) => {
                mirrors.insert(key, b.clone());
            }
            (Payload::Patch(p), Some(m)) => {
                patches += 1;
                *m = m.apply(p).map_err(|e| format!("seed {seed}: {e} at tick {}", d.tick))?;
            }
            (Payload::Patch(_), None) => return Err(format!("seed {seed}: patch before snapshot for {key:?}")),
            _ => {}
        }
    }
    for ((flock, _, _), bag) in &mirrors {
        if sim.is_alive(flock.peer) && sim.flock(flock.peer, BIKES) == Some(*flock) && Some(members(bag)) != sim.contents(flock.peer, BIKES) {
            return Err(format!("seed {seed}: subscriber mirror of {flock} is stale"));
        }
    }
    Ok(patches)
}

pub fn deliveries(s: &NetSim) -> Vec<(u64, ProcessRef, ProcessRef, String)> {
    s.contents_log().iter().map(|d| (d.tick, d.flock, d.subscriber.process, d.payload.to_json().to_string())).collect()
}
