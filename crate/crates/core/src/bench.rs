//! Application-level and topology-level benchmarks over a single
//! CountingMarker reactor, comparing whole-bag and patch propagation.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bag::{DeploymentKey, IncrementalBag, Patch};
use crate::behaviour::CollectionMode;
use crate::geo::{counting_marker, EARTH_RADIUS_KM};
use crate::reactor::{Reactor, Stimulus, TurnError, TurnStats};
use crate::stream::{NodeTag, Payload, StreamDirectory, StreamLookup};
use crate::value::{PeerId, ProcessRef, StreamRef, Value};

pub const Z99: f64 = 2.576;
pub const RADIUS_M: f64 = 750.0;
const CENTRE: (f64, f64) = (4.3525, 50.8467);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    Bag,
    IncBag,
}

impl Impl {
    pub fn mode(self) -> CollectionMode {
        match self {
            Impl::Bag => CollectionMode::Bag,
            Impl::IncBag => CollectionMode::Incremental,
        }
    }
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Impl::Bag => "bag",
            Impl::IncBag => "incbag",
        })
    }
}

impl FromStr for Impl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bag" => Ok(Impl::Bag),
            "incbag" => Ok(Impl::IncBag),
            _ => Err(format!("unknown impl {s:?}, expected bag or incbag")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopoMode {
    Add,
    Remove,
}

impl FromStr for TopoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "add" => Ok(TopoMode::Add),
            "remove" => Ok(TopoMode::Remove),
            _ => Err(format!("unknown mode {s:?}, expected add or remove")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub imp: Impl,
    pub n: usize,
    /// Location updates (app level) or repetitions (topology level).
    pub updates: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(imp: Impl, n: usize) -> Self {
        BenchConfig { imp, n, updates: 1000, warmup: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("n must be at least 1")]
    Empty,
    #[error("warmup {warmup} leaves no samples out of {total}")]
    Warmup { warmup: usize, total: usize },
    #[error(transparent)]
    Turn(#[from] TurnError),
}

#[derive(Debug, Clone, Default)]
pub struct Sample {
    pub micros: f64,
    pub stats: TurnStats,
}

/// One CSV row plus the deterministic work counters behind it.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub n: usize,
    pub imp: Impl,
    pub mean_us: f64,
    pub ci99_low: f64,
    pub ci99_high: f64,
    pub samples: usize,
    pub mean_executions: f64,
    pub mean_visits: f64,
    pub mean_elements_deployed: f64,
    pub mean_elements_torn_down: f64,
    pub max_per_node: u32,
}

pub const CSV_HEADER: &str =
    "n,impl,mean_us,ci99_low,ci99_high,samples,mean_node_executions,mean_element_visits,mean_elements_deployed,mean_elements_torn_down";

impl BenchReport {
    fn from_samples(n: usize, imp: Impl, samples: &[Sample]) -> Self {
        let k = samples.len() as f64;
        let mean = samples.iter().map(|s| s.micros).sum::<f64>() / k;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s.micros - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let half = Z99 * (var / k).sqrt();
        let avg = |f: fn(&TurnStats) -> u64| samples.iter().map(|s| f(&s.stats) as f64).sum::<f64>() / k;
        BenchReport {
            n,
            imp,
            mean_us: mean,
            ci99_low: mean - half,
            ci99_high: mean + half,
            samples: samples.len(),
            mean_executions: avg(|s| s.node_executions),
            mean_visits: avg(|s| s.element_visits),
            mean_elements_deployed: avg(|s| s.elements_deployed),
            mean_elements_torn_down: avg(|s| s.elements_torn_down),
            max_per_node: samples.iter().map(|s| s.stats.max_executions_per_node).max().unwrap_or(0),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{},{},{},{},{}",
            self.n,
            self.imp,
            self.mean_us,
            self.ci99_low,
            self.ci99_high,
            self.samples,
            self.mean_executions,
            self.mean_visits,
            self.mean_elements_deployed,
            self.mean_elements_torn_down
        )
    }

    pub fn work(&self) -> f64 {
        self.mean_executions + self.mean_visits
    }
}

pub fn write_csv<'a>(out: &mut impl Write, rows: impl IntoIterator<Item = &'a BenchReport>) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Retained bike locations plus the `Bikes` flock, as a reactor sees them.
struct World {
    streams: HashMap<StreamRef, Value>,
    flock: ProcessRef,
}

impl StreamDirectory for World {
    fn lookup(&self, stream: &StreamRef) -> StreamLookup {
        match self.streams.get(stream) {
            Some(v) => StreamLookup::Local(Some(v.clone())),
            None => StreamLookup::UnknownStream,
        }
    }

    fn flock(&self, name: &str) -> Option<ProcessRef> {
        (name == crate::geo::BIKES).then_some(self.flock)
    }
}

fn north_of_centre(metres: f64) -> Value {
    Value::lnglat(CENTRE.0, CENTRE.1 + metres / 1000.0 / EARTH_RADIUS_KM * 180.0 / std::f64::consts::PI)
}

fn bike(i: usize) -> ProcessRef {
    ProcessRef { peer: PeerId(0), local: i as u32 + 1 }
}

struct Fixture {
    imp: Impl,
    reactor: Reactor,
    world: World,
    flock_tag: NodeTag,
    bag: IncrementalBag,
    keys: Vec<DeploymentKey>,
    tags: HashMap<ProcessRef, NodeTag>,
    rng: ChaCha8Rng,
}

impl Fixture {
    /// A marker over the first `published` of `total` bikes; even bikes start inside.
    fn new(imp: Impl, total: usize, published: usize, seed: u64) -> Result<Self, BenchError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flock = ProcessRef { peer: PeerId(0), local: 0 };
        let mut streams = HashMap::new();
        for i in 0..total {
            let m = if i % 2 == 0 { rng.gen_range(0.0..600.0) } else { rng.gen_range(900.0..1500.0) };
            streams.insert(StreamRef::new(bike(i), "location"), north_of_centre(m));
        }
        let world = World { streams, flock };
        let (mut reactor, _) = Reactor::spawn_with(
            &counting_marker(imp.mode()),
            &world,
            crate::reactor::PriorityScheme::Hierarchical,
            false,
        )?;
        let centre = Value::lnglat(CENTRE.0, CENTRE.1);
        reactor.react(&[Value::text("marker"), centre, Value::number(RADIUS_M)], &world)?;
        let flock_tag = reactor
            .subscriptions()
            .into_iter()
            .find(|(s, _)| s.owner == flock)
            .map(|(_, t)| t)
            .expect("marker subscribes to its flock");
        let mut bag = IncrementalBag::new();
        let mut keys = Vec::new();
        for i in 0..published {
            let (next, p) = bag.insert(Value::Actor(bike(i))).expect("materialized");
            bag = next;
            keys.push(p.key());
        }
        reactor.handle(Stimulus::Stream { tag: flock_tag, payload: Payload::Snapshot(bag.clone()) }, &world)?;
        let mut f = Fixture { imp, reactor, world, flock_tag, bag, keys, tags: HashMap::new(), rng };
        f.refresh_tags();
        Ok(f)
    }

    fn refresh_tags(&mut self) {
        self.tags = self
            .reactor
            .subscriptions()
            .into_iter()
            .filter(|(s, _)| s.name.as_ref() == "location")
            .map(|(s, t)| (s.owner, t))
            .collect();
    }

    /// Moves bike `i` across the radius boundary.
    fn move_bike(&mut self, i: usize) -> Stimulus {
        let s = StreamRef::new(bike(i), "location");
        let inside = crate::geo::lnglat(&self.world.streams[&s])
            .is_some_and(|p| crate::geo::within_radius(CENTRE, p, RADIUS_M));
        let m = if inside { self.rng.gen_range(900.0..1500.0) } else { self.rng.gen_range(0.0..600.0) };
        let v = north_of_centre(m);
        self.world.streams.insert(s, v.clone());
        Stimulus::Stream { tag: self.tags[&bike(i)], payload: Payload::Value(v) }
    }

    fn collection_change(&self, patch: Patch, bag: IncrementalBag) -> Stimulus {
        let payload = match self.imp {
            Impl::IncBag => Payload::Patch(patch),
            Impl::Bag => Payload::Snapshot(bag),
        };
        Stimulus::Stream { tag: self.flock_tag, payload }
    }
}

fn timed(reactor: &mut Reactor, stimulus: Stimulus, world: &World) -> Result<Sample, BenchError> {
    let start = Instant::now();
    let out = reactor.handle(stimulus, world)?;
    let micros = start.elapsed().as_secs_f64() * 1e6;
    Ok(Sample { micros, stats: out.stats })
}

fn check(cfg: &BenchConfig) -> Result<(), BenchError> {
    if cfg.n == 0 {
        return Err(BenchError::Empty);
    }
    if cfg.warmup >= cfg.updates {
        return Err(BenchError::Warmup { warmup: cfg.warmup, total: cfg.updates });
    }
    Ok(())
}

/// Time for the marker to process one location update, spread round-robin over the bikes.
pub fn app_level(cfg: &BenchConfig) -> Result<(BenchReport, Vec<Sample>), BenchError> {
    check(cfg)?;
    let mut f = Fixture::new(cfg.imp, cfg.n, cfg.n, cfg.seed)?;
    let mut samples = Vec::with_capacity(cfg.updates);
    for j in 0..cfg.updates {
        let stimulus = f.move_bike(j % cfg.n);
        let s = timed(&mut f.reactor, stimulus, &f.world)?;
        if s.stats.deployments_created > 0 {
            f.refresh_tags();
        }
        samples.push(s);
    }
    let kept = samples.split_off(cfg.warmup);
    Ok((BenchReport::from_samples(cfg.n, cfg.imp, &kept), kept))
}

/// Time to add or remove the n-th bike. The marker is restored to its
/// prepared state before every repetition.
pub fn topo_level(cfg: &BenchConfig, mode: TopoMode) -> Result<(BenchReport, Vec<Sample>), BenchError> {
    check(cfg)?;
    let published = match mode {
        TopoMode::Add => cfg.n - 1,
        TopoMode::Remove => cfg.n,
    };
    let f = Fixture::new(cfg.imp, cfg.n, published, cfg.seed)?;
    let (bag, patch) = match mode {
        TopoMode::Add => f.bag.insert(Value::Actor(bike(cfg.n - 1))).expect("materialized"),
        TopoMode::Remove => f.bag.remove(*f.keys.last().expect("n >= 1")).expect("present"),
    };
    let stimulus = f.collection_change(patch, bag);
    let mut samples = Vec::with_capacity(cfg.updates);
    for _ in 0..cfg.updates {
        let mut r = f.reactor.clone();
        samples.push(timed(&mut r, stimulus.clone(), &f.world)?);
    }
    let kept = samples.split_off(cfg.warmup);
    Ok((BenchReport::from_samples(cfg.n, cfg.imp, &kept), kept))
}
