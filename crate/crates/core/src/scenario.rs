//! Scripted scenarios: bike-counting scripts and Villo station replays,
//! driven through the simulator and checked against a brute-force recount.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::bike_behaviour;
use crate::behaviour::CollectionMode;
use crate::geo::{counting_marker, lnglat, within_radius, BIKES};
use crate::net::{NetSim, SimConfig, SimError};
use crate::reactor::ReactInput;
use crate::value::{PeerId, ProcessRef, StreamRef, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LngLat {
    pub lng: f64,
    pub lat: f64,
}

impl From<LngLat> for Value {
    fn from(p: LngLat) -> Value {
        Value::lnglat(p.lng, p.lat)
    }
}

fn default_flocks() -> Vec<String> {
    vec![BIKES.to_string()]
}

fn default_flock() -> String {
    BIKES.to_string()
}

fn default_stream() -> String {
    "location".to_string()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    Join {
        peer: u32,
        #[serde(default = "default_flocks")]
        flocks: Vec<String>,
    },
    Leave {
        peer: u32,
    },
    Partition {
        a: Vec<u32>,
        b: Vec<u32>,
    },
    Heal,
    /// Publishes the named bike, spawning it on `peer` at `location` first if needed.
    Publish {
        name: String,
        peer: Option<u32>,
        location: Option<LngLat>,
        #[serde(default = "default_flock")]
        flock: String,
    },
    Unpublish {
        name: String,
        #[serde(default = "default_flock")]
        flock: String,
    },
    Emit {
        name: String,
        #[serde(default = "default_stream")]
        stream: String,
        value: serde_json::Value,
    },
    /// Spawns a CountingMarker on `peer`.
    Marker {
        peer: u32,
        id: String,
        location: LngLat,
        radius: f64,
    },
    /// New location and/or radius for a marker.
    ReactTo {
        marker: String,
        location: Option<LngLat>,
        radius: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Event {
    pub tick: u64,
    #[serde(flatten)]
    pub op: Op,
}

/// Bikes taken (negative) or returned (positive) at a station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationEvent {
    pub tick: u64,
    pub station_id: String,
    pub delta: i64,
    pub location: LngLat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kind {
    #[default]
    Whereabikes,
    Villo,
}

impl std::str::FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "whereabikes" => Ok(Kind::Whereabikes),
            "villo" => Ok(Kind::Villo),
            _ => Err(format!("unknown scenario kind {s:?}, expected whereabikes or villo")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: tick {tick} is before tick {previous}")]
    Order { line: usize, tick: u64, previous: u64 },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: {source}")]
    Sim { line: usize, source: SimError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parses JSON lines, skipping blank lines and `#` comments.
fn parse_lines<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<(usize, T)>, ScenarioError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v = serde_json::from_str(t).map_err(|source| ScenarioError::Parse { line: i + 1, source })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn parse_script(input: impl BufRead) -> Result<Vec<(usize, Event)>, ScenarioError> {
    parse_lines(input)
}

pub fn parse_station_events(input: impl BufRead) -> Result<Vec<(usize, StationEvent)>, ScenarioError> {
    parse_lines(input)
}

/// Converts script JSON into a value: objects with `lng`/`lat` become
/// coordinates and arrays become tuples.
pub fn json_value(v: &serde_json::Value) -> Option<Value> {
    use serde_json::Value as J;
    Some(match v {
        J::Null => Value::NoValue,
        J::Bool(b) => Value::Boolean(*b),
        J::Number(n) => Value::Number(n.as_f64()?),
        J::String(s) => Value::text(s),
        J::Array(xs) => Value::tuple(xs.iter().map(json_value).collect::<Option<Vec<_>>>()?),
        J::Object(m) => {
            let p: LngLat = serde_json::from_value(J::Object(m.clone())).ok()?;
            p.into()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRecord {
    pub tick: u64,
    pub marker_id: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub tick: u64,
    pub marker_id: String,
    pub emitted: Option<u64>,
    pub expected: u64,
}

#[derive(Debug, Default)]
pub struct ScenarioReport {
    pub records: Vec<CountRecord>,
    /// Emissions compared with the recount.
    pub checked: usize,
    /// Emissions inside a settling window after a topology change, not compared.
    pub transient: usize,
    pub mismatches: Vec<Mismatch>,
    pub net_log: Vec<serde_json::Value>,
    pub propagation_trace: Vec<serde_json::Value>,
}

impl ScenarioReport {
    pub fn write_counts(&self, out: &mut impl Write) -> io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).map_err(io::Error::other)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub sim: SimConfig,
    pub mode: CollectionMode,
    pub trace_net: bool,
    pub trace_propagation: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { sim: SimConfig::default(), mode: CollectionMode::Incremental, trace_net: false, trace_propagation: false }
    }
}

impl RunOptions {
    pub fn seeded(seed: u64) -> Self {
        RunOptions { sim: SimConfig { seed, ..SimConfig::default() }, ..RunOptions::default() }
    }
}

struct MarkerInfo {
    reactor: ProcessRef,
    location: LngLat,
    radius: f64,
}

pub struct Runner {
    sim: NetSim,
    mode: CollectionMode,
    bikes: BTreeMap<String, ProcessRef>,
    markers: BTreeMap<String, MarkerInfo>,
    seen: usize,
    tick: u64,
    quiet_from: u64,
    report: ScenarioReport,
    trace_net: bool,
}

impl Runner {
    pub fn new(opts: RunOptions) -> Self {
        let mut sim = NetSim::new(opts.sim);
        sim.set_trace_propagation(opts.trace_propagation);
        Runner {
            sim,
            mode: opts.mode,
            bikes: BTreeMap::new(),
            markers: BTreeMap::new(),
            seen: 0,
            tick: 0,
            quiet_from: 0,
            report: ScenarioReport::default(),
            trace_net: opts.trace_net,
        }
    }

    pub fn sim(&self) -> &NetSim {
        &self.sim
    }

    pub fn bike(&self, name: &str) -> Option<ProcessRef> {
        self.bikes.get(name).copied()
    }

    /// Counts, by brute force, the reachable bikes inside a marker's radius.
    pub fn expected(&self, marker: &str) -> Option<u64> {
        let m = self.markers.get(marker)?;
        let centre = (m.location.lng, m.location.lat);
        let mut n = 0;
        for (bike, mult) in self.sim.ground_truth(m.reactor.peer, BIKES) {
            let loc = self.sim.retained(&StreamRef::new(bike, "location"));
            if loc.as_ref().and_then(lnglat).is_some_and(|p| within_radius(centre, p, m.radius)) {
                n += mult as u64;
            }
        }
        Some(n)
    }

    /// The marker's current output count, if it has one.
    pub fn current(&self, marker: &str) -> Option<u64> {
        let m = self.markers.get(marker)?;
        count_of(&self.sim.reactor(m.reactor)?.output()?).map(|(_, c)| c)
    }

    fn settle_window(&mut self) {
        self.quiet_from = self.quiet_from.max(self.tick + self.sim.settle_ticks());
    }

    fn invalid(line: usize, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid { line, message: message.into() }
    }

    pub fn apply(&mut self, line: usize, ev: &Event) -> Result<(), ScenarioError> {
        if ev.tick < self.tick {
            return Err(ScenarioError::Order { line, tick: ev.tick, previous: self.tick });
        }
        self.advance_to(ev.tick);
        let sim_err = |source| ScenarioError::Sim { line, source };
        match &ev.op {
            Op::Join { peer, flocks } => {
                let fs: Vec<&str> = flocks.iter().map(String::as_str).collect();
                self.sim.join(PeerId(*peer), &fs).map_err(sim_err)?;
                self.settle_window();
            }
            Op::Leave { peer } => {
                self.sim.leave(PeerId(*peer)).map_err(sim_err)?;
                self.bikes.retain(|_, b| b.peer != PeerId(*peer));
                self.markers.retain(|_, m| m.reactor.peer != PeerId(*peer));
                self.settle_window();
            }
            Op::Partition { a, b } => {
                let a: Vec<PeerId> = a.iter().map(|p| PeerId(*p)).collect();
                let b: Vec<PeerId> = b.iter().map(|p| PeerId(*p)).collect();
                self.sim.partition(&a, &b);
                self.settle_window();
            }
            Op::Heal => {
                self.sim.heal();
                self.settle_window();
            }
            Op::Publish { name, peer, location, flock } => {
                let bike = match self.bikes.get(name) {
                    Some(b) => *b,
                    None => {
                        let (Some(peer), Some(loc)) = (peer, location) else {
                            return Err(Self::invalid(line, format!("bike {name:?} needs a peer and a location")));
                        };
                        let b = self
                            .sim
                            .spawn_actor(PeerId(*peer), &bike_behaviour(), "init", &[(*loc).into()])
                            .map_err(sim_err)?;
                        self.bikes.insert(name.clone(), b);
                        b
                    }
                };
                self.sim.publish(flock, bike).map_err(sim_err)?;
            }
            Op::Unpublish { name, flock } => {
                let bike = *self.bikes.get(name).ok_or_else(|| Self::invalid(line, format!("unknown bike {name:?}")))?;
                self.sim.unpublish(flock, bike).map_err(sim_err)?;
            }
            Op::Emit { name, stream, value } => {
                let bike = *self.bikes.get(name).ok_or_else(|| Self::invalid(line, format!("unknown bike {name:?}")))?;
                let v = json_value(value).ok_or_else(|| Self::invalid(line, "value is not representable"))?;
                self.sim.emit_as(bike, stream, v).map_err(sim_err)?;
            }
            Op::Marker { peer, id, location, radius } => {
                if self.markers.contains_key(id) {
                    return Err(Self::invalid(line, format!("marker {id:?} already exists")));
                }
                let r = self.sim.spawn_reactor(PeerId(*peer), &counting_marker(self.mode)).map_err(sim_err)?;
                let input = vec![Value::text(id), (*location).into(), Value::number(*radius)];
                self.sim.react_to(r, ReactInput::Positional(input));
                self.markers.insert(id.clone(), MarkerInfo { reactor: r, location: *location, radius: *radius });
                self.settle_window();
            }
            Op::ReactTo { marker, location, radius } => {
                let m = self.markers.get_mut(marker).ok_or_else(|| Self::invalid(line, format!("unknown marker {marker:?}")))?;
                if let Some(l) = location {
                    m.location = *l;
                }
                if let Some(r) = radius {
                    m.radius = *r;
                }
                let input = vec![Value::text(marker), m.location.into(), Value::number(m.radius)];
                let r = m.reactor;
                self.sim.react_to(r, ReactInput::Positional(input));
            }
        }
        Ok(())
    }

    /// Runs every tick before `tick`, checking emissions as each one ends.
    fn advance_to(&mut self, tick: u64) {
        while self.tick < tick {
            self.end_tick();
            self.tick += 1;
        }
    }

    fn end_tick(&mut self) {
        self.sim.run_until(self.tick);
        let fresh: Vec<(ProcessRef, Value)> =
            self.sim.emissions()[self.seen..].iter().map(|e| (e.reactor, e.value.clone())).collect();
        self.seen = self.sim.emissions().len();
        let mut last: BTreeMap<String, u64> = BTreeMap::new();
        for (_, v) in fresh {
            let Some((id, count)) = count_of(&v) else { continue };
            self.report.records.push(CountRecord { tick: self.tick, marker_id: id.clone(), count });
            last.insert(id, count);
        }
        for (id, count) in last {
            if self.tick < self.quiet_from {
                self.report.transient += 1;
                continue;
            }
            let Some(expected) = self.expected(&id) else { continue };
            self.report.checked += 1;
            if expected != count {
                self.report.mismatches.push(Mismatch { tick: self.tick, marker_id: id, emitted: Some(count), expected });
            }
        }
    }

    /// Lets the network settle, compares every marker once more and returns the report.
    pub fn finish(mut self) -> ScenarioReport {
        let end = self.tick + self.sim.settle_ticks();
        self.advance_to(end + 1);
        let ids: Vec<String> = self.markers.keys().cloned().collect();
        for id in ids {
            let expected = self.expected(&id).unwrap_or(0);
            let emitted = self.current(&id);
            self.report.checked += 1;
            if emitted != Some(expected) {
                self.report.mismatches.push(Mismatch { tick: self.tick, marker_id: id, emitted, expected });
            }
        }
        if self.trace_net {
            self.report.net_log = self.sim.log().iter().map(|r| r.to_json()).collect();
        }
        self.report.propagation_trace = self.sim.propagation_trace().iter().map(|r| r.to_json()).collect();
        self.report
    }
}

fn count_of(v: &Value) -> Option<(String, u64)> {
    let Value::Tuple(xs) = v else { return None };
    let [Value::Text(id), Value::Number(n)] = xs.as_ref() else { return None };
    Some((id.to_string(), *n as u64))
}

pub fn run_script(events: &[(usize, Event)], opts: RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let mut r = Runner::new(opts);
    for (line, ev) in events {
        r.apply(*line, ev)?;
    }
    Ok(r.finish())
}

#[derive(Debug, Clone)]
pub struct VilloConfig {
    /// Peers hosting stations, numbered from 1; markers live on peer 0.
    pub station_peers: u32,
    /// `(id, location, radius)`; empty means markers derived from the stations.
    pub markers: Vec<(String, LngLat, f64)>,
}

impl Default for VilloConfig {
    fn default() -> Self {
        VilloConfig { station_peers: 10, markers: Vec::new() }
    }
}

const BRUSSELS: LngLat = LngLat { lng: 4.3517, lat: 50.8503 };

fn default_markers(events: &[(usize, StationEvent)]) -> Vec<(String, LngLat, f64)> {
    let mut stations: Vec<&StationEvent> = Vec::new();
    for (_, e) in events {
        if !stations.iter().any(|s| s.station_id == e.station_id) {
            stations.push(e);
        }
    }
    let mut out = vec![("centre".to_string(), BRUSSELS, 1500.0)];
    for (s, r) in stations.iter().zip([750.0, 1000.0]) {
        out.push((format!("near-{}", s.station_id), s.location, r));
    }
    out
}

/// Replays station events: returned bikes are published at the station's
/// location, taken bikes unpublished, and markers count what is nearby.
pub fn run_villo(
    events: &[(usize, StationEvent)],
    cfg: &VilloConfig,
    opts: RunOptions,
) -> Result<ScenarioReport, ScenarioError> {
    let mut r = Runner::new(opts);
    let peers = cfg.station_peers.max(1);
    let join = |peer| Event { tick: 0, op: Op::Join { peer, flocks: default_flocks() } };
    for p in 0..=peers {
        r.apply(0, &join(p))?;
    }
    let markers = if cfg.markers.is_empty() { default_markers(events) } else { cfg.markers.clone() };
    for (id, location, radius) in markers {
        r.apply(0, &Event { tick: 0, op: Op::Marker { peer: 0, id, location, radius } })?;
    }
    struct Station {
        peer: u32,
        docked: Vec<String>,
        idle: Vec<String>,
        spawned: usize,
    }
    let mut stations: BTreeMap<String, Station> = BTreeMap::new();
    for (line, e) in events {
        let count = stations.len() as u32;
        let st = stations.entry(e.station_id.clone()).or_insert_with(|| Station {
            peer: 1 + count % peers,
            docked: Vec::new(),
            idle: Vec::new(),
            spawned: 0,
        });
        if e.delta < 0 && st.docked.len() < e.delta.unsigned_abs() as usize {
            return Err(ScenarioError::Invalid {
                line: *line,
                message: format!("station {} has {} bikes, cannot take {}", e.station_id, st.docked.len(), -e.delta),
            });
        }
        for _ in 0..e.delta.unsigned_abs() {
            let op = if e.delta > 0 {
                let name = st.idle.pop().unwrap_or_else(|| {
                    st.spawned += 1;
                    format!("{}/{}", e.station_id, st.spawned)
                });
                st.docked.push(name.clone());
                Op::Publish { name, peer: Some(st.peer), location: Some(e.location), flock: default_flock() }
            } else {
                let name = st.docked.pop().expect("checked above");
                st.idle.push(name.clone());
                Op::Unpublish { name, flock: default_flock() }
            };
            r.apply(*line, &Event { tick: e.tick, op })?;
        }
    }
    Ok(r.finish())
}

/// Synthetic station log: every station is stocked first, then bikes are
/// taken and returned at random, `gap` ticks apart, never going negative.
pub fn synthetic_villo(stations: usize, events: usize, seed: u64, start: u64, gap: u64) -> Vec<StationEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(String, LngLat)> = (0..stations)
        .map(|i| {
            let loc = LngLat {
                lng: BRUSSELS.lng + rng.gen_range(-0.03..0.03),
                lat: BRUSSELS.lat + rng.gen_range(-0.02..0.02),
            };
            (format!("s{i:02}"), loc)
        })
        .collect();
    let mut avail = vec![0i64; stations];
    let mut out = Vec::with_capacity(events);
    for k in 0..events {
        let i = if k < stations { k } else { rng.gen_range(0..stations) };
        let delta = if k < stations {
            rng.gen_range(3..=8)
        } else if avail[i] == 0 || rng.gen_bool(0.5) {
            rng.gen_range(1..=3)
        } else {
            -rng.gen_range(1..=avail[i].min(3))
        };
        avail[i] += delta;
        out.push(StationEvent { tick: start + k as u64 * gap, station_id: sites[i].0.clone(), delta, location: sites[i].1 });
    }
    out
}

pub fn write_station_events(out: &mut impl Write, events: &[StationEvent]) -> io::Result<()> {
    for e in events {
        writeln!(out, "{}", serde_json::to_string(e).map_err(io::Error::other)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = r#"
{"tick":0,"op":"join","peer":0}
{"tick":0,"op":"join","peer":1}
{"tick":0,"op":"marker","peer":0,"id":"m","location":{"lng":4.3525,"lat":50.8467},"radius":750}
{"tick":1,"op":"publish","name":"a","peer":0,"location":{"lng":4.3525,"lat":50.8490}}
{"tick":1,"op":"publish","name":"b","peer":1,"location":{"lng":4.3560,"lat":50.8467}}
{"tick":1,"op":"publish","name":"c","peer":1,"location":{"lng":4.3525,"lat":50.8600}}
{"tick":80,"op":"emit","name":"c","value":{"lng":4.3525,"lat":50.8470}}
{"tick":90,"op":"react_to","marker":"m","location":{"lng":4.3560,"lat":50.8470},"radius":300}
{"tick":100,"op":"unpublish","name":"c"}
"#;

    #[test]
    fn script_counts_match_the_recount() {
        let events = parse_script(SCRIPT.as_bytes()).unwrap();
        let report = run_script(&events, RunOptions::seeded(1)).unwrap();
        assert!(report.mismatches.is_empty(), "{:?}", report.mismatches);
        let at = |t: u64| report.records.iter().rfind(|r| r.tick <= t).map(|r| r.count);
        assert_eq!(at(79), Some(2));
        assert_eq!(at(89), Some(3));
        assert_eq!(at(99), Some(2));
        assert_eq!(report.records.last().unwrap().count, 1);
        assert!(report.checked >= 4);
    }

    #[test]
    fn errors_name_the_line() {
        let bad = "{\"tick\":0,\"op\":\"join\",\"peer\":0}\n\n{\"tick\":1,\"op\":\"fly\"}\n";
        assert!(matches!(parse_script(bad.as_bytes()), Err(ScenarioError::Parse { line: 3, .. })));
        let events = parse_script("{\"tick\":5,\"op\":\"heal\"}\n{\"tick\":2,\"op\":\"heal\"}".as_bytes()).unwrap();
        let err = run_script(&events, RunOptions::default()).err().unwrap();
        assert!(matches!(err, ScenarioError::Order { line: 2, .. }));
        let events = parse_script("{\"tick\":0,\"op\":\"unpublish\",\"name\":\"x\"}".as_bytes()).unwrap();
        assert!(run_script(&events, RunOptions::default()).err().unwrap().to_string().starts_with("line 1:"));
    }

    #[test]
    fn small_villo_replay_is_exact_and_deterministic() {
        let log = synthetic_villo(8, 120, 4, 40, 4);
        let mut text = Vec::new();
        write_station_events(&mut text, &log).unwrap();
        let events = parse_station_events(text.as_slice()).unwrap();
        let cfg = VilloConfig { station_peers: 3, markers: Vec::new() };
        let a = run_villo(&events, &cfg, RunOptions::seeded(2)).unwrap();
        assert!(a.mismatches.is_empty(), "{:?}", &a.mismatches[..a.mismatches.len().min(5)]);
        assert!(a.checked > 50);
        let b = run_villo(&events, &cfg, RunOptions::seeded(2)).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn taking_from_an_empty_station_is_rejected() {
        let e = StationEvent { tick: 10, station_id: "s".into(), delta: -1, location: BRUSSELS };
        let err = run_villo(&[(7, e)], &VilloConfig::default(), RunOptions::default()).err().unwrap();
        assert!(matches!(err, ScenarioError::Invalid { line: 7, .. }));
    }
}
