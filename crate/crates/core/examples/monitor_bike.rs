//! A recorder on another peer monitors a bike's location stream.

use flocks::actor::{bike_behaviour, recorder_behaviour};
use flocks::net::{NetSim, SimConfig};
use flocks::value::{PeerId, StreamRef, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = NetSim::new(SimConfig { latency: 2, ..SimConfig::default() });
    sim.join(PeerId(0), &[])?;
    sim.join(PeerId(1), &[])?;
    let bike = sim.spawn_actor(PeerId(0), &bike_behaviour(), "init", &[Value::lnglat(4.3517, 50.8503)])?;
    let rec = sim.spawn_actor(PeerId(1), &recorder_behaviour(), "start", &[])?;
    sim.monitor(rec, StreamRef::new(bike, "location"), "log!");
    sim.run_for(10);
    for (i, (lng, lat)) in [(4.3530, 50.8490), (4.3550, 50.8470), (4.3600, 50.8450)].into_iter().enumerate() {
        sim.send(bike, "update-location!", vec![Value::lnglat(lng, lat)]);
        sim.run_for(5 + i as u64);
    }
    for (tick, who, v) in sim.actor_log() {
        println!("tick {tick:>3}  {who} saw {v}");
    }
    Ok(())
}
