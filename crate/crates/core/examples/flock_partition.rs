//! Splits four peers into two halves, changes membership on one side, then heals.

use flocks::actor::bike_behaviour;
use flocks::flock::Members;
use flocks::net::{NetSim, SimConfig};
use flocks::value::{PeerId, Value};

fn total(m: Option<Members>) -> u32 {
    m.map(|m| m.values().sum()).unwrap_or(0)
}

fn show(sim: &NetSim, label: &str) {
    let counts: Vec<String> = (0..4).map(|p| total(sim.contents(PeerId(p), "Bikes")).to_string()).collect();
    println!("{label:<20} tick {:>4}  members seen per peer: {}", sim.now(), counts.join(" "));
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = NetSim::new(SimConfig { seed: 42, ..SimConfig::default() });
    for p in 0..4 {
        sim.join(PeerId(p), &["Bikes"])?;
        for _ in 0..2 {
            let b = sim.spawn_actor(PeerId(p), &bike_behaviour(), "init", &[Value::number(p)])?;
            sim.publish("Bikes", b)?;
        }
    }
    sim.settle();
    show(&sim, "joined");

    sim.partition(&[PeerId(0), PeerId(1)], &[PeerId(2), PeerId(3)]);
    sim.settle();
    show(&sim, "partitioned");

    let extra = sim.spawn_actor(PeerId(3), &bike_behaviour(), "init", &[Value::number(9)])?;
    sim.publish("Bikes", extra)?;
    sim.settle();
    show(&sim, "published on p3");

    sim.heal();
    sim.settle();
    show(&sim, "healed");
    println!("{} connections, {} half open", sim.connections().len(), sim.half_open());
    Ok(())
}
