//! Three peers with bikes, one marker counting those within 750 m.

use std::f64::consts::PI;

use flocks::actor::bike_behaviour;
use flocks::behaviour::CollectionMode;
use flocks::geo::{counting_marker, BIKES, EARTH_RADIUS_KM};
use flocks::net::{NetSim, SimConfig};
use flocks::reactor::ReactInput;
use flocks::value::{PeerId, Value};

const CENTRE: (f64, f64) = (4.3525, 50.8467);

fn north(metres: f64) -> Value {
    Value::lnglat(CENTRE.0, CENTRE.1 + metres / 1000.0 / EARTH_RADIUS_KM * 180.0 / PI)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = NetSim::new(SimConfig::default());
    for p in 0..3 {
        sim.join(PeerId(p), &[BIKES])?;
    }
    let mut bikes = Vec::new();
    for (p, m) in [(0, 100.0), (1, 400.0), (2, 900.0), (2, 1500.0)] {
        let b = sim.spawn_actor(PeerId(p), &bike_behaviour(), "init", &[north(m)])?;
        sim.publish(BIKES, b)?;
        bikes.push(b);
    }
    let marker = sim.spawn_reactor(PeerId(0), &counting_marker(CollectionMode::Incremental))?;
    let here = Value::lnglat(CENTRE.0, CENTRE.1);
    sim.react_to(marker, ReactInput::Positional(vec![Value::text("grand-place"), here, Value::number(750)]));
    sim.settle();
    println!("initial: {}", sim.emissions().last().map(|e| e.value.to_string()).unwrap_or_default());

    sim.send(bikes[2], "update-location!", vec![north(600.0)]);
    sim.settle();
    println!("bike moved in: {}", sim.emissions().last().unwrap().value);

    sim.leave(PeerId(1))?;
    sim.settle();
    println!("peer 1 left: {}", sim.emissions().last().unwrap().value);

    println!("{} emissions in total", sim.emissions().len());
    Ok(())
}
