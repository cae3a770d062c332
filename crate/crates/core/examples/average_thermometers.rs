//! Averages the readings of every thermometer in a flock.

use flocks::geo::{average, thermometer_behaviour, THERMOMETERS};
use flocks::net::{NetSim, SimConfig};
use flocks::value::{PeerId, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = NetSim::new(SimConfig::default());
    let mut thermometers = Vec::new();
    for (p, t) in [(0, 18.5), (1, 21.0), (2, 23.5)] {
        sim.join(PeerId(p), &[THERMOMETERS])?;
        let th = sim.spawn_actor(PeerId(p), &thermometer_behaviour(), "init", &[Value::number(t)])?;
        sim.publish(THERMOMETERS, th)?;
        thermometers.push(th);
    }
    sim.spawn_reactor(PeerId(0), &average())?;
    sim.settle();
    println!("average: {}", sim.emissions().last().unwrap().value);
    sim.send(thermometers[1], "measure!", vec![Value::number(27.0)]);
    sim.settle();
    println!("after a new reading: {}", sim.emissions().last().unwrap().value);
    sim.leave(PeerId(2))?;
    sim.settle();
    println!("after peer 2 left: {}", sim.emissions().last().unwrap().value);
    Ok(())
}
