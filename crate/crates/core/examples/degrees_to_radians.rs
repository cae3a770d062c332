//! Spawns the four-node conversion reactor and feeds it a few angles.

use flocks::geo::{degrees_to_radians, degrees_to_radians_short};
use flocks::reactor::Reactor;
use flocks::stream::NoStreams;
use flocks::value::Value;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for behaviour in [degrees_to_radians_short(), degrees_to_radians()] {
        let (mut r, _) = Reactor::spawn(&behaviour, &NoStreams)?;
        println!("{} ({} nodes)", behaviour.name(), r.node_count());
        for deg in [0.0, 45.0, 90.0, 180.0, 180.0] {
            let out = r.react(&[Value::number(deg)], &NoStreams)?;
            match out.emission {
                Some(v) => println!("  {deg:>5} -> {v}"),
                None => println!("  {deg:>5} -> (unchanged, nothing emitted)"),
            }
        }
    }
    Ok(())
}
