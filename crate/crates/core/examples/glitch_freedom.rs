//! Runs the same diamond with a nested deployment under both priority schemes.
//! Flat heights recompute the join node twice and briefly emit a wrong value.

use flocks::behaviour::ReactorBehaviour;
use flocks::ops;
use flocks::reactor::{PriorityScheme, Reactor};
use flocks::stream::NoStreams;
use flocks::value::Value;

fn root() -> Result<ReactorBehaviour, Box<dyn std::error::Error>> {
    let chain = ReactorBehaviour::define("Chain", &["x"], |b| {
        let mut n = b.source("x");
        for _ in 0..4 {
            let one = b.constant(1.0);
            n = b.binary(ops::add(), n, one);
        }
        b.out(n);
    })?;
    Ok(ReactorBehaviour::define("Root", &["s"], |b| {
        let s = b.source("s");
        let two = b.constant(2.0);
        let doubled = b.binary(ops::mul(), s, two);
        let plus_four = b.deploy(&chain, &[doubled]);
        let three = b.constant(3.0);
        let plus_three = b.binary(ops::add(), doubled, three);
        let diff = b.binary(ops::sub(), plus_three, plus_four);
        b.out(diff);
    })?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let behaviour = root()?;
    for scheme in [PriorityScheme::Hierarchical, PriorityScheme::FlatHeights] {
        let (mut r, _) = Reactor::spawn_with(&behaviour, &NoStreams, scheme, true)?;
        r.react(&[Value::number(1)], &NoStreams)?;
        let out = r.react(&[Value::number(5)], &NoStreams)?;
        let seen: Vec<String> =
            out.trace.iter().filter(|t| t.executed && t.label == "Root/-").map(|t| t.new.to_string()).collect();
        println!("{scheme:?}: subtraction ran {} time(s), values {}", seen.len(), seen.join(", "));
    }
    Ok(())
}
