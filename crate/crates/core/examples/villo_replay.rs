//! Generates a synthetic station log and replays it across ten peers,
//! checking each marker count against a recount from ground truth.

use flocks::scenario::{run_villo, synthetic_villo, RunOptions, VilloConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let events: Vec<_> = synthetic_villo(50, 1000, 7, 80, 4).into_iter().enumerate().collect();
    let report = run_villo(&events, &VilloConfig::default(), RunOptions::seeded(7))?;
    println!("{} station events, {} marker emissions", events.len(), report.records.len());
    println!("{} checked, {} settling, {} mismatches", report.checked, report.transient, report.mismatches.len());
    for r in report.records.iter().rev().take(3) {
        println!("  tick {:>5}  {:<10} {}", r.tick, r.marker_id, r.count);
    }
    Ok(())
}
