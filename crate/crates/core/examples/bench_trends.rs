//! Prints benchmark rows for both implementations across a range of sizes.

use flocks::bench::{app_level, topo_level, write_csv, BenchConfig, Impl, TopoMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rows = Vec::new();
    for imp in [Impl::IncBag, Impl::Bag] {
        for n in [1, 10, 100, 1000] {
            let cfg = BenchConfig { updates: 400, warmup: 100, ..BenchConfig::new(imp, n) };
            rows.push(app_level(&cfg)?.0);
        }
    }
    println!("# app level");
    write_csv(&mut std::io::stdout(), &rows)?;
    rows.clear();
    for imp in [Impl::IncBag, Impl::Bag] {
        for n in [1, 10, 100, 1000] {
            let cfg = BenchConfig { updates: 150, warmup: 50, ..BenchConfig::new(imp, n) };
            rows.push(topo_level(&cfg, TopoMode::Add)?.0);
        }
    }
    println!("# topology level, add");
    write_csv(&mut std::io::stdout(), &rows)?;
    Ok(())
}
