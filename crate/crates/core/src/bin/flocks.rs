use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flocks::bench::{app_level, topo_level, write_csv, BenchConfig, Impl, TopoMode};
use flocks::scenario::{
    parse_script, parse_station_events, run_script, run_villo, synthetic_villo, write_station_events, Kind,
    RunOptions, ScenarioReport, VilloConfig,
};

#[derive(Parser)]
#[command(name = "flocks", about = "Reactor benchmarks and simulated bike-counting scenarios")]
struct Cli {
    /// Write propagation trace records (JSON lines) to stderr.
    #[arg(long, global = true)]
    trace_propagation: bool,
    /// Write the simulator delivery log (JSON lines) to stderr.
    #[arg(long, global = true)]
    trace_net: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Bench(Bench),
    #[command(subcommand)]
    Scenario(Scenario),
}

#[derive(Args)]
struct Common {
    #[arg(long = "impl", default_value = "incbag")]
    imp: Impl,
    /// One or more sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Bench {
    /// Time per location update through a CountingMarker.
    AppLevel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        updates: usize,
    },
    /// Time to add or remove the n-th bike.
    TopoLevel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "add")]
        mode: TopoMode,
        #[arg(long, default_value_t = 500)]
        reps: usize,
    },
}

#[derive(Subcommand)]
enum Scenario {
    /// Replays a script and writes every marker emission as JSON lines.
    Run {
        #[arg(long, default_value = "whereabikes")]
        kind: Kind,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Peers hosting stations in a villo replay.
        #[arg(long, default_value_t = 10)]
        station_peers: u32,
    },
    /// Writes a synthetic station event log.
    GenerateVillo {
        #[arg(long, default_value_t = 50)]
        stations: usize,
        #[arg(long, default_value_t = 1000)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn bench(cli: &Cli, b: &Bench) -> Result<(), Box<dyn std::error::Error>> {
    if cli.trace_propagation || cli.trace_net {
        eprintln!("tracing is not available for benchmarks");
    }
    let (common, rows) = match b {
        Bench::AppLevel { common, updates } => {
            let mut rows = Vec::new();
            for &n in &common.n {
                let cfg = BenchConfig { imp: common.imp, n, updates: *updates, warmup: common.warmup, seed: common.seed };
                rows.push(app_level(&cfg)?.0);
            }
            (common, rows)
        }
        Bench::TopoLevel { common, mode, reps } => {
            let mut rows = Vec::new();
            for &n in &common.n {
                let cfg = BenchConfig { imp: common.imp, n, updates: *reps, warmup: common.warmup, seed: common.seed };
                rows.push(topo_level(&cfg, *mode)?.0);
            }
            (common, rows)
        }
    };
    let mut out = output(&common.out)?;
    write_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn print_traces(report: &ScenarioReport) {
    let mut err = io::stderr().lock();
    for line in report.net_log.iter().chain(&report.propagation_trace) {
        let _ = writeln!(err, "{line}");
    }
}

fn scenario(cli: &Cli, s: &Scenario) -> Result<bool, Box<dyn std::error::Error>> {
    match s {
        Scenario::Run { kind, script, seed, out, station_peers } => {
            let opts = RunOptions { trace_net: cli.trace_net, trace_propagation: cli.trace_propagation, ..RunOptions::seeded(*seed) };
            let input = BufReader::new(File::open(script)?);
            let report = match kind {
                Kind::Whereabikes => run_script(&parse_script(input)?, opts)?,
                Kind::Villo => {
                    let cfg = VilloConfig { station_peers: *station_peers, ..VilloConfig::default() };
                    run_villo(&parse_station_events(input)?, &cfg, opts)?
                }
            };
            print_traces(&report);
            let mut w = output(out)?;
            report.write_counts(&mut w)?;
            w.flush()?;
            eprintln!(
                "{} emissions, {} checked, {} settling, {} mismatches",
                report.records.len(),
                report.checked,
                report.transient,
                report.mismatches.len()
            );
            for m in &report.mismatches {
                eprintln!("mismatch at tick {} for {}: emitted {:?}, expected {}", m.tick, m.marker_id, m.emitted, m.expected);
            }
            Ok(report.mismatches.is_empty())
        }
        Scenario::GenerateVillo { stations, events, seed, out } => {
            let log = synthetic_villo(*stations, *events, *seed, 80, 4);
            let mut w = output(out)?;
            write_station_events(&mut w, &log)?;
            w.flush()?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(b) => bench(&cli, b).map(|_| true),
        Command::Scenario(s) => scenario(&cli, s),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
