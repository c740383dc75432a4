//! Benchmark command line: runs the vortex test case through the solver,
//! or replays a recorded device trace through the offline simulator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 internal invariant violation.

use clap::Parser;
use std::path::PathBuf;
use tasksph::config::{self, DeviceModelChoice};
use tasksph::devsim;
use tasksph::driver;
use tasksph::error::SolverError;

#[derive(Parser, Debug)]
#[command(name = "tasksph", version, about = "Task-parallel SPH vortex benchmark")]
struct Cli {
    /// Plain-text key = value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Particles per dimension.
    #[arg(long)]
    resolution: Option<usize>,

    /// Execution mode: cpu, offload-host or offload-trace.
    #[arg(long)]
    mode: Option<String>,

    /// Worker thread count.
    #[arg(long)]
    workers: Option<usize>,

    #[arg(long)]
    sp_self: Option<usize>,
    #[arg(long)]
    sb_self: Option<usize>,
    #[arg(long)]
    sp_pair: Option<usize>,
    #[arg(long)]
    sb_pair: Option<usize>,

    /// End time of the simulation.
    #[arg(long)]
    t_end: Option<f64>,

    #[arg(long)]
    snapshot_out: Option<PathBuf>,
    #[arg(long)]
    timeline_out: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,

    /// Device model preset (nvlink-like, pcie4-like) or a model file path.
    #[arg(long)]
    device_model: Option<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Replay an existing device trace through the simulator and exit.
    #[arg(long)]
    replay_trace: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), SolverError> {
    if let Some(trace_path) = &cli.replay_trace {
        let choice = match &cli.device_model {
            Some(s) => DeviceModelChoice::parse(s)?,
            None => DeviceModelChoice::NvlinkLike,
        };
        let model = driver::device_model_for(&choice)?;
        let text = std::fs::read_to_string(trace_path)?;
        let rows = tasksph::offload::parse_trace_csv(&text)?;
        let tl = devsim::simulate(&rows, &model)?;
        let sim_path = trace_path.with_extension("sim.csv");
        tl.write_csv(std::io::BufWriter::new(std::fs::File::create(&sim_path)?))?;
        let metrics_path = trace_path.with_extension("metrics");
        tl.write_metrics(std::io::BufWriter::new(std::fs::File::create(&metrics_path)?))?;
        println!(
            "simulated {} ops: makespan {:.6e} s, overlap {:.4}, outputs {} and {}",
            tl.ops.len(),
            tl.makespan,
            tl.overlap_fraction,
            sim_path.display(),
            metrics_path.display()
        );
        return Ok(());
    }

    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut set = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((key.to_string(), v));
        }
    };
    set("resolution", cli.resolution.map(|v| v.to_string()));
    set("mode", cli.mode);
    set("workers", cli.workers.map(|v| v.to_string()));
    set("sp_self", cli.sp_self.map(|v| v.to_string()));
    set("sb_self", cli.sb_self.map(|v| v.to_string()));
    set("sp_pair", cli.sp_pair.map(|v| v.to_string()));
    set("sb_pair", cli.sb_pair.map(|v| v.to_string()));
    set("t_end", cli.t_end.map(|v| v.to_string()));
    set("snapshot_out", cli.snapshot_out.map(|p| p.display().to_string()));
    set("timeline_out", cli.timeline_out.map(|p| p.display().to_string()));
    set("trace_out", cli.trace_out.map(|p| p.display().to_string()));
    set("device_model", cli.device_model);
    set("seed", cli.seed.map(|v| v.to_string()));

    let cfg = config::parse_config(cli.config.as_deref(), &overrides)?;
    let out = driver::run_simulation(&cfg)?;
    println!(
        "completed {} steps to t = {:.5}: v_theta L1 {:.5}, pressure L1 {:.5}, plateau {:.5}",
        out.steps.len(),
        out.final_time,
        out.report.l1_v_theta,
        out.report.l1_pressure,
        out.report.plateau_pressure_mean
    );
    if let Some(sim) = &out.sim {
        println!(
            "device simulation: makespan {:.6e} s, overlap fraction {:.4}",
            sim.makespan, sim.overlap_fraction
        );
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("TASKSPH_LOG", "info"),
    )
    .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        log::error!("{e}");
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
