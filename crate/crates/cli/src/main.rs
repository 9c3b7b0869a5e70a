use std::fs::{self, File};
use std::io::BufWriter;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wormnet::metrics::{write_metrics_csv, MetricsRow};
use wormnet::model::Scenario;
use wormnet::ode::{integrate, trajectory_metrics, write_trajectory_csv, OdeSettings};
use wormnet::sim::{run_many, simulate_run, summarize, write_runs_csv, write_summary_csv};
use wormnet::sweep::{plot_script, run_sweep, write_sweep_csv, Engine, SweepSpec};
use wormnet::trace::{
    self, parse_associations, parse_encounters, replay_many, replay_scenario, replay_sim, trace_stats,
    write_associations_csv, write_batches_csv, write_histogram_csv, write_node_stats_csv, write_rates_csv,
    write_top_share_csv, SyntheticPlan, TraceNetwork, TraceStats, DEFAULT_BATCH_WINDOW,
};

/// Predator-prey worm interactions in encounter-based networks.
#[derive(Parser)]
#[command(name = "wormnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the compartment model; writes trajectory.csv and metrics.csv.
    Ode {
        #[command(flatten)]
        common: Common,
        /// Integration step, seconds.
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// Write every n-th step.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Extinction threshold for TA and TR.
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
    },
    /// Monte Carlo encounter simulation; writes runs.csv, summary.csv and
    /// events.csv (first seed).
    Sim {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Trace statistics and trace-driven replay.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Sweep one parameter; writes sweep.csv and plot_sweep.py.
    Sweep {
        /// Sweep file (TOML).
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario horizon, seconds.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TraceInput {
    /// Association CSV `node_id,ap_id,start_ts,end_ts`.
    #[arg(long)]
    trace: PathBuf,
    /// Read `--trace` as an encounter CSV `t_start,t_end,node_a,node_b`.
    #[arg(long)]
    encounters: bool,
    /// Batch-arrival window, seconds.
    #[arg(long, default_value_t = DEFAULT_BATCH_WINDOW)]
    window: f64,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Per-node, batch, rate, histogram and top-share tables.
    Stats {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Replay worms over the trace.
    Sim {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate the synthetic two-batch association trace.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn load_scenario(common: &Common) -> Result<Scenario> {
    let mut scn = Scenario::load(&common.scenario)?;
    if let Some(h) = common.horizon {
        scn.horizon = h;
    }
    Ok(scn)
}

fn load_trace(input: &TraceInput) -> Result<(TraceNetwork, TraceStats)> {
    let file = File::open(&input.trace).with_context(|| format!("cannot open {}", input.trace.display()))?;
    let name = input.trace.display();
    if input.encounters {
        let parsed = parse_encounters(file).with_context(|| format!("{name}"))?;
        report_rejects(&name.to_string(), &parsed.rejects);
        let stats = trace_stats(&parsed.records, input.window)?;
        Ok((TraceNetwork::new(&parsed.records, &stats), stats))
    } else {
        let parsed = parse_associations(file).with_context(|| format!("{name}"))?;
        report_rejects(&name.to_string(), &parsed.rejects);
        Ok(TraceNetwork::from_associations(&parsed.records, input.window)?)
    }
}

fn report_rejects(name: &str, rejects: &[trace::Reject]) {
    for r in rejects {
        eprintln!("warning: {name}:{}: {}", r.line, r.reason);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ode {
            common,
            step,
            stride,
            epsilon,
        } => {
            let scn = load_scenario(&common)?;
            let settings = OdeSettings {
                step,
                output_stride: stride,
                extinction_threshold: epsilon,
            };
            let traj = integrate::<f64>(&scn, &settings)?;
            let m = trajectory_metrics(&traj, &scn, &settings);
            prepare_out(&common.out)?;
            write_trajectory_csv(&traj, create(&common.out, "trajectory.csv")?)?;
            write_metrics_csv(&[MetricsRow::new(&m, &scn)], create(&common.out, "metrics.csv")?)?;
        }
        Command::Sim { common, runs, seed } => {
            let scn = load_scenario(&common)?;
            let results = run_many(&scn, runs, seed)?;
            let (log, _) = simulate_run(&scn, seed)?;
            prepare_out(&common.out)?;
            write_runs_csv(&results, &scn, create(&common.out, "runs.csv")?)?;
            write_summary_csv(
                &summarize(results.iter().map(|r| &r.metrics)),
                create(&common.out, "summary.csv")?,
            )?;
            log.write_csv(create(&common.out, "events.csv")?)?;
        }
        Command::Trace { command } => match command {
            TraceCommand::Stats { input, out } => {
                let (_, stats) = load_trace(&input)?;
                prepare_out(&out)?;
                write_node_stats_csv(&stats, create(&out, "node_stats.csv")?)?;
                write_batches_csv(&stats, create(&out, "batches.csv")?)?;
                write_rates_csv(&stats, create(&out, "rates.csv")?)?;
                write_histogram_csv(&stats, create(&out, "histogram.csv")?)?;
                write_top_share_csv(&stats, create(&out, "top_share.csv")?)?;
            }
            TraceCommand::Sim {
                input,
                scenario,
                runs,
                seed,
                out,
            } => {
                if runs == 0 {
                    bail!("--runs must be at least 1");
                }
                let scn = Scenario::load(&scenario)?;
                let (net, _) = load_trace(&input)?;
                let results = replay_many(&net, &scn, runs, seed)?;
                let (log, _) = replay_sim(&net, &scn, seed)?;
                let adapted = replay_scenario(&net, &scn)?;
                prepare_out(&out)?;
                write_runs_csv(&results, &adapted, create(&out, "runs.csv")?)?;
                write_summary_csv(&summarize(results.iter().map(|r| &r.metrics)), create(&out, "summary.csv")?)?;
                log.write_csv(create(&out, "events.csv")?)?;
            }
            TraceCommand::Synth { seed, out } => {
                let plan = SyntheticPlan::two_batch();
                prepare_out(&out)?;
                write_associations_csv(&plan.associations(seed), create(&out, "associations.csv")?)?;
            }
        },
        Command::Sweep { spec, out } => {
            let spec = SweepSpec::load(&spec)?;
            let base = Scenario::load(&spec.scenario)?;
            let network = if spec.engine == Engine::Trace {
                let input = TraceInput {
                    trace: spec.trace.clone().expect("checked when loading"),
                    encounters: false,
                    window: spec.batch_window.unwrap_or(DEFAULT_BATCH_WINDOW),
                };
                Some(load_trace(&input)?.0)
            } else {
                None
            };
            let outcome = run_sweep(&spec, &base, network.as_ref())?;
            for (value, err) in &outcome.failures {
                eprintln!("warning: {}={value}: {err}", spec.param);
            }
            prepare_out(&out)?;
            write_sweep_csv(&outcome, create(&out, "sweep.csv")?)?;
            fs::write(out.join("plot_sweep.py"), plot_script("sweep.csv", spec.param))
                .with_context(|| format!("cannot write {}", out.join("plot_sweep.py").display()))?;
            if outcome.points.is_empty() {
                bail!("every sweep point failed");
            }
        }
    }
    Ok(())
}

/// The error chain, skipping causes a parent message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(2),
    }
}
