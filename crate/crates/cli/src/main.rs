use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ddvc_core::estimator::{estimate, MeasurementWindow};
use ddvc_core::network::load_feeder;
use ddvc_core::scenario::{Scenario, ScenarioConfig};
use ddvc_core::trace;

#[derive(Parser)]
#[command(name = "ddvc", version, about = "Data-driven voltage control on radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop and write a per-step trace.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every measurement snapshot to this CSV.
        #[arg(long)]
        snapshots_out: Option<PathBuf>,
        /// Let perturbation events change the line's R/X ratio.
        #[arg(long)]
        break_alpha: bool,
        /// Re-estimate only every k steps.
        #[arg(long, value_name = "K")]
        estimate_every: Option<u64>,
    },
    /// Estimation accuracy over window sizes and independent replicas.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        windows: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        replicas: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-replica errors to this CSV.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Estimate line reactances from recorded snapshots.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshots: PathBuf,
        /// Write the estimate here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a trace into per-figure CSV tables.
    Plotdata {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn simulate(
    config: PathBuf,
    out: PathBuf,
    snapshots_out: Option<PathBuf>,
    break_alpha: bool,
    estimate_every: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if break_alpha {
        for ev in &mut cfg.events {
            ev.preserve_alpha = false;
        }
    }
    if let Some(k) = estimate_every {
        cfg.estimate_every = k;
    }
    let run = Scenario::load(cfg)?.run_closed_loop()?;
    trace::save_trace(&run, &out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = snapshots_out {
        trace::save_snapshots(&run.snapshots, &path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let violating = run.records.iter().filter(|r| r.band.violation_count > 0).count();
    eprintln!(
        "{} steps, {} with band violations -> {}",
        run.records.len(),
        violating,
        out.display()
    );
    if let Some(t) = &run.termination {
        eprintln!("stopped early: {t}");
    }
    Ok(())
}

fn montecarlo(
    config: PathBuf,
    windows: Vec<usize>,
    replicas: usize,
    out: PathBuf,
    samples: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let table = Scenario::load(cfg)?.run_monte_carlo(&windows, replicas)?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    trace::write_monte_carlo(&table, BufWriter::new(file))?;
    if let Some(path) = samples {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        trace::write_monte_carlo_samples(&table, BufWriter::new(file))?;
    }
    for row in &table.rows {
        for e in &row.errors {
            eprintln!("window {}: replica failed: {e}", row.window);
        }
    }
    Ok(())
}

fn estimate_cmd(config: PathBuf, snapshots: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let feeder = load_feeder(&cfg.feeder)?;
    let snaps = trace::load_snapshots(&snapshots)
        .with_context(|| format!("reading {}", snapshots.display()))?;
    if snaps.is_empty() {
        bail!("{} holds no snapshots", snapshots.display());
    }
    let mut window = MeasurementWindow::new(cfg.window)?;
    for s in snaps {
        window.push(s)?;
    }
    let est = estimate(&window, &feeder.topology, &feeder.params.alpha)?;

    let mut sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(sink, "line,from,to,x_hat,r_hat,x_file")?;
    for (l, line) in feeder.topology.lines().iter().enumerate() {
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            l + 1,
            line.from,
            line.to,
            est.x[l],
            est.r[l],
            feeder.params.x[l]
        )?;
    }
    sink.flush()?;
    eprintln!(
        "effective rank {} of {}{}",
        est.effective_rank,
        feeder.topology.line_count(),
        if est.nonpositive_lines.is_empty() {
            String::new()
        } else {
            format!(
                ", nonpositive reactance on lines {:?}",
                est.nonpositive_lines.iter().map(|l| l + 1).collect::<Vec<_>>()
            )
        }
    );
    Ok(())
}

fn plotdata(trace_path: PathBuf, out: PathBuf) -> Result<()> {
    let run = trace::load_trace(&trace_path)
        .with_context(|| format!("reading {}", trace_path.display()))?;
    for path in trace::write_plot_data(&run, &out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            config,
            out,
            snapshots_out,
            break_alpha,
            estimate_every,
        } => simulate(config, out, snapshots_out, break_alpha, estimate_every),
        Command::Montecarlo {
            config,
            windows,
            replicas,
            out,
            samples,
        } => montecarlo(config, windows, replicas, out, samples),
        Command::Estimate {
            config,
            snapshots,
            out,
        } => estimate_cmd(config, snapshots, out),
        Command::Plotdata { trace, out } => plotdata(trace, out),
    }
}
