use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ghostgrid::config::RunConfig;
use ghostgrid::experiment::{run_experiment, write_curves};
use ghostgrid::ghost::{
    load, read_labels, read_trajectories, write_labels, GhostDatabase, LabelRecord, AUTO_RATER,
};
use ghostgrid::ids::TrajectoryId;
use ghostgrid::sim::Simulation;
use ghostgrid::taxonomy::{classify, cohen_kappa, compute_metrics, FailureMode, Thresholds};
use ghostgrid_server::{serve, ServeOptions, ServerError, Session};

#[derive(Parser)]
#[command(
    name = "ghostgrid",
    version,
    about = "Gridworld learning with a memory of past failures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a live session and stream it to clients over TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.port` from the config.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Train headless and write the ghost database to a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every episode in a ghosts.jsonl file with the rule classifier.
    Classify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with classifier thresholds.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Cohen's kappa between two label files over their shared episodes.
    Kappa {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Run the paired baseline/conditioned experiment and write a report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Learning curves CSV; defaults to the report path with `.curves.csv`.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Flatten a ghost database into one file.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Jsonl,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration and validation problems, 2 for I/O and parse problems.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<ghostgrid::Error>() {
            return match err.code() {
                "E_IO" | "E_PARSE" => 2,
                _ => 1,
            };
        }
        if let Some(err) = cause.downcast_ref::<ServerError>() {
            return match err {
                ServerError::Bind { .. } => 2,
                ServerError::Core(inner) if matches!(inner.code(), "E_IO" | "E_PARSE") => 2,
                ServerError::Core(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Serve { config, port, host } => serve_cmd(&config, port, &host),
        Command::Train {
            config,
            episodes,
            out,
        } => train(&config, episodes, &out),
        Command::Classify {
            input,
            out,
            thresholds,
        } => classify_cmd(&input, &out, thresholds.as_deref()),
        Command::Kappa { a, b } => kappa(&a, &b),
        Command::Evaluate {
            config,
            out,
            curves,
        } => evaluate(&config, &out, curves),
        Command::Export { data, format, out } => export(&data, format, &out),
    }
}

fn serve_cmd(config: &Path, port: Option<u16>, host: &str) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let port = port.unwrap_or(cfg.server.port);
    let session_id = format!("session-{}-{}", cfg.agent.seed, std::process::id());
    let session = Session::new(session_id, cfg.sim_settings(), cfg.server.tick_rate_hz)?;
    let handle = serve(
        session,
        &ServeOptions {
            addr: format!("{host}:{port}"),
            data_dir: Some(cfg.paths.data_dir.clone()),
        },
    )?;
    eprintln!(
        "listening on {} (data in {})",
        handle.local_addr(),
        cfg.paths.data_dir.display()
    );
    handle.wait();
    Ok(())
}

fn train(config: &Path, episodes: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut sim = Simulation::new(cfg.sim_settings())?;
    sim.attach_log(out)?;
    let mut successes = 0;
    let mut last_greedy = None;
    for _ in 0..episodes {
        let end = sim.run_episode()?;
        if end.outcome == ghostgrid::ghost::Outcome::Success {
            successes += 1;
        }
        last_greedy = Some(end.greedy_return);
    }
    println!(
        "episodes={episodes} successes={successes} snapshots={} final_greedy_return={}",
        sim.db().snapshots().len(),
        last_greedy.map_or("n/a".to_string(), |r| format!("{r:.4}"))
    );
    Ok(())
}

fn read_thresholds(path: &Path) -> Result<Thresholds> {
    let text = fs::read_to_string(path).map_err(|e| ghostgrid::Error::io(path, e))?;
    let th: Thresholds = serde_json::from_str(&text).map_err(|e| {
        ghostgrid::Error::Config(format!("{}: invalid thresholds: {e}", path.display()))
    })?;
    th.validate()?;
    Ok(th)
}

fn open(path: &Path) -> Result<File> {
    Ok(File::open(path).map_err(|e| ghostgrid::Error::io(path, e))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| ghostgrid::Error::io(path, e))?,
    ))
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

fn classify_cmd(input: &Path, out: &Path, thresholds: Option<&Path>) -> Result<()> {
    let th = match thresholds {
        Some(p) => read_thresholds(p)?,
        None => Thresholds::default(),
    };
    let episodes = read_trajectories(open(input)?, &file_name(input))?;
    let labels: Vec<LabelRecord> = episodes
        .iter()
        .map(|(id, t)| LabelRecord {
            trajectory_id: *id,
            rater_id: AUTO_RATER.into(),
            failure_mode: classify(&compute_metrics(t, &th), &th),
            unix_ts: 0,
        })
        .collect();
    write_labels(create(out)?, &labels, out)?;
    let mut counts: BTreeMap<FailureMode, usize> = BTreeMap::new();
    for l in &labels {
        *counts.entry(l.failure_mode).or_default() += 1;
    }
    let summary: Vec<String> = counts.iter().map(|(m, n)| format!("{m}={n}")).collect();
    println!(
        "classified {} episodes: {}",
        labels.len(),
        summary.join(" ")
    );
    Ok(())
}

/// Last label per trajectory in file order.
fn latest_labels(path: &Path) -> Result<BTreeMap<TrajectoryId, FailureMode>> {
    let labels = read_labels(open(path)?, &file_name(path))?;
    Ok(labels
        .into_iter()
        .map(|l| (l.trajectory_id, l.failure_mode))
        .collect())
}

fn kappa(a: &Path, b: &Path) -> Result<()> {
    let la = latest_labels(a)?;
    let lb = latest_labels(b)?;
    let (xs, ys): (Vec<FailureMode>, Vec<FailureMode>) = la
        .iter()
        .filter_map(|(id, ma)| lb.get(id).map(|mb| (*ma, *mb)))
        .unzip();
    if xs.is_empty() {
        bail!(ghostgrid::Error::validation(
            "the two label files share no trajectories"
        ));
    }
    let k = cohen_kappa(&xs, &ys)?;
    println!("kappa={k:.4}");
    println!("items={}", xs.len());
    Ok(())
}

fn evaluate(config: &Path, out: &Path, curves: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate_experiment()?;
    let run = run_experiment(&cfg.arm_spec(), &cfg.dual_loop)?;
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &run.report).context("writing report")?;
    writeln!(w).map_err(|e| ghostgrid::Error::io(out, e))?;
    w.flush().map_err(|e| ghostgrid::Error::io(out, e))?;
    let curves = curves.unwrap_or_else(|| out.with_extension("curves.csv"));
    write_curves(create(&curves)?, &run.curves)?;
    let h = &run.report.hypothesis;
    println!(
        "seeds={} median_recovery baseline={} conditioned={} conditioned<=baseline={}",
        run.report.baseline.seeds.len(),
        h.baseline_median_recovery,
        h.conditioned_median_recovery,
        h.holds
            .map_or("undetermined".to_string(), |b| b.to_string())
    );
    Ok(())
}

/// The label a trajectory is treated as having: the latest human label if
/// any, otherwise the latest classifier label.
fn effective_label(db: &GhostDatabase, id: TrajectoryId) -> Option<FailureMode> {
    let labels = db.trajectory(id)?.labels();
    labels
        .iter()
        .rev()
        .find(|(rater, _)| rater != AUTO_RATER)
        .or_else(|| labels.last())
        .map(|(_, m)| *m)
}

fn export(data: &Path, format: ExportFormat, out: &Path) -> Result<()> {
    let db = load(data)?;
    let mut w = create(out)?;
    let io = |e| ghostgrid::Error::io(out, e);
    match format {
        ExportFormat::Jsonl => {
            for st in db.trajectories() {
                let line = ghostgrid::ghost::trajectory_line(st.id, &st.trajectory);
                let mut value: serde_json::Value = serde_json::from_str(&line)?;
                let labels: Vec<serde_json::Value> = st
                    .labels()
                    .iter()
                    .map(|(rater, mode)| serde_json::json!({"rater_id": rater, "failure_mode": mode}))
                    .collect();
                value["labels"] = labels.into();
                writeln!(w, "{value}").map_err(io)?;
            }
        }
        ExportFormat::Csv => {
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record([
                "trajectory_id",
                "episode_index",
                "step",
                "x",
                "y",
                "action",
                "reward",
                "next_x",
                "next_y",
                "done",
                "done_reason",
                "failure_mode",
            ])?;
            for st in db.trajectories() {
                let label = effective_label(&db, st.id).map_or(String::new(), |m| m.to_string());
                for (k, t) in st.trajectory.transitions.iter().enumerate() {
                    let reason = serde_json::to_value(t.done_reason)?;
                    csv.write_record([
                        st.id.0.to_string(),
                        st.trajectory.episode_index.to_string(),
                        k.to_string(),
                        t.s.agent.x.to_string(),
                        t.s.agent.y.to_string(),
                        format!("{:?}", t.a),
                        t.r.to_string(),
                        t.s_next.agent.x.to_string(),
                        t.s_next.agent.y.to_string(),
                        t.done.to_string(),
                        reason.as_str().unwrap_or_default().to_string(),
                        label.clone(),
                    ])?;
                }
            }
            csv.flush().map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    println!("exported {} episodes to {}", db.len(), out.display());
    Ok(())
}
