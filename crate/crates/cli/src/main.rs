//! `cwbc`: offline admissible-set builds, scenario runs, estimator training
//! and replay, and the live steering service.
//!
//! Exit codes: 0 success, 1 the run failed (violations under `--assert-safe`,
//! infeasible constraints, dataset schema mismatch), 2 unreadable or invalid
//! input, 3 build stopped early by `--max-chunks`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cwbc_core::estimator::dataset::{read_dataset, replay, training_samples, write_dataset, DatasetError, ErrorStats};
use cwbc_core::estimator::{EstimatorConfig, ModelErrorNet};
use cwbc_core::governor::moas::{build_resumable, checkpoint_path, BuildOutcome};
use cwbc_core::governor::{BuildConfig, MoasBundle, MoasError};
use cwbc_core::sim::calibration::{prepare_resources, record_calibration};
use cwbc_core::sim::log::write_log;
use cwbc_core::sim::{run_scenario, Scenario, SimResources};
use cwbc_service::{router, Session, SessionConfig};

#[derive(Parser)]
#[command(name = "cwbc", version, about = "Compliant whole-body control toolkit")]
#[command(after_help = "Environment: RUST_LOG sets log verbosity (default warn); CWBC_HOST and CWBC_PORT set the serve address.")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build per-axis admissible sets offline and write them to one file.
    MoasBuild(MoasBuildArgs),
    /// Run a scenario headless and print tracking and safety metrics.
    SimRun(SimRunArgs),
    /// Record, train and evaluate the learned estimator correction.
    #[command(subcommand)]
    Estimate(EstimateCmd),
    /// Serve a live session over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Args)]
struct MoasBuildArgs {
    /// JSON file: either `{"sets": [BuildConfig, ...]}` or a scenario, whose governed axes are built.
    config: PathBuf,
    /// Output set file.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Continue from the checkpoint left next to `--out` by an earlier run.
    #[arg(long)]
    resume: bool,
    /// Grid points checked between checkpoints.
    #[arg(long, default_value_t = 4096)]
    chunk: usize,
    /// Stop after this many chunks, leaving a checkpoint (exit code 3).
    #[arg(long)]
    max_chunks: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct SimRunArgs {
    scenario: PathBuf,
    /// Admissible-set file; required when the scenario flags governed axes.
    #[arg(long)]
    moas: Option<PathBuf>,
    /// Estimator network; overrides the scenario's `net_path`.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Override whether the governor starts enabled.
    #[arg(long, value_enum)]
    governor: Option<OnOff>,
    /// Write the per-tick log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Exit 1 when any constraint is violated.
    #[arg(long)]
    assert_safe: bool,
}

#[derive(Subcommand)]
enum EstimateCmd {
    /// Record an estimation dataset from the scenario's calibration run.
    Record {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run length in s (default: the scenario's calibration duration).
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model-error network on a dataset.
    Train {
        data: PathBuf,
        /// Output network file; a `.json` metadata sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Stop early once the full-dataset loss drops below this.
        #[arg(long, default_value_t = 0.0)]
        loss_threshold: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Loss-curve CSV (default: `<out>.loss.csv`).
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Replay the filter over a dataset and print MAE, RMSE and STD per component.
    Replay {
        data: PathBuf,
        /// Network file; without it the correction is zero (plain filter).
        #[arg(long)]
        net: Option<PathBuf>,
        /// Take filter noise and smoothing from this scenario instead of the defaults.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    scenario: PathBuf,
    #[arg(long, env = "CWBC_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "CWBC_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Admissible-set file; required when the scenario flags governed axes.
    #[arg(long)]
    moas: Option<PathBuf>,
    /// Directory with the UI bundle, served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Telemetry frames per second, at most 50.
    #[arg(long, default_value_t = 40.0)]
    telemetry_hz: f64,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn input(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn failed(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::load(path).map_err(input)
}

#[derive(Deserialize)]
struct SetsFile {
    sets: Vec<BuildConfig>,
}

fn build_configs(path: &Path) -> Result<Vec<BuildConfig>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(input)?;
    if let Ok(f) = serde_json::from_str::<SetsFile>(&text) {
        if f.sets.is_empty() {
            return Err(input(anyhow!("{}: no sets configured", path.display())));
        }
        return Ok(f.sets);
    }
    let s = Scenario::from_json(&text, &path.display().to_string())
        .map_err(|e| input(anyhow!("{}: neither a set list nor a scenario ({e})", path.display())))?;
    let axes = s.governor.governed_axes();
    if axes.is_empty() {
        return Err(input(anyhow!("{}: scenario flags no governed axes", path.display())));
    }
    Ok(axes.iter().map(|a| s.moas_config(*a)).collect())
}

fn moas_build(a: MoasBuildArgs) -> Outcome {
    let cfgs = build_configs(&a.config)?;
    if let Some(n) = a.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(input)?;
    }
    let ck = checkpoint_path(&a.out);
    if !a.resume && ck.exists() {
        std::fs::remove_file(&ck).with_context(|| format!("cannot remove stale checkpoint {}", ck.display())).map_err(input)?;
    }
    let progress = |axis, done, total| log::info!("axis {axis}: {done}/{total}");
    match build_resumable(&cfgs, &a.out, a.chunk, a.max_chunks, progress) {
        Ok(BuildOutcome::Complete(bundle, reports)) => {
            for r in &reports {
                println!("{r}");
            }
            let points: usize = bundle.sets.iter().map(|s| s.len()).sum();
            println!("wrote {} ({} sets, {points} points)", a.out.display(), bundle.sets.len());
            Ok(())
        }
        Ok(BuildOutcome::Interrupted { chunks_done }) => {
            println!("stopped after {chunks_done} chunks; checkpoint {} (rerun with --resume)", ck.display());
            Err(Failure { code: 3, err: anyhow!("build incomplete") })
        }
        Err(e @ MoasError::Empty { .. }) => Err(failed(e)),
        Err(e @ (MoasError::Io { .. } | MoasError::CheckpointMismatch { .. })) => Err(input(e)),
        Err(e) => Err(input(e)),
    }
}

/// `require_moas` is false when the governor can never engage, in which case
/// a missing set is built in place from the scenario's grid settings.
fn resources(
    s: &Scenario,
    scenario_path: &Path,
    moas: Option<&Path>,
    net: Option<&Path>,
    require_moas: bool,
) -> Result<SimResources, Failure> {
    let axes = s.governor.governed_axes();
    let bundle = match moas {
        Some(p) => {
            let b = MoasBundle::load(p).map_err(input)?;
            if let Some(a) = axes.iter().find(|a| b.get(**a).is_none()) {
                return Err(input(anyhow!("{} has no set for governed axis {a}", p.display())));
            }
            Some(Arc::new(b))
        }
        None if require_moas && !axes.is_empty() => {
            return Err(input(anyhow!(
                "scenario governs axes {:?}; pass --moas (build one with `cwbc moas-build {} --out FILE`)",
                axes.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
                scenario_path.display()
            )))
        }
        None => None,
    };
    let mut s = s.clone();
    if let Some(n) = net {
        s.estimator.net_path = Some(n.display().to_string());
    }
    if s.estimator.mode == "kf+nn" && s.estimator.net_path.is_none() {
        log::info!("no network configured; training one from the calibration run");
    }
    prepare_resources(&s, scenario_path.parent(), bundle).map_err(input)
}

fn sim_run(a: SimRunArgs) -> Outcome {
    let mut s = load_scenario(&a.scenario)?;
    match a.governor {
        Some(OnOff::On) => s.governor.enabled = true,
        Some(OnOff::Off) => s.governor.enabled = false,
        None => {}
    }
    let res = resources(&s, &a.scenario, a.moas.as_deref(), a.net.as_deref(), s.governor.enabled)?;
    let (m, rows) = run_scenario(&s, &res).map_err(failed)?;
    if let Some(p) = &a.log {
        write_log(p, &rows).map_err(input)?;
    }
    println!("scenario {} ({} s, estimator {}, governor {})", s.name, s.duration, s.estimator.mode, if s.governor.enabled { "on" } else { "off" });
    print!("{}", m.summary());
    if a.assert_safe && m.total_violations() > 0 {
        return Err(failed(anyhow!("{} ticks violated constraints", m.violating_ticks)));
    }
    Ok(())
}

fn dataset(path: &Path) -> Result<Vec<cwbc_core::estimator::dataset::EstimationRow>, Failure> {
    read_dataset(path).map_err(|e| match e {
        DatasetError::Schema { .. } | DatasetError::Value { .. } | DatasetError::Empty => failed(e),
        DatasetError::Csv { .. } => input(e),
    })
}

fn estimator_config(scenario: Option<&Path>, net: Option<Arc<ModelErrorNet>>) -> Result<EstimatorConfig, Failure> {
    let s = match scenario {
        Some(p) => load_scenario(p)?,
        None => Scenario::idle(1.0),
    };
    let e = &s.estimator;
    Ok(EstimatorConfig {
        params: e.body,
        noise: e.noise.clone(),
        alpha_lp: e.alpha_lp,
        initial_covariance: e.initial_covariance,
        net,
    })
}

fn estimate(c: EstimateCmd) -> Outcome {
    match c {
        EstimateCmd::Record { scenario, out, duration, seed } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(d) = duration {
                s.estimator.calibration.duration = d;
            }
            if let Some(seed) = seed {
                s.estimator.calibration.seed = seed;
            }
            let rows = record_calibration(&s).map_err(input)?;
            write_dataset(&out, &rows).map_err(input)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        EstimateCmd::Train { data, out, epochs, loss_threshold, seed, loss_curve } => {
            let rows = dataset(&data)?;
            let cfg = cwbc_core::estimator::TrainConfig { max_epochs: epochs, loss_threshold, seed, ..Default::default() };
            let (net, report) = ModelErrorNet::train(&training_samples(&rows), &cfg).map_err(failed)?;
            net.save(&out, Some(&report)).map_err(input)?;
            let curve = loss_curve.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".loss.csv");
                PathBuf::from(p)
            });
            let mut text = String::from("epoch,loss\n");
            for (i, l) in report.loss_curve.iter().enumerate() {
                text.push_str(&format!("{},{l}\n", i + 1));
            }
            std::fs::write(&curve, text).with_context(|| format!("cannot write {}", curve.display())).map_err(input)?;
            println!(
                "trained {} epochs on {} rows: loss {:.6e} -> {:.6e}{}",
                report.epochs,
                rows.len(),
                report.initial_loss,
                report.final_loss,
                if report.converged { " (threshold reached)" } else { "" }
            );
            println!("wrote {} and {}", out.display(), curve.display());
            Ok(())
        }
        EstimateCmd::Replay { data, net, scenario } => {
            let rows = dataset(&data)?;
            let model = match &net {
                Some(p) => ModelErrorNet::load(p).map_err(input)?,
                None => ModelErrorNet::zeroed(),
            };
            let model = Arc::new(model);
            let cfg = estimator_config(scenario.as_deref(), net.as_ref().map(|_| model.clone()))?;
            let est = replay(&rows, &model, &cfg).map_err(failed)?;
            let truth: Vec<_> = rows.iter().map(|r| r.x_true).collect();
            let stats = ErrorStats::compute(&est, &truth);
            println!("{} rows, correction {}", rows.len(), net.as_ref().map_or("none".to_string(), |p| p.display().to_string()));
            print!("{}", stats.table());
            println!("linear RMSE {:.6}", stats.linear_rmse());
            Ok(())
        }
    }
}

fn serve(a: ServeArgs) -> Outcome {
    let s = load_scenario(&a.scenario)?;
    // The governor can be toggled on live, so a set is always required.
    let res = resources(&s, &a.scenario, a.moas.as_deref(), None, true)?;
    let cfg = SessionConfig { telemetry_hz: a.telemetry_hz, speed: a.speed, ..SessionConfig::default() };
    let session = Arc::new(Session::start(s, res, cfg).map_err(input)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(input)?;
    let rt = tokio::runtime::Runtime::new().map_err(input)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("cannot bind {addr}")).map_err(input)?;
        println!("serving session {} on http://{}", session.info().id, listener.local_addr().map_err(input)?);
        cwbc_service::serve(listener, router(session, a.ui_dir)).await.map_err(failed)
    })
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::MoasBuild(a) => moas_build(a),
        Cmd::SimRun(a) => sim_run(a),
        Cmd::Estimate(c) => estimate(c),
        Cmd::Serve(a) => serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", error_chain(&f.err));
            ExitCode::from(f.code)
        }
    }
}
