//! `sarad` command line. Every subcommand is a request to the HTTP service;
//! without `--server` an embedded service rooted at the working directory
//! is started for the duration of the command.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sarad_client::Client;
use sarad_core::api::*;
use sarad_core::harness::{RunConfig, Variant, PLOT_WINDOW};
use sarad_core::safety::RiskVariant;
use sarad_core::sim::SimConfig;

#[derive(Parser)]
#[command(name = "sarad", version, about = "Advisor-guided, safety-gated DQN training for highway driving")]
struct Cli {
    /// Base URL of a running service (e.g. http://127.0.0.1:8717). Paths
    /// are then interpreted on the service's side.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Directory that outputs go to and that relative inputs are read from.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its metrics log and checkpoint.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON run configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Simulator `key = value` file replacing the configuration's sim block.
        #[arg(long)]
        sim_config: Option<PathBuf>,
        /// Pre-trained risk model (relative to --out) instead of training one.
        #[arg(long)]
        risk_model: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Roll out the risky policy and write a labelled risk dataset.
    CollectRiskData {
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 2000)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sim_config: Option<PathBuf>,
        /// Dataset file name inside --out.
        #[arg(long, default_value = "risk_dataset.jsonl")]
        dataset: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Fit a risk model on a dataset and report held-out quality.
    TrainRiskModel {
        #[arg(long, default_value = "risk_dataset.jsonl")]
        dataset: PathBuf,
        #[arg(long, default_value = "gbdt_lr")]
        variant: RiskVariant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model file name inside --out (default risk_model_<variant>.json).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Moving-average charts of episode length, reward per step and total reward.
    Plot {
        /// Metrics logs (relative to --out); default every *.csv in --out.
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = PLOT_WINDOW)]
        window: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Per-variant means over whole runs and over a final window of steps.
    Compare {
        logs: Vec<PathBuf>,
        /// Final window in environment steps.
        #[arg(long, default_value_t = 40_000)]
        window: u64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        bind: String,
        /// Directory relative request paths resolve against.
        #[arg(long, default_value = ".")]
        root: PathBuf,
    },
}

fn read_sim(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SimConfig::from_kv_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_config(
    config: Option<&Path>,
    sim_config: Option<&Path>,
    variant: Option<Variant>,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = sim_config {
        cfg.sim = read_sim(p)?;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(s) = steps {
        cfg.total_env_steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

async fn connect(server: Option<&str>) -> Result<Client> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.context("binding the embedded service")?;
    let addr = listener.local_addr()?;
    let root = std::env::current_dir()?;
    tokio::spawn(async move {
        if let Err(e) = sarad_server::serve(listener, root).await {
            log::error!("embedded service stopped: {e}");
        }
    });
    Ok(Client::new(format!("http://{addr}")))
}

async fn execute(cli: Cli) -> Result<()> {
    if let Command::Serve { bind, root } = &cli.command {
        let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
        eprintln!("serving on http://{} with root {}", listener.local_addr()?, root.display());
        sarad_server::serve(listener, root.clone()).await?;
        return Ok(());
    }
    let client = connect(cli.server.as_deref()).await?;
    client.health().await.with_context(|| format!("service at {} is not reachable", client.base()))?;
    match cli.command {
        Command::Train { variant, steps, seed, config, sim_config, risk_model, out } => {
            let mut cfg = run_config(config.as_deref(), sim_config.as_deref(), variant, steps, seed)?;
            if let Some(m) = risk_model {
                cfg.safety.model_path = Some(out.out.join(m));
            }
            let job = client.start_training(&TrainRequest { config: cfg.clone(), out_dir: out.out }).await?;
            eprintln!("run {} started: {} for {} steps, seed {}", job.id, cfg.variant, cfg.total_env_steps, cfg.seed);
            let mut last = 0;
            let status = client
                .wait_for_run(job.id, Duration::from_millis(500), |s| {
                    if let Some(p) = s.progress {
                        if p.global_step != last && p.global_step % 10_000 == 0 {
                            eprintln!("  step {}/{} ({} episodes)", p.global_step, p.total_steps, p.episodes);
                        }
                        last = p.global_step;
                    }
                })
                .await?;
            match (status.state, status.output) {
                (JobState::Succeeded, Some(o)) => {
                    let s = &o.summary;
                    println!("metrics log: {}", o.log_path.display());
                    println!("checkpoint: {}", o.checkpoint_path.display());
                    println!("episodes: {}  collisions: {}  env steps: {}", s.episodes, s.collisions, s.env_steps);
                    println!(
                        "module calls: advisor {} discriminator {} memory {} safety {}",
                        s.calls.advisor, s.calls.discriminator, s.calls.memory, s.calls.safety
                    );
                    if let Some(r) = s.risk_report {
                        println!("risk model held-out AUC: {:.3}", r.held_out_auc);
                    }
                }
                (state, _) => bail!("run {} ended {:?}: {}", job.id, state, status.error.unwrap_or_default()),
            }
        }
        Command::CollectRiskData { episodes, per_class, seed, sim_config, dataset, out } => {
            let sim = match sim_config {
                Some(p) => read_sim(&p)?,
                None => SimConfig::default(),
            };
            let r =
                client.collect_risk_data(&CollectRequest { sim, episodes, per_class, seed, out: out.out.join(dataset) }).await?;
            println!("dataset: {}", r.dataset.display());
            println!("episodes: {} (with collision: {})", r.episodes, r.collision_episodes);
            println!("samples: {} positive, {} negative", r.positives, r.negatives);
        }
        Command::TrainRiskModel { dataset, variant, seed, model, out } => {
            let model = model.unwrap_or_else(|| PathBuf::from(format!("risk_model_{}.json", variant_name(variant))));
            let r = client
                .train_risk_model(&TrainRiskRequest { dataset: out.out.join(dataset), variant, seed, out: out.out.join(model) })
                .await?;
            println!("model: {}", r.model.display());
            println!(
                "train {} / test {}: held-out AUC {:.4}, accuracy {:.4}",
                r.report.train_size, r.report.test_size, r.report.held_out_auc, r.report.held_out_accuracy
            );
        }
        Command::Plot { logs, window, out } => {
            let (logs, log_dir) = log_selection(&out.out, logs);
            let r = client.plot(&PlotRequest { logs, log_dir, out_dir: out.out.join("plots"), window }).await?;
            if r.files.is_empty() {
                println!("no episodes logged; nothing plotted");
            }
            for f in r.files {
                println!("{}", f.display());
            }
        }
        Command::Compare { logs, window, out } => {
            let (logs, log_dir) = log_selection(&out.out, logs);
            let r = client.compare(&CompareRequest { logs, log_dir, window }).await?;
            print!("{}", r.table);
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn variant_name(v: RiskVariant) -> &'static str {
    match v {
        RiskVariant::Lr => "lr",
        RiskVariant::GbdtLr => "gbdt_lr",
    }
}

/// Explicit logs resolve against `out`; none means every log in `out`.
fn log_selection(out: &Path, logs: Vec<PathBuf>) -> (Vec<PathBuf>, Option<PathBuf>) {
    if logs.is_empty() {
        (Vec::new(), Some(out.to_path_buf()))
    } else {
        (logs.into_iter().map(|l| out.join(l)).collect(), None)
    }
}

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = execute(Cli::parse()).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
