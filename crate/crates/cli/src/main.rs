use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand};
use dir_tir_core::harness::{sweep_suffix, write_report, BatchReport, Experiment, RunConfig};
use dir_tir_core::{FusionPolicy, SyntheticWorld};
use dir_tir_server::stub::{stub_router, StubState};
use tracing::{error, info};

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "dir-tir", version, about = "Conversational text-to-image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of simulated sessions and write metric curves.
    Run(RunArgs),
    /// Serve the live-session HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Serve a synthetic world over the remote oracle wire protocol.
    StubServer {
        #[arg(long, default_value_t = 10)]
        bits: usize,
        #[arg(long, default_value_t = 2)]
        diffs_per_answer: usize,
        #[arg(long, default_value = "127.0.0.1:9090")]
        bind: String,
        /// Answer the first N requests with 503.
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
    },
    /// Write a synthetic world's gallery as a manifest plus embedding sidecar.
    SynthWorld {
        #[arg(long)]
        bits: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep only a seeded sample of this many images.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Fusion policy `D,I` with D + I = 10.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    stop_on_hit: bool,
    /// Dialog-module candidates only, policy (10,0).
    #[arg(long, conflicts_with_all = ["policy", "sweep"])]
    drm_only: bool,
    /// One batch per policy from (10,0) to (0,10).
    #[arg(long, conflicts_with = "policy")]
    sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Serve { config, bind } => serve(config, bind),
        Command::StubServer {
            bits,
            diffs_per_answer,
            bind,
            fail_first,
        } => stub_server(bits, diffs_per_answer, &bind, fail_first),
        Command::SynthWorld {
            bits,
            out,
            sample,
            seed,
        } => synth_world(bits, out, sample, seed),
    }
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(args: RunArgs) -> ExitCode {
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if args.drm_only {
        cfg.policy = FusionPolicy::dialog_only().to_string();
    }
    cfg.stop_on_hit |= args.stop_on_hit;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let experiment = match Experiment::from_config(&cfg) {
        Ok(e) => e,
        Err(e) => return config_error(e),
    };

    let batches: Vec<(BatchReport, String)> = if args.sweep {
        match experiment.sweep() {
            Ok(rs) => rs
                .into_iter()
                .map(|r| {
                    let suffix = sweep_suffix(r.policy);
                    (r, suffix)
                })
                .collect(),
            Err(e) => return fatal(e),
        }
    } else {
        let policy = match cfg.fusion_policy() {
            Ok(p) => p,
            Err(e) => return config_error(e),
        };
        match experiment.run(policy) {
            Ok(r) => vec![(r, String::new())],
            Err(e) => return fatal(e),
        }
    };

    let mut failures = 0;
    for (report, suffix) in &batches {
        failures += report.failures();
        match write_report(&cfg.out_dir, report, suffix) {
            Ok(paths) => {
                let last = report.curve.last();
                println!(
                    "policy {}: {} sessions, {} failed, final recall@10 {:.3}, hits@10 {:.3} -> {}",
                    report.policy,
                    report.sessions.len(),
                    report.failures(),
                    last.map_or(0.0, |m| m.mean_recall10),
                    last.map_or(0.0, |m| m.mean_hits10),
                    paths[0].display(),
                );
            }
            Err(e) => return fatal(e),
        }
    }
    if failures > 0 {
        eprintln!("{failures} session(s) failed; see metrics jsonl for details");
        return ExitCode::from(EXIT_PARTIAL);
    }
    ExitCode::SUCCESS
}

fn fatal(e: impl std::fmt::Display) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::FAILURE
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

fn serve(config: PathBuf, bind: Option<String>) -> ExitCode {
    let mut cfg = match RunConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(b) = bind {
        cfg.server.bind = b;
    }
    let (_, router) = match dir_tir_server::build_service(&cfg) {
        Ok(s) => s,
        Err(e) => return config_error(e),
    };
    let result = runtime().and_then(|rt| {
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind(&cfg.server.bind).await?;
            info!(addr = %listener.local_addr()?, "serving");
            println!("listening on http://{}", listener.local_addr()?);
            dir_tir_server::serve(listener, router).await
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fatal(e),
    }
}

fn stub_server(bits: usize, diffs: usize, bind: &str, fail_first: usize) -> ExitCode {
    if !(1..=24).contains(&bits) {
        return config_error("bits must be in 1..=24");
    }
    let state = StubState::new(SyntheticWorld::new(bits).with_diffs_per_answer(diffs));
    state.faults().fail_first.store(fail_first, Ordering::SeqCst);
    let result = runtime().and_then(|rt| {
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind(bind).await?;
            println!("stub oracle server on http://{}", listener.local_addr()?);
            axum_serve(listener, state).await
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fatal(e),
    }
}

async fn axum_serve(listener: tokio::net::TcpListener, state: StubState) -> std::io::Result<()> {
    dir_tir_server::serve(listener, stub_router(state)).await
}

fn synth_world(bits: usize, out: PathBuf, sample: Option<usize>, seed: u64) -> ExitCode {
    if !(1..=24).contains(&bits) {
        return config_error("bits must be in 1..=24");
    }
    let w = SyntheticWorld::new(bits);
    let g = match sample {
        Some(n) if n == 0 || n > w.image_count() => {
            return config_error(format!("sample must be in 1..={}", w.image_count()))
        }
        Some(n) => w.sampled_gallery(n, seed),
        None => w.gallery(),
    };
    match g.write_manifest(&out) {
        Ok(()) => {
            println!("wrote {} images (dim {}) to {}", g.len(), g.dim(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fatal(e),
    }
}
