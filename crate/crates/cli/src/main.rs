use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use proseco_api as api;
use proseco_client::{Client, ClientError};
use proseco_core::RunConfig;

/// Object-proposal contrastive pretraining for query-based detectors.
///
/// Every command is a request to a proseco service: the one named by
/// --server, or otherwise one started in-process on a free local port.
#[derive(Parser)]
#[command(name = "proseco", version)]
struct Cli {
    /// Service root URL, e.g. http://127.0.0.1:7878.
    #[arg(long, global = true, env = "PROSECO_SERVER")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Selective Search over every .ppm image of a directory and write
    /// a proposal cache plus a `<cache>.manifest` listing.
    SsPrecompute {
        /// Directory of .ppm images; the file stem is the image id.
        dir: PathBuf,
        /// Cache file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pretraining job and stream its metrics.
    Pretrain {
        /// JSON run configuration. Relative paths inside it are taken from
        /// the config file's directory; out_dir defaults to `<stem>-run`
        /// there.
        #[arg(long)]
        config: PathBuf,
        /// Seconds between progress polls.
        #[arg(long, default_value_t = 0.2)]
        poll: f64,
    },
    /// Run the built-in verification suites and print pass counts.
    Verify {
        /// One of all, matching, objectives, geometry, grad.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Seed for the randomized cases.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the stored boxes of one image of a proposal cache.
    InspectCache {
        cache: PathBuf,
        image_id: String,
        /// Print only the box count.
        #[arg(long)]
        count_only: bool,
    },
    /// Split a metrics CSV into one `step,<metric>` CSV per metric.
    ExportPlots {
        metrics: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the service in the foreground.
    Serve {
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
}

/// Failure with the exit code it maps to: 1 for contract and config
/// problems, 2 for I/O.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn contract(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Api { body, .. } => match body.kind {
                api::ErrorKind::Io | api::ErrorKind::Format => Failure::io(e.to_string()),
                _ => Failure::contract(e.to_string()),
            },
            ClientError::Transport { .. } => Failure::io(e.to_string()),
            ClientError::Decode { .. } => Failure::contract(e.to_string()),
        }
    }
}

impl From<proseco_core::Error> for Failure {
    fn from(e: proseco_core::Error) -> Self {
        match e.kind() {
            proseco_core::ErrorKind::Io | proseco_core::ErrorKind::Format => Failure::io(e.to_string()),
            _ => Failure::contract(e.to_string()),
        }
    }
}

fn absolute(p: &Path) -> Result<String, Failure> {
    std::path::absolute(p)
        .map(|p| p.display().to_string())
        .map_err(|e| Failure::io(format!("{}: {e}", p.display())))
}

/// Loads and validates the config locally and anchors its paths, so the
/// service gets a self-contained request.
fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let path = std::path::absolute(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::load(&path)?;
    let base = path.parent().unwrap_or(Path::new("/"));
    cfg.resolve_paths(base);
    if cfg.out_dir.is_none() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("proseco");
        cfg.out_dir = Some(base.join(format!("{stem}-run")));
    }
    Ok(cfg)
}

async fn connect(server: Option<String>) -> Result<Client, Failure> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| Failure::io(format!("cannot start local service: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Failure::io(e.to_string()))?;
    tokio::spawn(proseco_service::serve(listener));
    Ok(Client::new(format!("http://{addr}")))
}

async fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Serve { addr } = &cli.command {
        tracing_subscriber::fmt().with_writer(std::io::stderr).init();
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Failure::io(format!("{addr}: {e}")))?;
        return proseco_service::serve(listener).await.map_err(|e| Failure::io(e.to_string()));
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::SsPrecompute { dir, out } => {
            let resp = client.ss_precompute(&absolute(&dir)?, &absolute(&out)?).await?;
            println!("{} images, {} skipped", resp.images, resp.skipped.len());
            for id in &resp.skipped {
                println!("skipped {id}");
            }
            println!("cache: {}", resp.cache);
            println!("manifest: {}", resp.manifest);
        }
        Command::Pretrain { config, poll } => {
            let cfg = load_config(&config)?;
            let body = serde_json::to_value(&cfg).map_err(|e| Failure::contract(e.to_string()))?;
            let job = client.start_pretrain(body).await?;
            let poll = Duration::from_secs_f64(poll.max(0.01));
            let done = client
                .wait_job(job.job_id, poll, |r| {
                    println!(
                        "step {:>6}  loss {:.5}  contrast {:.5}  coord {:.5}  giou {:.5}  cosine {:.4}",
                        r.step, r.loss_total, r.loss_contrast, r.loss_coord, r.loss_giou, r.matched_cosine
                    );
                })
                .await?;
            if let Some(err) = done.error {
                let failure = ClientError::Api { status: 0, body: err };
                return Err(failure.into());
            }
            if let Some(result) = done.result {
                println!("finished at step {}", result.final_step);
                if let Some(p) = result.metrics_path {
                    println!("metrics: {p}");
                }
                if let Some(p) = result.checkpoint_path {
                    println!("checkpoint: {p}");
                }
            }
        }
        Command::Verify { suite, seed } => {
            let resp = client.verify(&suite, seed).await?;
            print!("{}", resp.report);
            if !resp.ok {
                return Err(Failure::contract("verification failed"));
            }
        }
        Command::InspectCache { cache, image_id, count_only } => {
            let resp = client.inspect_cache(&absolute(&cache)?, &image_id).await?;
            println!("{}: {} boxes", resp.image_id, resp.box_count);
            if !count_only {
                for [cx, cy, w, h] in resp.boxes {
                    println!("{cx:.6} {cy:.6} {w:.6} {h:.6}");
                }
            }
        }
        Command::ExportPlots { metrics, out } => {
            let resp = client.export_plots(&absolute(&metrics)?, &absolute(&out)?).await?;
            for f in resp.files {
                println!("{f}");
            }
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
