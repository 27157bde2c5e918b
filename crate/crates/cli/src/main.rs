use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use voxprompt_core::backend::serve_runtime_request;
use voxprompt_core::bench::{prompts_around, report_table, time_backend, time_volume, BenchConfig};
use voxprompt_core::read_nifti;
use voxprompt_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "voxprompt", version, about = "Promptable volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Bind address.
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// TOML config with backends, defaults and caps.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time encode, decode, a cold interaction and the ensemble.
    Bench {
        /// Backend to time; repeat for a comparison table.
        #[arg(long = "backend", required = true)]
        backends: Vec<String>,
        /// Phantom dims as `i,j,k`.
        #[arg(long, value_parser = parse_dims, default_value = "128,128,128")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Decode ensemble members in parallel.
        #[arg(long)]
        parallel: bool,
        /// Time on this NIfTI file instead of a phantom; prompts go around
        /// its centre voxel.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Newline-delimited JSON records go here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one inference-runtime request from stdin for a reference
    /// artifact. Failures are reported inside the JSON response.
    Runtime { artifact: PathBuf },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [i, j, k] if i > 0 && j > 0 && k > 0 => Ok([i, j, k]),
        _ => Err("expected three positive integers `i,j,k`".into()),
    }
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig> {
    match path {
        Some(p) => ServiceConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ServiceConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Runtime { .. }) {
        tracing_subscriber::fmt()
            .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
            .with_writer(std::io::stderr)
            .init();
    }
    match cli.command {
        Command::Serve { port, host, config } => {
            let config = load_config(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(voxprompt_service::serve(config, SocketAddr::new(host, port)))?;
        }
        Command::Bench {
            backends,
            dims,
            reps,
            warmup,
            prompts,
            seed,
            parallel,
            input,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let registry = config.build_registry()?;
            let mut bench = BenchConfig {
                prompts,
                repetitions: reps,
                warmup,
                seed,
                ensemble: config.engine.ensemble.clone(),
            };
            bench.ensemble.parallel = parallel;
            let volume = match &input {
                Some(p) => {
                    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    Some(read_nifti(&bytes)?.0)
                }
                None => None,
            };
            let mut reports = Vec::new();
            for name in &backends {
                tracing::info!(backend = %name, "timing");
                let r = match &volume {
                    Some(v) => {
                        let centre = v.dims().map(|d| d / 2);
                        let p = prompts_around(centre, v.dims(), prompts.max(1));
                        time_volume(&registry, name, v, &p, &bench, &config.engine)
                    }
                    None => time_backend(&registry, name, dims, &bench, &config.engine),
                }
                .with_context(|| format!("backend `{name}`"))?;
                reports.extend(r);
            }
            for r in reports.iter().filter(|r| r.is_noisy()) {
                tracing::warn!(
                    backend = %r.backend,
                    phase = r.phase.as_str(),
                    cv = r.std / r.mean,
                    "noisy timing"
                );
            }
            let (table, records) = report_table(&reports);
            print!("{table}");
            std::fs::write(&out, records).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Runtime { artifact } => {
            let mut request = Vec::new();
            std::io::stdin().read_to_end(&mut request)?;
            let response = serve_runtime_request(&artifact, &request);
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer(&mut stdout, &response)?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}
