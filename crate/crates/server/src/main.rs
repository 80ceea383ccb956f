use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use eraser_core::service::{EraseConfig, JobService, ServiceOptions};
use eraser_core::toy::PaletteSegmenter;
use eraser_core::tuning::TrainConfig;
use eraser_server::cli::{self, DatasetArgs, TrainArgs};
use eraser_server::{router, AppState};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "eraser", about = "Diffusion-based object erasure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Erase the masked region of one image.
    Erase {
        #[arg(long)]
        image: PathBuf,
        /// PNG mask (nonzero = erase) or RLE JSON.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
    },
    /// Run the HTTP job API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 64)]
        capacity: usize,
    },
    /// Build an object-removal dataset from toy scenes or palette PNGs.
    BuildDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        shard_size: usize,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Side of generated toy scenes.
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Tune the placeholder token and adapters on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Model directory receiving model.json and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        inversion_steps: u64,
    },
    /// Score results against references.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Erase { image, mask, out, strength, seed, steps, guidance } => {
            let eraser = cli::eraser_from_env()?;
            let cfg = EraseConfig { strength, seed, inference_steps: steps, guidance_scale: guidance, ..Default::default() };
            cli::run_erase(&eraser, &image, &mask, &out, &cfg)?;
            log::info!("wrote {}", out.display());
        }
        Command::Serve { port, store, host, capacity } => {
            let eraser = cli::eraser_from_env()?;
            let opts = ServiceOptions { capacity, ..Default::default() };
            let jobs = Arc::new(JobService::open(eraser, &store, opts)?);
            let state = AppState { jobs: jobs.clone(), segmenter: Arc::new(PaletteSegmenter::default()) };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
            jobs.shutdown();
        }
        Command::BuildDataset { out, count, seed, shard_size, images, size } => {
            let manifest = cli::run_build_dataset(&DatasetArgs { out: out.clone(), count, seed, shard_size, images, size })?;
            log::info!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::Train { dataset, steps, lr, rank, seed, resume, out, inversion_steps } => {
            let config = TrainConfig { steps, lr, rank, seed, inversion_steps, ..Default::default() };
            let ckpt = cli::run_train(&TrainArgs { dataset, out: out.clone(), config, resume })?;
            log::info!("trained to step {}; checkpoints in {}", ckpt.step, out.display());
        }
        Command::Eval { results, refs, out } => {
            let report = cli::run_eval(&results, &refs, &out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
