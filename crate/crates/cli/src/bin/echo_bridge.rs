//! Reference bridge peer: serves the analytic toy predictor over the wire
//! protocol on stdin/stdout, or on a TCP listener with `--listen`.

use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use log::{info, warn};

use cono_core::config::{load_config, RunConfig};
use cono_core::denoiser::bridge::serve;
use cono_core::denoiser::AnalyticPredictor;

#[derive(Parser)]
#[command(name = "cono-echo-bridge", version)]
struct Args {
    /// Run config supplying schedule, frame shape, sigmas and prompt library.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Serve TCP connections on this address instead of stdio.
    #[arg(long)]
    listen: Option<String>,
    /// With --listen, exit after this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONO_LOG", "warn")).init();
    let args = Args::parse();
    let (cfg, base) = match &args.config {
        Some(p) => (load_config(p)?, p.parent().map(|b| b.to_path_buf())),
        None => (RunConfig::with_prompts(&["a"]), None),
    };
    let library = cfg.library(base.as_deref())?;
    let mut predictor =
        AnalyticPredictor::new(cfg.schedule()?, cfg.dims()?, cfg.sigma0, cfg.sigma_uncond)?;

    match args.listen {
        None => {
            let stats = serve(
                &mut BufReader::new(std::io::stdin().lock()),
                &mut BufWriter::new(std::io::stdout().lock()),
                &mut predictor,
                &library,
            )?;
            info!("session closed after {} predicts", stats.predicts);
        }
        Some(addr) => {
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            for (i, conn) in listener.incoming().enumerate() {
                let stream = conn?;
                let mut r = BufReader::new(stream.try_clone()?);
                let mut w = BufWriter::new(stream);
                match serve(&mut r, &mut w, &mut predictor, &library) {
                    Ok(stats) => info!("connection closed after {} predicts", stats.predicts),
                    Err(e) => warn!("connection ended with error: {e}"),
                }
                if args.max_connections.is_some_and(|m| i + 1 >= m) {
                    break;
                }
            }
        }
    }
    Ok(())
}
