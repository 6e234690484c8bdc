use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cono_core::config::{load_config, PredictorKind, RunConfig};
use cono_core::engine::shuffle::{extending_order, internal_order};
use cono_core::eval::suite::{run_suite, SuiteOptions};
use cono_core::export::{build_predictor, generate};
use cono_core::latfile;

#[derive(Parser)]
#[command(name = "cono", version, about = "Long-video generation by look-back noise guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Analytic,
    Bridge,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline and write frames, records and a manifest.
    Generate {
        /// Run config or a previous run's manifest.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Option<PredictorArg>,
        /// Child command line, or tcp://host:port.
        #[arg(long)]
        bridge_cmd: Option<String>,
    },
    /// Run the oracle suite and print a JSON report.
    Verify {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fewer paired seeds and Monte-Carlo samples.
        #[arg(long)]
        quick: bool,
    },
    /// Print the header and statistics of a .lat file.
    Inspect { path: PathBuf },
    /// Print the extending (and, with --n2, internal) shuffle orders.
    ShuffleDemo {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n1: usize,
        #[arg(long)]
        n2: Option<usize>,
    },
}

fn cmd_generate(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    predictor: Option<PredictorArg>,
    bridge_cmd: Option<String>,
) -> Result<bool> {
    let (mut cfg, base) = match &config {
        Some(path) => (
            load_config(path).with_context(|| format!("loading {}", path.display()))?,
            path.parent().map(Path::to_path_buf),
        ),
        None => (RunConfig::with_prompts(&["a", "b"]), None),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = predictor {
        cfg.predictor = match p {
            PredictorArg::Analytic => PredictorKind::Analytic,
            PredictorArg::Bridge => PredictorKind::Bridge,
        };
    }
    if bridge_cmd.is_some() {
        cfg.bridge_cmd = bridge_cmd;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.validate(base.as_deref())?;
    let mut predictor = build_predictor(&cfg)?;
    let manifest = generate(&cfg, base.as_deref(), &out, predictor.as_mut())?;
    println!(
        "{} frames, sha256 {}, manifest {}",
        manifest.final_frames,
        manifest.final_sha256,
        out.join("manifest.json").display()
    );
    Ok(true)
}

fn cmd_verify(report: Option<PathBuf>, seed: u64, quick: bool) -> Result<bool> {
    let mut opts = SuiteOptions { seed, ..SuiteOptions::default() };
    if quick {
        opts.paired_seeds = 3;
        opts.mc_cases = 5;
        opts.mc_samples = 20_000;
    }
    let result = run_suite(&opts)?;
    for c in &result.checks {
        eprintln!("{} {} ({} ms)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.elapsed_ms);
    }
    let json = serde_json::to_string_pretty(&result)?;
    match report {
        Some(path) => {
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
            info!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(result.passed)
}

fn cmd_inspect(path: &Path) -> Result<bool> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let header = latfile::read_header(&mut BufReader::new(file))?;
    let clip = latfile::read(path)?;
    let data = clip.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (min, max) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = std::io::stdout().lock();
    writeln!(out, "dims {}", header.dims)?;
    writeln!(out, "dtype {}", header.dtype)?;
    writeln!(out, "elements {}", data.len())?;
    writeln!(out, "min {min} max {max} mean {mean:.6} std {:.6}", var.sqrt())?;
    Ok(true)
}

fn cmd_shuffle_demo(n: usize, n1: usize, n2: Option<usize>) -> Result<bool> {
    if n == 0 {
        bail!("--n must be >= 1");
    }
    let join = |v: Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    println!("{}", join(extending_order(n, n1)?));
    if let Some(n2) = n2 {
        println!("{}", join(internal_order(n, n1, n2)?));
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, seed, out, predictor, bridge_cmd } => {
            cmd_generate(config, seed, out, predictor, bridge_cmd)
        }
        Command::Verify { report, seed, quick } => cmd_verify(report, seed, quick),
        Command::Inspect { path } => cmd_inspect(&path),
        Command::ShuffleDemo { n, n1, n2 } => cmd_shuffle_demo(n, n1, n2),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
