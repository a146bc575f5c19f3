//! Command-line surface: training, adaptation and verification.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use log::info;

use crate::config::parse_config;
use crate::data::{encode_output, list_images, load_batch};
use crate::error::{Error, Result};
use crate::networks::{Networks, SpatialCode};
use crate::pipeline::{adapt, adapt_multi, gradient_check, train, DEFAULT_NUM_VIEWS};
use crate::verify::run_invariants;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Images adapted per forward pass.
const CHUNK: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "gadan", version, about = "Geometry-aware unpaired image domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on two unpaired image folders.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt every image in a folder once (X → Y).
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt every image in a folder under several spatial codes.
    AdaptMulti {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NUM_VIEWS)]
        num_views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with finite differences.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the property suite.
    Invariants {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::EmptyDomain(_) | Error::KindMismatch { .. } | Error::ShapeMismatch(_)
    )
}

fn output_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// `<stem>_view<k>.png`, with `k` counted from 0.
pub fn view_name(stem: &str, k: usize) -> String {
    format!("{stem}_view{k}.png")
}

fn load_nets(checkpoint: &Path) -> Result<Networks> {
    Networks::load(checkpoint, DType::F32, &Device::Cpu)
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDomain(dir.to_path_buf()));
    }
    Ok(files)
}

/// Adapt every image in `input`, writing `<stem>.png` files to `out`.
pub fn adapt_folder(checkpoint: &Path, input: &Path, out: &Path, seed: u64) -> Result<usize> {
    let nets = load_nets(checkpoint)?;
    let cfg = &nets.config;
    let files = inputs(input)?;
    prepare_out(out)?;
    let code = SpatialCode::seeded(seed, 1, cfg.code_dim, nets.dtype(), nets.device())?;
    let mut written = 0;
    for chunk in files.chunks(CHUNK) {
        let batch = load_batch(chunk, cfg.image_size, cfg.channels, nets.dtype(), nets.device())?;
        let adapted = adapt(&nets, &batch, &code)?;
        for (i, path) in chunk.iter().enumerate() {
            encode_output(&adapted.select(&[i])?, &out.join(format!("{}.png", output_stem(path))))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Adapt every image in `input` under `n` seeded codes, writing
/// `<stem>_view<k>.png` files to `out`.
pub fn adapt_multi_folder(checkpoint: &Path, input: &Path, out: &Path, n: usize, seed: u64) -> Result<usize> {
    let nets = load_nets(checkpoint)?;
    let cfg = &nets.config;
    let files = inputs(input)?;
    prepare_out(out)?;
    let mut written = 0;
    for chunk in files.chunks(CHUNK) {
        let batch = load_batch(chunk, cfg.image_size, cfg.channels, nets.dtype(), nets.device())?;
        let views = adapt_multi(&nets, &batch, n, seed)?;
        for (k, view) in views.iter().enumerate() {
            for (i, path) in chunk.iter().enumerate() {
                encode_output(&view.select(&[i])?, &out.join(view_name(&output_stem(path), k)))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { config, resume } => {
            let cfg = parse_config(&config)?;
            let ckpt = train(&cfg, resume.as_deref())?;
            info!("finished at step {}", ckpt.step()?);
            Ok(true)
        }
        Command::Adapt {
            checkpoint,
            input,
            out,
            seed,
        } => {
            let n = adapt_folder(&checkpoint, &input, &out, seed)?;
            println!("wrote {n} adapted images to {}", out.display());
            Ok(true)
        }
        Command::AdaptMulti {
            checkpoint,
            input,
            out,
            num_views,
            seed,
        } => {
            let n = adapt_multi_folder(&checkpoint, &input, &out, num_views, seed)?;
            println!("wrote {n} adapted images to {}", out.display());
            Ok(true)
        }
        Command::CheckGrads { seed } => {
            let report = gradient_check(seed);
            println!("{report}");
            Ok(report.passed)
        }
        Command::Invariants { seed } => {
            let results = run_invariants(seed);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code: 0 success, 1 usage or validation error, 2
/// runtime failure (including failed checks).
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            if is_validation(&e) {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// Configure logging from `GADAN_LOG_LEVEL` (error, warn, info, debug).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GADAN_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}
