//! The `fmt-search` command line: every subcommand is a `cmd_*` function that
//! returns its results, with thin printing on top.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use fmt_search_core::{Error, ErrorKind};

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{OutputConfig, ProtocolConfig, RunConfig};

pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const GENERATION: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(exit::CONFIG, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => exit::CONFIG,
            ErrorKind::Generation => exit::GENERATION,
            ErrorKind::Numeric => exit::NUMERIC,
            ErrorKind::Io => exit::IO,
            ErrorKind::Internal => exit::CHECK_FAILED,
        };
        CliError::new(code, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fmt-search",
    version,
    about = "Person search: synthetic data, training, evaluation and checks",
    after_help = "Any config value can be overridden with a dotted flag, e.g. --train.lr0=0.01"
)]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model on `<data-dir>/train`.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on `<data-dir>/test`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        gallery_sizes: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rank the persons in gallery images against one query box.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_image: PathBuf,
        /// `x1,y1,x2,y2` in pixels.
        #[arg(long)]
        query_box: String,
        #[arg(long, num_args = 1.., required = true)]
        gallery: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
    /// Evaluate a checkpoint over several protocol seeds and gallery sizes.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        gallery_sizes: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train and evaluate the baseline, person-label RPN and full variants.
    Ablate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = config::extract_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<i32, CliError> {
    let cfg = || RunConfig::load(cli.config.as_deref(), overrides);
    let out = |cfg: &RunConfig, o: Option<PathBuf>| o.unwrap_or_else(|| cfg.output.out_dir.clone());
    match cli.command {
        Command::GenData { out_dir } => {
            let cfg = cfg()?;
            let dir = out(&cfg, out_dir);
            let s = cmd_gen_data(&cfg, &dir)?;
            println!(
                "wrote {} train and {} test scenes to {}",
                s.train_scenes,
                s.test_scenes,
                dir.display()
            );
        }
        Command::Train { data_dir, out_dir } => {
            let cfg = cfg()?;
            let dir = out(&cfg, out_dir);
            let s = cmd_train(&cfg, &data_dir, &dir)?;
            if let Some(last) = s.log.entries.last() {
                println!("iter {} stage {} l_total {}", last.iter, last.stage, last.losses.l_total);
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data_dir,
            gallery_sizes,
            out_dir,
        } => {
            let cfg = cfg()?;
            let dir = out(&cfg, out_dir);
            let sizes = gallery_sizes.unwrap_or_else(|| cfg.protocol.gallery_sizes.clone());
            let report = cmd_eval(&cfg, &checkpoint, &data_dir, &sizes, &dir)?;
            print!("{}", fmt_search_core::evalsearch::report_csv(&report));
        }
        Command::Search {
            checkpoint,
            query_image,
            query_box,
            gallery,
            top_n,
        } => {
            let hits = cmd_search(&checkpoint, &query_image, &query_box, &gallery, top_n)?;
            print!("{}", format_search_hits(&hits));
        }
        Command::Sweep {
            checkpoint,
            data_dir,
            seeds,
            gallery_sizes,
            out_dir,
        } => {
            let cfg = cfg()?;
            let dir = out(&cfg, out_dir);
            let seeds = seeds.unwrap_or_else(|| cfg.protocol.sweep_seeds.clone());
            let sizes = gallery_sizes.unwrap_or_else(|| cfg.protocol.gallery_sizes.clone());
            let sweep = cmd_sweep(&checkpoint, &data_dir, &seeds, &sizes, &dir)?;
            print!("{}", sweep.to_csv());
        }
        Command::Gradcheck { instances, seed, corrupt } => {
            let r = cmd_gradcheck(instances, seed, corrupt)?;
            print!("{}", r.table());
            println!("elapsed {:.2}s", r.elapsed.as_secs_f64());
            if !r.all_passed() {
                return Ok(exit::CHECK_FAILED);
            }
        }
        Command::Ablate { data_dir, out_dir } => {
            let cfg = cfg()?;
            let dir = out(&cfg, out_dir);
            let a = cmd_ablate(&cfg, &data_dir, &dir)?;
            print!("{}", a.to_csv());
            println!("{}", a.summary());
        }
    }
    Ok(exit::OK)
}
