//! `man3d` command line: generate | train | eval | bench-nms.

mod bench;
mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "man3d", version, about = "Multi-frame 3D detection on synthetic LiDAR")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file with `key = value` lines.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Override one key, e.g. `--set model.fsd.nms_kernel=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic sequence files and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of sequences (default: data.num_sequences).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a generated dataset, evaluating on the held-out split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: std::path::PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<std::path::PathBuf>,
    },
    /// Evaluate a checkpoint on every sequence in a directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: std::path::PathBuf,
        /// Also write precision-recall curves as SVG.
        #[arg(long)]
        plots: bool,
    },
    /// Time MaxPoolNMS against greedy NMS.
    BenchNms {
        #[arg(long)]
        out: Option<std::path::PathBuf>,
        /// Square map sides.
        #[arg(long, value_delimiter = ',', default_values_t = vec![128usize, 256, 448])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![3usize, 7])]
        kernels: Vec<usize>,
        /// Boxes kept by each method.
        #[arg(long, default_value_t = 128)]
        num_out: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Generate { common, count } => commands::generate(&common, count),
        Cmd::Train { common, data, resume } => commands::train(&common, &data, resume.as_deref()),
        Cmd::Eval {
            common,
            checkpoint,
            data,
            plots,
        } => commands::eval(&common, &checkpoint, &data, plots),
        Cmd::BenchNms {
            out,
            sizes,
            kernels,
            num_out,
            seed,
        } => commands::bench_nms(out.as_deref(), &sizes, &kernels, num_out, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
