use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use turbmend::imageio::read_gray;
use turbmend::pipeline::{bench_solvers, evaluate, restore, simulate, Evaluation, PipelineConfig};
use turbmend::simulator::{Preset, TurbulenceConfig};
use turbmend::{Error, Result};

#[derive(Parser)]
#[command(name = "turbmend", version, about = "Restore a sharp image from a turbulence-degraded frame sequence")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore one image from a directory of frames.
    Restore {
        input: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "restored")]
        out: PathBuf,
        /// Extra key=value settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Degrade a sharp image into a synthetic sequence.
    Simulate {
        image: PathBuf,
        #[arg(long, default_value = "weak")]
        preset: String,
        #[arg(long, default_value = "sequence")]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Manifest-style key=value file overriding preset fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the true deformation fields.
        #[arg(long)]
        fields: bool,
    },
    /// Print PSNR and SSIM of an image against the truth as CSV.
    Evaluate { image: PathBuf, truth: PathBuf },
    /// Time the fast solver against split Bregman.
    Bench {
        #[arg(long, default_value_t = 240)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Restore { input, config, out, overrides } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::from_file(&p)?,
                None => PipelineConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, got '{kv}'")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            restore(&input, &cfg, &out)?;
            println!("{}", out.join("restored_L.png").display());
        }
        Command::Simulate { image, preset, out, frames, seed, config, fields } => {
            let preset: Preset = preset.parse()?;
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    let mut c = TurbulenceConfig::from_manifest(&format!("preset={}\n{text}", preset.name()))?;
                    c.preset = Preset::Custom;
                    c
                }
                None => TurbulenceConfig::from_preset(preset),
            };
            if let Some(n) = frames {
                cfg.n_frames = n;
            }
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            cfg.validate()?;
            let truth = read_gray(&image)?;
            let seq = simulate(&truth, &cfg, &out, fields)?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::Evaluate { image, truth } => {
            let e = evaluate(&image, &truth)?;
            println!("{}", Evaluation::CSV_HEADER);
            println!("{}", e.csv_row());
        }
        Command::Bench { size, trials, iterations, seed } => {
            println!("{}", bench_solvers(size, trials, iterations, seed)?.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Usage(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
