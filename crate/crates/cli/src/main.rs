use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use parabolic_invert::commands;
use parabolic_invert::{Run, RunConfig, THREADS_ENV};

#[derive(Debug, Parser)]
#[command(version, about = "Bayesian inversion of a 1D parabolic PDE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the configured truth.
    Simulate,
    /// Alternate MAP estimation and the noise-variance update.
    EstimateNoise,
    /// Multi-start MAP estimate and its source and solution lattices.
    Map,
    /// Run the Metropolis-Hastings chain from the MAP.
    Sample {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause after this many iterations and write a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Autocorrelations, posterior summaries and pointwise moments.
    Diagnose,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let threads: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
        parinv::exec::init_thread_pool(threads);
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = Run::new(config, &cli.out)?;
    match cli.command {
        Command::Simulate => {
            let r = commands::simulate(&run)?;
            println!(
                "wrote {} observations, noise variance {:.6e}",
                r.observations, r.noise_variance
            );
        }
        Command::EstimateNoise => {
            let r = commands::estimate_noise_cmd(&run)?;
            println!(
                "noise variance {:.6e}{}",
                r.noise_variance,
                if r.degenerate { " (floored)" } else { "" }
            );
        }
        Command::Map => {
            let r = commands::map(&run)?;
            let u = &r.map.u_map;
            println!(
                "MAP lambda {:.6} D {:.6} objective {:.6} phi {:.6}",
                u.lambda, u.diffusion, r.map.objective, r.map.phi
            );
        }
        Command::Sample { resume, stop_after } => {
            match commands::sample(&run, resume.as_deref(), stop_after)? {
                Some(chain) => println!(
                    "{} iterations, {} retained, acceptance {:.3}, step {:.3e}",
                    chain.total,
                    chain.retained.len(),
                    chain.acceptance_rate(),
                    chain.step_size
                ),
                None => println!(
                    "paused; checkpoint written to {}",
                    run.out.join(commands::files::CHECKPOINT).display()
                ),
            }
        }
        Command::Diagnose => {
            let s = commands::diagnose(&run)?;
            for i in &s.intervals {
                println!("{:>7} [{:.6}, {:.6}]", i.name, i.lo, i.hi);
            }
        }
    }
    Ok(())
}
