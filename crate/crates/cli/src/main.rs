use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cirrl::drig::DrigVariant;
use cirrl::harness::{
    cmd_elbow, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, load_trained, seed_dir, worker_pool, write_error_log,
    write_results, ExperimentConfig,
};

/// Distributionally robust prediction on learned latent representations.
#[derive(Debug, Parser)]
#[command(name = "cirrl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only these seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// DRIG shift strengths.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    gamma: Vec<f64>,
    /// Test perturbation strengths.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    eta: Vec<f64>,
    /// Use the literal cross-moment form of the DRIG normal equations.
    #[arg(long, global = true)]
    eq5_literal: bool,
    /// Project the test mean shift so the identifiability assumption holds.
    #[arg(long, global = true)]
    enforce_assumption1: bool,
    /// Weight of the prior term in the representation loss.
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write training and test data for each seed.
    Generate,
    /// Train the representation and the baselines for each seed.
    Train,
    /// Fit DRIG heads on trained representations and evaluate every method.
    Evaluate,
    /// Final representation loss per latent dimension.
    Elbow {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        dims: Vec<usize>,
    },
    /// Generate, train and evaluate all seeds into one results table.
    Sweep,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if !common.gamma.is_empty() {
        cfg.drig.gammas = common.gamma.clone();
    }
    if !common.eta.is_empty() {
        cfg.evaluation.etas = common.eta.clone();
    }
    if common.eq5_literal {
        cfg.drig.variant = DrigVariant::Eq5Literal;
    }
    if common.enforce_assumption1 {
        cfg.generation.enforce_assumption1 = true;
    }
    if let Some(alpha) = common.alpha {
        cfg.representation.alpha = alpha;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate => {
            for &seed in &cfg.seeds {
                let generated = cmd_generate(&cfg, seed)?;
                for e in &generated.errors {
                    eprintln!("seed {seed}: skipped {}: {}", e.cell, e.message);
                }
                println!("{}", seed_dir(&cfg, seed).display());
            }
        }
        Command::Train => {
            for &seed in &cfg.seeds {
                let generated = cmd_generate(&cfg, seed)?;
                let trained = cmd_train(&cfg, seed, &generated.train)?;
                for e in &trained.errors {
                    eprintln!("seed {seed}: {} failed: {}", e.method, e.message);
                }
                println!("{}", seed_dir(&cfg, seed).display());
            }
        }
        Command::Evaluate => {
            for &seed in &cfg.seeds {
                let generated = cmd_generate(&cfg, seed)?;
                let trained = load_trained(&cfg, seed)?;
                if trained.repr.is_none() {
                    bail!("seed {seed}: no trained representation in {}", seed_dir(&cfg, seed).display());
                }
                let (mut rows, mut errors) = cmd_evaluate(&cfg, seed, &generated, &trained);
                errors.extend(generated.errors);
                let dir = seed_dir(&cfg, seed);
                write_results(&mut rows, std::fs::File::create(dir.join("results.csv"))?)?;
                write_error_log(&mut errors, std::fs::File::create(dir.join("errors.log"))?)?;
                println!("{}", dir.join("results.csv").display());
            }
        }
        Command::Elbow { dims } => {
            for &seed in &cfg.seeds {
                let generated = cmd_generate(&cfg, seed)?;
                for row in cmd_elbow(&cfg, seed, &generated.train, &dims)? {
                    match row.error {
                        None => println!("seed {seed} dim {} loss {}", row.dim, row.final_loss),
                        Some(e) => println!("seed {seed} dim {} failed: {e}", row.dim),
                    }
                }
            }
        }
        Command::Sweep => {
            let out = cmd_sweep(&cfg)?;
            if !out.errors.is_empty() {
                eprintln!("{} cells failed, see errors.log", out.errors.len());
            }
            println!("{}", out.results_path.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    worker_pool()?.install(|| run(cli))
}
