use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use morphrl::experiment::{self, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "morphrl", version, about = "Joint morphology and control optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a method from a TOML config.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget_scale: Option<f64>,
        /// Attribute finetuning of this design; disables the skeleton stage.
        #[arg(long, value_name = "DESIGNFILE")]
        finetune: Option<PathBuf>,
        /// Run directory (default: `output_dir` of the config, else runs/<env>-<method>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Deterministic evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Where to write the transformed design (default: next to the checkpoint).
        #[arg(long)]
        design_out: Option<PathBuf>,
    },
    /// Merge metrics.csv across runs into a mean ± std curve.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plot")]
        out: PathBuf,
    },
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("MORPHRL_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("MORPHRL_WORKERS={v} is not a count"))?;
        if n == 0 {
            bail!("MORPHRL_WORKERS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_workers()?;
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            budget_scale,
            finetune,
            out,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = budget_scale {
                cfg.budget_scale = b;
            }
            if let Some(d) = finetune {
                cfg.method = Method::Transform2Act;
                cfg.finetune = true;
                cfg.design = Some(d);
            }
            cfg.validate()?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}-s{}", cfg.env, cfg.method.name(), cfg.seed))
            });
            let s = experiment::train(&cfg, &dir, resume)?;
            println!(
                "{} on {}: {} execution steps, {} epochs, eval return {:.4}, {} joints -> {}",
                s.method.name(),
                s.env,
                s.exec_steps,
                s.epochs,
                s.eval_return,
                s.final_joints,
                dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            design_out,
        } => {
            let r = experiment::evaluate_checkpoint(&checkpoint, episodes)?;
            let path = design_out.unwrap_or_else(|| checkpoint.with_extension("design"));
            std::fs::write(&path, r.design.serialize()).with_context(|| format!("writing {}", path.display()))?;
            if episodes > 0 {
                println!(
                    "episodes {} mean return {:.4} std {:.4}",
                    r.returns.len(),
                    r.mean_return,
                    r.std_return
                );
            }
            println!("design ({} joints) -> {}", r.design.len(), path.display());
        }
        Command::Plot { runs, out } => {
            let curve = experiment::plot(&runs, &out)?;
            let last = curve.last().expect("non-empty curve");
            println!(
                "{} runs, {} points, final {:.4} ± {:.4} -> {}",
                last.runs,
                curve.len(),
                last.mean,
                last.std,
                out.display()
            );
        }
    }
    Ok(())
}
