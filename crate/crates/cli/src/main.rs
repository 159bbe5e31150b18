//! `pcil` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcil_core::harness::{self, plot, AgentPolicy, ExperimentConfig, ScriptedExpert};
use pcil_core::theory::{sandwich_suite, suite_csv, SuiteConfig};

#[derive(Parser)]
#[command(name = "pcil", version, about = "Policy-contrastive imitation learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, e.g. `--set total_steps=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out an expert and write a demo file.
    CollectDemos {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `scripted` or a training checkpoint.
        #[arg(long, default_value = "scripted")]
        expert: String,
    },
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Noise-free rollouts of a checkpoint, or of the scripted expert.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the representation x reward grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Check the divergence sandwich on random distribution pairs.
    TheoryCheck {
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 2)]
        support_min: usize,
        #[arg(long, default_value_t = 8)]
        support_max: usize,
        #[arg(long, default_value_t = 32)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render learning curves from metrics CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write encoder embeddings of expert and agent transitions.
    DumpEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn collect(cfg: &ExperimentConfig, out: &Path, episodes: usize, seed: u64, expert: &str) -> Result<()> {
    let env = harness::build_env(cfg)?;
    let env = env.as_ref();
    let summary = if expert == "scripted" {
        harness::collect_demos(&ScriptedExpert(env), env, &cfg.env, episodes, seed, cfg.expert_return_floor, out)?
    } else {
        let (agent, _) = harness::restore(cfg, env, 0, Some(Path::new(expert)))?;
        harness::collect_demos(&AgentPolicy(&agent), env, &cfg.env, episodes, seed, cfg.expert_return_floor, out)?
    };
    println!(
        "wrote {} transitions from {} episodes to {}; mean return {:.3}",
        summary.transitions.len(),
        episodes,
        out.display(),
        summary.mean_return
    );
    Ok(())
}

fn report_run(report: &harness::RunReport) -> bool {
    for s in &report.seeds {
        match (&s.failure, s.final_return()) {
            (None, Some(r)) => println!(
                "seed {}: final return {:.2} ({:.0}% of expert {:.2}), spearman {}",
                s.seed,
                r,
                100.0 * r / report.expert_reference,
                report.expert_reference,
                s.final_spearman.map_or("n/a".into(), |v| format!("{v:.3}"))
            ),
            (None, None) => println!("seed {}: no evaluations", s.seed),
            (Some(e), _) => println!("seed {}: FAILED: {e}", s.seed),
        }
    }
    println!("outputs in {}", report.dir.display());
    report.all_ok()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::CollectDemos {
            cfg,
            out,
            episodes,
            seed,
            expert,
        } => {
            let c = cfg.load()?;
            collect(
                &c,
                &out,
                episodes.unwrap_or(c.demo_episodes),
                seed.unwrap_or(c.demo_seed),
                &expert,
            )?;
            Ok(true)
        }
        Command::Train { cfg, parallel_seeds } => {
            let report = harness::run(&cfg.load()?, parallel_seeds)?;
            Ok(report_run(&report))
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            episodes,
            seed,
        } => {
            let c = cfg.load()?;
            let ev = harness::evaluate_checkpoint(
                &c,
                checkpoint.as_deref(),
                episodes.unwrap_or(c.eval_episodes),
                seed.unwrap_or(c.eval_seed),
            )?;
            println!("mean,std\n{},{}", ev.mean, ev.std);
            Ok(true)
        }
        Command::Ablate { cfg, parallel_seeds } => {
            let report = harness::ablate(&cfg.load()?, parallel_seeds)?;
            print!("{}", report.table());
            println!("table written to {}", report.table_path.display());
            Ok(report.all_ok())
        }
        Command::TheoryCheck {
            pairs,
            support_min,
            support_max,
            restarts,
            seed,
            out,
        } => {
            let reports = sandwich_suite(&SuiteConfig {
                pairs,
                support_min,
                support_max,
                restarts,
                seed,
            })?;
            let csv = suite_csv(&reports);
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            let half = reports.iter().filter(|r| r.half_ok).count();
            eprintln!(
                "{} pairs: {} failed; 0.5 lower bound held on {}",
                reports.len(),
                failed,
                half
            );
            Ok(failed == 0)
        }
        Command::Plot { csv, out } => {
            plot::plot(&csv, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::DumpEmbeddings {
            cfg,
            checkpoint,
            seed,
            out,
        } => {
            let c = cfg.load()?;
            if c.method != "pcil" {
                bail!("embeddings exist only for method=pcil");
            }
            let d = harness::dump_embeddings(&c, checkpoint.as_deref(), seed, &out)?;
            println!("wrote {} rows of {}-d embeddings to {}", d.rows, d.dim, out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
