//! Command-line front end: plant models, run experiments, summarize results.

use std::path::{Path, PathBuf};

use activerep::config::{Environment, ExperimentConfig};
use activerep::experiment::{self, ControlRow, Summary};
use activerep::learner::Strategy;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

const PENDULUM_DEFAULT: &str = include_str!("../../../configs/pendulum.toml");

#[derive(Parser)]
#[command(name = "activerep", version, about = "Active multi-task representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plant the ground-truth model for each seed and save it.
    GenTruth(RunArgs),
    /// Run every configured strategy and write the result tables.
    Run(RunArgs),
    /// Aggregate one or more results.csv files.
    Summarize {
        /// results.csv files to merge.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Directory for summary.csv and ratios.csv. Printed only if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn the pendulum residual and report closed-loop tracking error.
    PendulumDemo {
        /// Defaults to the bundled pendulum config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds or a half-open range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    /// Restrict to these strategies (repeatable).
    #[arg(long)]
    strategy: Vec<String>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed `{t}`")))
        .collect()
}

fn apply_overrides(cfg: &mut ExperimentConfig, seeds: Option<&str>, strategies: &[String]) -> Result<()> {
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if !strategies.is_empty() {
        cfg.strategies = strategies
            .iter()
            .map(|s| Strategy::parse(s).with_context(|| format!("unknown strategy `{s}`")))
            .collect::<Result<_>>()?;
    }
    cfg.validate()?;
    Ok(())
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir in the config")
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args.seeds.as_deref(), &args.strategy)?;
    let out = out_dir(args.out.clone(), &cfg)?;
    Ok((cfg, out))
}

fn gen_truth(args: &RunArgs) -> Result<()> {
    let (cfg, out) = load(args)?;
    std::fs::create_dir_all(&out)?;
    for &seed in &cfg.seeds {
        match cfg.environment(seed)? {
            Environment::Synthetic(gt) => {
                let stem = format!("truth-seed{seed}");
                gt.save(&out, &stem)?;
                println!("{}", out.join(stem).display());
            }
            Environment::Pendulum(_) => bail!("the pendulum scenario has no planted model to save"),
        }
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig, out: &Path) -> Result<experiment::SeedOutput> {
    std::fs::write(out_or_create(out)?.join("config.toml"), cfg.to_toml()?)?;
    let res = experiment::run_experiment(cfg, out)?;
    print_summary(&experiment::summarize(&res.rows));
    for f in &res.failures {
        eprintln!("failed: seed {} {}: {}", f.seed, f.strategy, f.message);
    }
    Ok(res)
}

fn out_or_create(out: &Path) -> Result<&Path> {
    std::fs::create_dir_all(out)?;
    Ok(out)
}

fn print_summary(s: &Summary) {
    println!(
        "{:<20} {:<16} {:>5} {:>10} {:>12} {:>12} {:>10}",
        "scenario", "strategy", "epoch", "budget", "test_mse", "er", "sin"
    );
    for r in &s.rows {
        println!(
            "{:<20} {:<16} {:>5} {:>10.0} {:>12.5} {:>12.5} {:>10.4}",
            r.scenario, r.strategy, r.epoch, r.median_budget, r.median_test_mse, r.median_er, r.median_sin_angle
        );
    }
    for r in &s.ratios {
        println!(
            "budget ratio {} / passive ({}): {:.3}",
            r.strategy, r.scenario, r.budget_ratio
        );
    }
}

fn print_control(rows: &[ControlRow]) {
    println!("{:<16} {:>6} {:>10} {:>10} {:>10}", "strategy", "seed", "learned", "f=0", "true f");
    for r in rows {
        println!(
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>10.4}",
            r.strategy, r.seed, r.control_error, r.zero_model_error, r.true_model_error
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenTruth(args) => gen_truth(&args),
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            run(&cfg, &out).map(|_| ())
        }
        Command::Summarize { results, out } => {
            let mut rows = Vec::new();
            for p in &results {
                rows.extend(experiment::read_results(p).with_context(|| p.display().to_string())?);
            }
            let summary = experiment::summarize(&rows);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                experiment::write_summary(&dir, &summary)?;
            }
            print_summary(&summary);
            Ok(())
        }
        Command::PendulumDemo { config, out, seeds } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::from_toml(PENDULUM_DEFAULT)?,
            };
            apply_overrides(&mut cfg, seeds.as_deref(), &[])?;
            if !matches!(cfg.scenario, activerep::config::Scenario::Pendulum) {
                bail!("pendulum-demo needs a pendulum config");
            }
            let out = match out.or_else(|| cfg.output_dir.clone()) {
                Some(o) => o,
                None => std::env::temp_dir().join("activerep-pendulum-demo"),
            };
            let res = run(&cfg, &out)?;
            print_control(&res.control);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("3,1, 2").unwrap(), vec![3, 1, 2]);
        assert_eq!(parse_seeds("2..5").unwrap(), vec![2, 3, 4]);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn bundled_pendulum_config_parses() {
        let cfg = ExperimentConfig::from_toml(PENDULUM_DEFAULT).unwrap();
        assert!(matches!(cfg.scenario, activerep::config::Scenario::Pendulum));
    }
}
