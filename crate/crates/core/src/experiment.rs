//! Run every (seed, strategy) pair of a config and write the result tables.
//!
//! Outputs in the run directory:
//! - `results.csv`: one row per (seed, strategy, epoch), see [`ResultRow`].
//! - `summary.csv`: per-epoch medians and quartiles across seeds.
//! - `ratios.csv`: budget each active strategy needs to reach the passive
//!   run's final median test loss, as a fraction of the passive budget.
//! - `failures.csv`: runs that errored; the rest still complete.
//! - `control.csv` (pendulum only): closed-loop error of the learned residual.
//!
//! Every table starts with a `# activerep-<table> v1` line. Readers reject
//! any other version.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{Environment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{design_trace, dis_similarity, excess_risk, sin_angle, TargetEvalSet};
use crate::learner::{checkpoint_grid, ExperimentTrace, Learner, Strategy};
use crate::model::TargetSpec;
use crate::oracles::finetune_target;
use crate::pendulum::{control_rollout, PendulumState, ResidualModel};
use crate::seed::{SeedStream, Stream};

pub const RESULTS_SCHEMA: &str = "# activerep-results v1";
pub const SUMMARY_SCHEMA: &str = "# activerep-summary v1";
pub const RATIOS_SCHEMA: &str = "# activerep-ratios v1";
pub const FAILURES_SCHEMA: &str = "# activerep-failures v1";
pub const CONTROL_SCHEMA: &str = "# activerep-control v1";

/// Environment variable that sets how many seeds run concurrently.
pub const THREADS_ENV: &str = "ACTIVEREP_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub epoch: usize,
    pub cumulative_budget: usize,
    pub test_mse: f64,
    pub er: f64,
    pub sin_angle: f64,
    pub dis_similarity: f64,
    pub design_trace: f64,
    pub long_term_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub strategy: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub strategy: String,
    pub seed: u64,
    pub control_error: f64,
    pub zero_model_error: f64,
    pub true_model_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub control: Vec<ControlRow>,
}

/// Metrics for every checkpoint of `trace`.
fn trace_rows(
    cfg: &ExperimentConfig,
    env: &Environment,
    target: &TargetSpec,
    eval: &TargetEvalSet,
    trace: &ExperimentTrace,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let sampler = env.sampler();
    let truth = sampler.truth();
    let linear_tasks = sampler.psi_w().is_identity();
    let mut rows = Vec::with_capacity(trace.checkpoints.len());
    for c in &trace.checkpoints {
        let b = &c.estimate.b_x_hat;
        let (er, test_mse) = excess_risk(b, sampler, eval, cfg.eval.ridge)?;
        let (sin, dis, dt) = match truth {
            Some(gt) => {
                let dt = if linear_tasks {
                    let counts: Vec<(DVector<f64>, f64)> =
                        c.training_tasks.iter().map(|(w, n)| (w.clone(), *n as f64)).collect();
                    design_trace(&gt.b_w, &counts, &target.second_moment())?.value
                } else {
                    f64::NAN
                };
                (sin_angle(b, &gt.b_x)?, dis_similarity(&gt.b_x, b)?, dt)
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        rows.push(ResultRow {
            scenario: cfg.scenario.name().to_string(),
            strategy: trace.strategy.name().to_string(),
            seed,
            epoch: c.epoch,
            cumulative_budget: c.cumulative_budget,
            test_mse,
            er,
            sin_angle: sin,
            dis_similarity: dis,
            design_trace: dt,
            long_term_tasks: trace.long_term_tasks(c.epoch, cfg.eval.alpha, c.eps),
        });
    }
    Ok(rows)
}

fn control_row(cfg: &ExperimentConfig, env: &Environment, eval: &TargetEvalSet, trace: &ExperimentTrace, seed: u64) -> Result<Option<ControlRow>> {
    let Environment::Pendulum(sim) = env else {
        return Ok(None);
    };
    let Some(last) = trace.checkpoints.last() else {
        return Ok(None);
    };
    let ctl = cfg.pendulum_config().control;
    let psi_x = env.sampler().psi_x();
    let head = finetune_target(&last.estimate.b_x_hat, psi_x, &eval.train, cfg.eval.ridge)?;
    let model = ResidualModel {
        psi_x: psi_x.clone(),
        coef: &last.estimate.b_x_hat * head,
    };
    let true_env = sim.target_env()?;
    let x0 = PendulumState::new(ctl.theta0, ctl.theta_dot0);
    let run = |f: &dyn Fn(&PendulumState) -> f64| control_rollout(&true_env, f, ctl.kp, ctl.kd, ctl.horizon, x0);
    Ok(Some(ControlRow {
        strategy: trace.strategy.name().to_string(),
        seed,
        control_error: run(&|s| model.predict(s)).unwrap_or(f64::INFINITY),
        zero_model_error: run(&|_| 0.0).unwrap_or(f64::INFINITY),
        true_model_error: run(&|s| crate::pendulum::residual_f(s, &true_env)).unwrap_or(f64::INFINITY),
    }))
}

/// Run every configured strategy for one seed. The target-aware run always
/// happens first: its checkpoint budgets are the grid the other strategies
/// are evaluated on.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let env = cfg.environment(seed)?;
    let target = cfg.target_spec(&env)?;
    let budgets = cfg.stage_budgets()?;
    let sampler = env.sampler();
    let eval = TargetEvalSet::draw(sampler, &target, cfg.target.n_test, SeedStream::new(seed).stream(Stream::Eval))?;
    let learner = Learner {
        sampler,
        target: &target,
        budgets: &budgets,
        train: &cfg.train,
        cfg: &cfg.learner,
        seeds: SeedStream::new(seed),
    };
    let mut out = SeedOutput::default();
    let mut aware = Some(learner.run_target_aware());
    let grid = match aware.as_ref().unwrap() {
        Ok(trace) => Some(checkpoint_grid(trace)),
        Err(e) => {
            warn!("seed {seed}: target-aware run failed: {e}");
            None
        }
    };
    for &strategy in &cfg.strategies {
        let trace = match (strategy, &grid) {
            (Strategy::TargetAware, _) => match aware.take() {
                Some(t) => t,
                None => continue,
            },
            (_, None) => Err(Error::InvalidArgument(
                "no checkpoint grid: the target-aware run failed".into(),
            )),
            (Strategy::TargetAgnostic, Some(g)) => learner.run_target_agnostic(Some(g)),
            (Strategy::Passive, Some(g)) => learner.run_passive(g),
        };
        let result = trace.and_then(|t| {
            let rows = trace_rows(cfg, &env, &target, &eval, &t, seed)?;
            let ctl = control_row(cfg, &env, &eval, &t, seed)?;
            Ok((rows, ctl))
        });
        match result {
            Ok((rows, ctl)) => {
                out.rows.extend(rows);
                out.control.extend(ctl);
            }
            Err(e) => {
                warn!("seed {seed}, {}: {e}", strategy.name());
                out.failures.push(Failure {
                    strategy: strategy.name().to_string(),
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// All seeds, in config order regardless of how many run at once.
pub fn run_all(cfg: &ExperimentConfig) -> Result<SeedOutput> {
    cfg.validate()?;
    let threads = thread_count().min(cfg.seeds.len());
    let per_seed: Vec<(u64, Result<SeedOutput>)> = if threads <= 1 {
        cfg.seeds.iter().map(|&s| (s, run_seed(cfg, s))).collect()
    } else {
        let chunk = cfg.seeds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .chunks(chunk)
                .map(|seeds| scope.spawn(move || seeds.iter().map(|&s| (s, run_seed(cfg, s))).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("seed worker panicked"))
                .collect()
        })
    };
    let mut all = SeedOutput::default();
    for (seed, res) in per_seed {
        match res {
            Ok(o) => {
                all.rows.extend(o.rows);
                all.failures.extend(o.failures);
                all.control.extend(o.control);
            }
            Err(e) => {
                warn!("seed {seed}: setup failed: {e}");
                all.failures.push(Failure {
                    strategy: "*".into(),
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(all)
}

/// Run the experiment and write every table into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SeedOutput> {
    std::fs::create_dir_all(out_dir)?;
    let out = run_all(cfg)?;
    write_table(&out_dir.join("results.csv"), RESULTS_SCHEMA, &out.rows)?;
    write_table(&out_dir.join("failures.csv"), FAILURES_SCHEMA, &out.failures)?;
    if !out.control.is_empty() {
        write_table(&out_dir.join("control.csv"), CONTROL_SCHEMA, &out.control)?;
    }
    let summary = summarize(&out.rows);
    write_summary(out_dir, &summary)?;
    info!(
        "{} rows, {} failures written to {}",
        out.rows.len(),
        out.failures.len(),
        out_dir.display()
    );
    Ok(out)
}

pub fn write_table<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let mut file = File::create(path)?;
    writeln!(file, "{schema}")?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        // Serde-driven headers need a row; write them by hand for empty tables.
        drop(w);
        return write_empty_header::<T>(path, schema);
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_empty_header<T>(path: &Path, schema: &str) -> Result<()> {
    let name = std::any::type_name::<T>();
    let header = if name.ends_with("ResultRow") {
        RESULT_COLUMNS.join(",")
    } else if name.ends_with("Failure") {
        "strategy,seed,message".to_string()
    } else if name.ends_with("ControlRow") {
        "strategy,seed,control_error,zero_model_error,true_model_error".to_string()
    } else {
        String::new()
    };
    std::fs::write(path, format!("{schema}\n{header}\n"))?;
    Ok(())
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "scenario",
    "strategy",
    "seed",
    "epoch",
    "cumulative_budget",
    "test_mse",
    "er",
    "sin_angle",
    "dis_similarity",
    "design_trace",
    "long_term_tasks",
];

pub fn read_table<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != schema {
        return Err(Error::Schema(format!(
            "{}: expected `{schema}`, found `{}`",
            path.display(),
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_table(path, RESULTS_SCHEMA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub strategy: String,
    pub epoch: usize,
    pub seeds: usize,
    pub median_budget: f64,
    pub median_test_mse: f64,
    pub q25_test_mse: f64,
    pub q75_test_mse: f64,
    pub median_er: f64,
    pub median_sin_angle: f64,
    pub median_long_term_tasks: f64,
}

/// Budget an active strategy needs to match the passive run's final median
/// test loss, divided by the passive budget. `+∞` when it never does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub scenario: String,
    pub strategy: String,
    pub budget_ratio: f64,
    pub budget_needed: f64,
    pub passive_budget: f64,
    pub passive_final_test_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub ratios: Vec<RatioRow>,
}

/// Linear-interpolated quantile of the finite values; NaN when there are none.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Deterministic aggregation of result rows, ordered by scenario, strategy
/// and epoch.
pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut groups: BTreeMap<(String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.scenario.clone(), r.strategy.clone(), r.epoch))
            .or_default()
            .push(r);
    }
    let mut summary = Summary::default();
    for ((scenario, strategy, epoch), g) in &groups {
        let col = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let mse = col(|r| r.test_mse);
        summary.rows.push(SummaryRow {
            scenario: scenario.clone(),
            strategy: strategy.clone(),
            epoch: *epoch,
            seeds: g.len(),
            median_budget: median(&col(|r| r.cumulative_budget as f64)),
            median_test_mse: median(&mse),
            q25_test_mse: quantile(&mse, 0.25),
            q75_test_mse: quantile(&mse, 0.75),
            median_er: median(&col(|r| r.er)),
            median_sin_angle: median(&col(|r| r.sin_angle)),
            median_long_term_tasks: median(&col(|r| r.long_term_tasks as f64)),
        });
    }
    let passive = Strategy::Passive.name();
    let scenarios: Vec<String> = {
        let mut s: Vec<String> = summary.rows.iter().map(|r| r.scenario.clone()).collect();
        s.dedup();
        s
    };
    for scenario in scenarios {
        let curve = |strategy: &str| -> Vec<&SummaryRow> {
            summary
                .rows
                .iter()
                .filter(|r| r.scenario == scenario && r.strategy == strategy)
                .collect()
        };
        let Some(p_final) = curve(passive).last().copied().cloned() else {
            continue;
        };
        let mut strategies: Vec<String> = summary
            .rows
            .iter()
            .filter(|r| r.scenario == scenario && r.strategy != passive)
            .map(|r| r.strategy.clone())
            .collect();
        strategies.dedup();
        for strategy in strategies {
            let reached = curve(&strategy)
                .into_iter()
                .find(|r| r.median_test_mse <= p_final.median_test_mse);
            let (ratio, needed) = match reached {
                Some(r) => (r.median_budget / p_final.median_budget, r.median_budget),
                None => (f64::INFINITY, f64::INFINITY),
            };
            summary.ratios.push(RatioRow {
                scenario: scenario.clone(),
                strategy,
                budget_ratio: ratio,
                budget_needed: needed,
                passive_budget: p_final.median_budget,
                passive_final_test_mse: p_final.median_test_mse,
            });
        }
    }
    summary
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    write_table(&dir.join("summary.csv"), SUMMARY_SCHEMA, &summary.rows)?;
    write_table(&dir.join("ratios.csv"), RATIOS_SCHEMA, &summary.ratios)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, seed: u64, epoch: usize, budget: usize, mse: f64) -> ResultRow {
        ResultRow {
            scenario: "synthetic-bilinear".into(),
            strategy: strategy.into(),
            seed,
            epoch,
            cumulative_budget: budget,
            test_mse: mse,
            er: mse - 1.0,
            sin_angle: f64::NAN,
            dis_similarity: f64::NAN,
            design_trace: f64::INFINITY,
            long_term_tasks: 3,
        }
    }

    #[test]
    fn single_row_median_is_the_row() {
        let s = summarize(&[row("passive", 0, 0, 100, 2.5)]);
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.rows[0].median_test_mse, 2.5);
        assert!(s.rows[0].median_sin_angle.is_nan());
    }

    #[test]
    fn three_row_fixture() {
        let rows = vec![
            row("passive", 0, 1, 100, 3.0),
            row("passive", 1, 1, 110, 1.0),
            row("passive", 2, 1, 120, 2.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.rows[0].median_test_mse, 2.0);
        assert_eq!(s.rows[0].median_budget, 110.0);
        assert_eq!(s.rows[0].q25_test_mse, 1.5);
        assert_eq!(s.rows[0].q75_test_mse, 2.5);
    }

    #[test]
    fn budget_ratio_and_sentinel() {
        let rows = vec![
            row("passive", 0, 0, 100, 4.0),
            row("passive", 0, 1, 200, 2.0),
            row("target-aware", 0, 0, 100, 3.0),
            row("target-aware", 0, 1, 150, 1.5),
            row("target-agnostic", 0, 0, 100, 5.0),
            row("target-agnostic", 0, 1, 200, 2.5),
        ];
        let s = summarize(&rows);
        let get = |name: &str| s.ratios.iter().find(|r| r.strategy == name).unwrap().budget_ratio;
        assert_eq!(get("target-aware"), 0.75);
        assert!(get("target-agnostic").is_infinite());
    }

    #[test]
    fn tables_round_trip_and_reject_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row("passive", 0, 0, 100, 2.0), row("target-aware", 1, 2, 300, 1.25)];
        write_table(&path, RESULTS_SCHEMA, &rows).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].test_mse, 1.25);
        assert!(back[0].sin_angle.is_nan());
        assert!(back[0].design_trace.is_infinite());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), RESULT_COLUMNS.join(","));
        std::fs::write(&path, text.replace("v1", "v2")).unwrap();
        assert!(matches!(read_results(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_tables_still_carry_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_table::<Failure>(&path, FAILURES_SCHEMA, &[]).unwrap();
        assert!(read_table::<Failure>(&path, FAILURES_SCHEMA).unwrap().is_empty());
    }
}
