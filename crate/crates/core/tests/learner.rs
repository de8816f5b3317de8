use activerep::eval::{excess_risk, sin_angle, TargetEvalSet};
use activerep::learner::{
    checkpoint_grid, ClipRule, Learner, LearnerConfig, N2Policy, StageBudgets, STAGE_COARSE, STAGE_FINE, STAGE_TARGET,
};
use activerep::model::{Conditioning, Dimensions, GroundTruthModel, Lifts, TargetSpec, TaskSampler};
use activerep::oracles::TrainConfig;
use activerep::seed::{SeedStream, Stream};
use nalgebra::DVector;

fn planted(sigma: f64, seed: u64) -> GroundTruthModel {
    GroundTruthModel::generate(
        Dimensions::linear(20, 10, 10, 2),
        Conditioning::Ill { kappa: 4.0 },
        Lifts::default(),
        sigma,
        seed,
    )
    .unwrap()
}

fn target(d: usize) -> TargetSpec {
    let w0 = DVector::from_fn(d, |i, _| if i < 3 { 1.0 / 3f64.sqrt() } else { 0.0 });
    TargetSpec::single(w0, 200, 200)
}

fn budgets() -> StageBudgets {
    let mut b = StageBudgets::explicit(400, 100.0, 2);
    b.n2_policy = N2Policy::Fixed { n: 200 };
    b
}

fn learner_cfg() -> LearnerConfig {
    LearnerConfig {
        clip: ClipRule::Relative { fraction: 0.01 },
        ..LearnerConfig::default()
    }
}

#[test]
fn noiseless_target_aware_recovers_representation() {
    let gt = planted(0.0, 3);
    let tgt = target(10);
    let (b, t, c) = (budgets(), TrainConfig::default(), learner_cfg());
    let learner = Learner {
        sampler: &gt,
        target: &tgt,
        budgets: &b,
        train: &t,
        cfg: &c,
        seeds: SeedStream::new(3),
    };
    let trace = learner.run_target_aware().unwrap();
    assert_eq!(trace.checkpoints.len(), 3);
    let last = trace.checkpoints.last().unwrap();
    let s = sin_angle(&last.estimate.b_x_hat, &gt.b_x).unwrap();
    assert!(s < 1e-6, "sin angle {s}");
    let eval = TargetEvalSet::draw(&gt, &tgt, 500, SeedStream::new(3).stream(Stream::Eval)).unwrap();
    let (er, _) = excess_risk(&last.estimate.b_x_hat, &gt, &eval, 0.0).unwrap();
    assert!(er < 1e-10, "er {er}");
    assert!(!last.stage3_skipped);
    assert!(trace.stages.iter().any(|s| s.plan.stage == STAGE_TARGET));
}

#[test]
fn trace_budgets_add_up() {
    let gt = planted(1.0, 5);
    let tgt = target(10);
    let (b, t, c) = (budgets(), TrainConfig::default(), learner_cfg());
    let learner = Learner {
        sampler: &gt,
        target: &tgt,
        budgets: &b,
        train: &t,
        cfg: &c,
        seeds: SeedStream::new(5),
    };
    let trace = learner.run_target_aware().unwrap();
    let grid = checkpoint_grid(&trace);
    assert!(grid.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*grid.last().unwrap(), trace.spent());
    let warm: usize = trace
        .stages
        .iter()
        .filter(|s| s.plan.stage == STAGE_COARSE)
        .map(|s| s.plan.spent())
        .sum();
    assert_eq!(warm, grid[0]);
    assert_eq!(warm, 400);
    for s in trace.stages.iter().filter(|s| s.plan.stage == STAGE_FINE) {
        assert!(s.plan.tasks.len() <= gt.dims().k);
    }
    // Lemma-style bound on the exploitation tasks.
    for c in &trace.checkpoints {
        if let Some((nuclear, bound)) = c.exploitation_norms {
            assert!(nuclear <= bound * (1.0 + 1e-9), "{nuclear} > {bound}");
        }
    }

    let agn = learner.run_target_agnostic(Some(&grid)).unwrap();
    assert_eq!(checkpoint_grid(&agn).len(), grid.len());
    assert_eq!(agn.checkpoints[0].estimate, trace.checkpoints[0].estimate);
    for (a, b) in checkpoint_grid(&agn).iter().zip(&grid) {
        assert!(*a >= *b && *a < *b + 2 * gt.dims().k, "{a} vs {b}");
    }
    let pas = learner.run_passive(&grid).unwrap();
    assert_eq!(checkpoint_grid(&pas), grid);
    assert_eq!(pas.long_term_tasks(2, 1.0, 0.25), 10);
}

#[test]
fn runs_are_deterministic() {
    let gt = planted(1.0, 9);
    let tgt = target(10);
    let (b, t, c) = (budgets(), TrainConfig::default(), learner_cfg());
    let run = || {
        Learner {
            sampler: &gt,
            target: &tgt,
            budgets: &b,
            train: &t,
            cfg: &c,
            seeds: SeedStream::new(9),
        }
        .run_target_aware()
        .unwrap()
    };
    assert_eq!(run(), run());
}
