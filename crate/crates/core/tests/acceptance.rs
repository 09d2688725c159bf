//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach stdout.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use abnet_core::abnet::{
    fuse_by_loss, merge, train_oneshot, AbnetModel, HeadSpec, PenaltyMerge, TrainConfig,
};
use abnet_core::barriernet::{backward_failures, Normalizer};
use abnet_core::baseline::MlpPolicy;
use abnet_core::data::{split_by_trajectory, Dataset, Record};
use abnet_core::expert::{generate_dataset, ExpertConfig};
use abnet_core::harness::{benchmark, evaluate, head_count_sweep, BenchmarkRow, RunConfig, Trajectory};
use abnet_core::hocbf::{fused_row_residual, ConstraintRow, HocbfCascade};
use abnet_core::qp::{solve, QpStatus, SolverOptions};
use abnet_core::task::Task;
use common::{
    active_set_oracle, backward_fd_error, flow_derivatives, gradient_check_options, non_degenerate,
    project_onto_row, random_qp, random_state, rel_err,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HIDDEN: &[usize] = &[128, 32, 32];
const PENALTY_HIDDEN: &[usize] = &[32, 32];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn min_barrier(task: &Task, records: &[Record]) -> f64 {
    records.iter().map(|r| task.sys().min_barrier(&r.x)).fold(f64::INFINITY, f64::min)
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// Artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Context {
    robot: Option<Dataset>,
    arm: Option<Dataset>,
    robot_bench: Option<RobotBench>,
}

struct RobotBench {
    rows: Vec<BenchmarkRow>,
    val_mse: (f64, f64),
}

impl Context {
    fn robot(&mut self) -> &Dataset {
        self.robot.get_or_insert_with(|| {
            let task = Task::robot2d();
            generate_dataset(&task, &ExpertConfig::robot2d(), 1).expect("robot dataset")
        })
    }

    fn arm(&mut self) -> &Dataset {
        self.arm.get_or_insert_with(|| {
            let task = Task::arm2();
            generate_dataset(&task, &ExpertConfig::arm2(), 1).expect("arm dataset")
        })
    }

    fn robot_split(&mut self) -> (Vec<Record>, Vec<Record>) {
        split_by_trajectory(&self.robot().records, 0.1)
    }

    /// h = 4 ABNet and the plain MLP trained on the robot data, benchmarked
    /// together with the expert under the noisy protocol.
    fn robot_bench(&mut self) -> &RobotBench {
        if self.robot_bench.is_none() {
            let task = Task::robot2d();
            let (train, val) = self.robot_split();
            let norm = Normalizer::fit(train.iter().map(|r| r.z.as_slice())).unwrap();
            let mut model =
                AbnetModel::new(task.clone(), &HeadSpec::uniform(4, HIDDEN, 7), PENALTY_HIDDEN, norm.clone(), 7).unwrap();
            let opts = SolverOptions::default();
            let before = mean(&model.evaluate_mse(&val, &opts).unwrap());
            let cfg = TrainConfig {
                epochs: 20,
                ..Default::default()
            };
            let mut opt = model.new_optimizer(cfg.lr);
            train_oneshot(&mut model, &train, &cfg, &mut opt).expect("abnet training");
            let after = mean(&model.evaluate_mse(&val, &opts).unwrap());

            let mut mlp = MlpPolicy::new(task.clone(), HIDDEN, norm, 7);
            mlp.train(&train, &cfg).expect("baseline training");

            let rows = benchmark(&[("abnet4", &model), ("mlp", &mlp)], &task, &RunConfig::robot2d(), Some(&val));
            self.robot_bench = Some(RobotBench {
                rows,
                val_mse: (before, after),
            });
        }
        self.robot_bench.as_ref().unwrap()
    }
}

fn c1_qp_oracle(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst_u, mut worst_kkt) = (0.0f64, 0.0f64);
    let mut non_optimal = 0;
    for _ in 0..200 {
        let prob = random_qp(&mut rng, 6, 12);
        let (u, _) = active_set_oracle(&prob).expect("feasible by construction");
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        if sol.status != QpStatus::Optimal {
            non_optimal += 1;
        }
        worst_u = worst_u.max((&sol.u - &u).amax());
        worst_kkt = worst_kkt.max(sol.kkt_residual);
    }
    let el = t.elapsed();
    verdict(
        worst_u < 1e-5 && worst_kkt <= 1e-6 && non_optimal == 0 && within(el, 10.0),
        format!("max |u - oracle| {worst_u:.1e}, max KKT residual {worst_kkt:.1e}, non-optimal {non_optimal}, {el:.2?}"),
    )
}

fn c2_qp_gradients(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let opts = gradient_check_options();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 50 {
        let prob = random_qp(&mut rng, 6, 12);
        if !non_degenerate(&prob, &opts) {
            continue;
        }
        checked += 1;
        worst = worst.max(backward_fd_error(&prob, &opts, 1e-5));
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-3 && within(el, 30.0),
        format!("{checked} problems, worst relative error {worst:.1e}, {el:.2?}"),
    )
}

fn c3_lie_derivatives(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_lg = 0.0f64;
    for (k, task) in [Task::robot2d(), Task::arm2()].iter().enumerate() {
        let sys = task.sys();
        let mut rng = ChaCha8Rng::seed_from_u64(1003 + k as u64);
        for _ in 0..500 {
            let x = random_state(task, &mut rng);
            for j in 0..sys.num_constraints() {
                let lie = sys.lie_derivatives(j, &x).unwrap();
                let fd = flow_derivatives(sys, j, &x);
                let analytic = lie.drift_chain().into_iter().chain(lie.lglf_b.iter().copied());
                let numeric = fd.chain.into_iter().chain(fd.lglf_b.iter().copied());
                for (a, b) in analytic.zip(numeric) {
                    worst = worst.max(rel_err(a, b));
                }
                worst_lg = fd.lg_b.iter().fold(worst_lg, |m, v| m.max(v.abs()));
            }
        }
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-5 && worst_lg < 1e-8 && within(el, 10.0),
        format!("1000 states, worst relative error {worst:.1e}, max |L_g b| {worst_lg:.1e}, {el:.2?}"),
    )
}

fn c4_fused_row(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let cascade = HocbfCascade::degree_two(0);
    let mut worst = f64::INFINITY;
    for case in 0..1000 {
        let task = if case % 2 == 0 { Task::robot2d() } else { Task::arm2() };
        let sys = task.sys();
        let x = random_state(&task, &mut rng);
        let heads = rng.gen_range(1..=10);
        let p1 = rng.gen_range(0.0..5.0);
        let rows: Vec<ConstraintRow> = (0..heads)
            .map(|_| cascade.assemble_row(sys, &x, &[p1], rng.gen_range(0.0..5.0)).unwrap())
            .collect();
        let us: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| project_onto_row(r, &[rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]))
            .collect();
        if rows.iter().zip(&us).any(|(r, u)| r.residual(u) < 0.0) {
            return verdict(false, format!("case {case}: head control does not satisfy its own row"));
        }
        let raw: Vec<f64> = (0..heads).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let u: Vec<f64> = (0..2).map(|i| us.iter().zip(&w).map(|(uk, wk)| wk * uk[i]).sum()).collect();
        worst = worst.min(fused_row_residual(&rows, &w, &u));
    }
    let el = t.elapsed();
    verdict(
        worst >= -1e-9 && within(el, 5.0),
        format!("1000 instances, min fused residual {worst:.2e}, {el:.2?}"),
    )
}

fn check_simplex(w: &[f64]) -> bool {
    w.iter().all(|v| *v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

fn c5_simplex(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let task = Task::robot2d();
    let (train, _) = ctx.robot_split();
    let norm = Normalizer::fit(train.iter().map(|r| r.z.as_slice())).unwrap();
    let mut model = AbnetModel::new(task, &HeadSpec::uniform(4, &[32, 32], 5), &[16], norm, 5).unwrap();
    let mut opt = model.new_optimizer(5e-3);
    let mut bad_steps = 0;
    for step in 0..200u64 {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 5e-3,
            seed: step,
            max_steps: Some(1),
            ..Default::default()
        };
        train_oneshot(&mut model, &train, &cfg, &mut opt).unwrap();
        if !check_simplex(&model.weights()) {
            bad_steps += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut bad_merges = 0;
    let mut merged = model.clone();
    for _ in 0..50 {
        let a: f64 = rng.gen_range(0.0..=1.0);
        merged = merge(&merged, &model, [a, 1.0 - a], PenaltyMerge::First).unwrap();
        if !check_simplex(&merged.weights()) {
            bad_merges += 1;
        }
        if merged.num_heads() > 40 {
            merged = model.clone();
        }
    }
    let w = model.weights();
    verdict(
        bad_steps == 0 && bad_merges == 0 && opt.step == 200,
        format!(
            "{} optimizer steps, 50 merges, violations {bad_steps}/{bad_merges}, final weights {w:.3?}, {:.2?}",
            opt.step,
            t.elapsed()
        ),
    )
}

fn c6_expert_safety(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let robot_task = Task::robot2d();
    let arm_task = Task::arm2();
    let (rn, rb) = {
        let d = ctx.robot();
        (d.records.len(), min_barrier(&robot_task, &d.records))
    };
    let (an, ab) = {
        let d = ctx.arm();
        (d.records.len(), min_barrier(&arm_task, &d.records))
    };
    let el = t.elapsed();
    verdict(
        rn == 100 * 137 && rb >= 0.0 && ab >= 0.0 && within(el, 120.0),
        format!("robot2d {rn} records min b {rb:.4}, arm2 {an} records min b {ab:.4}, {el:.2?}"),
    )
}

fn row<'a>(rows: &'a [BenchmarkRow], name: &str) -> &'a BenchmarkRow {
    rows.iter().find(|r| r.name == name).unwrap()
}

fn c7_robot_safety(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let failures_before = backward_failures();
    let bench = ctx.robot_bench();
    let r = row(&bench.rows, "abnet4").report.as_ref().expect("abnet row");
    let (before, after) = bench.val_mse;
    let el = t.elapsed();
    verdict(
        r.safety >= 0.0 && r.unflagged_violations == 0 && within(el, 45.0 * 60.0),
        format!(
            "h=4, {} runs: SAFETY {:.3}, CONSER {:.3} ± {:.3}, U {:.3?}, crashes {}, unflagged {}, val MSE {before:.3} -> {after:.4}, QP backward fallbacks {}, {el:.1?}",
            r.runs,
            r.safety,
            r.conser_mean,
            r.conser_std,
            r.uncertainty,
            r.crashes,
            r.unflagged_violations,
            backward_failures() - failures_before
        ),
    )
}

fn c8_arm_safety(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let task = Task::arm2();
    let records: Vec<Record> = ctx.arm().records.iter().filter(|r| r.traj < 100).cloned().collect();
    let (train, val) = split_by_trajectory(&records, 0.1);
    let norm = Normalizer::fit(train.iter().map(|r| r.z.as_slice())).unwrap();
    let mut model = AbnetModel::new(task.clone(), &HeadSpec::uniform(4, HIDDEN, 8), PENALTY_HIDDEN, norm, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let mut opt = model.new_optimizer(cfg.lr);
    train_oneshot(&mut model, &train, &cfg, &mut opt).expect("arm training");
    let rows = benchmark(&[("abnet4", &model)], &task, &RunConfig::arm2(), Some(&val));
    let r = rows[0].report.as_ref().expect("arm row");
    let el = t.elapsed();
    verdict(
        r.safety >= 0.0 && within(el, 60.0 * 60.0),
        format!(
            "h=4, {} trajectories, {} runs: SAFETY {:.4}, CONSER {:.4} ± {:.4}, U {:.3?}, crashes {}, unflagged {}, held-out MSE {:.2e}, {el:.1?}",
            train.iter().chain(&val).map(|r| r.traj).max().unwrap() + 1,
            r.runs,
            r.safety,
            r.conser_mean,
            r.conser_std,
            r.uncertainty,
            r.crashes,
            r.unflagged_violations,
            r.mse_mean.unwrap_or(f64::NAN)
        ),
    )
}

fn c9_head_sweep(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let task = Task::robot2d();
    let (train, val) = ctx.robot_split();
    let counts = [1usize, 2, 4, 8];
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let points = head_count_sweep(&counts, &[1, 2, 3], &task, HIDDEN, PENALTY_HIDDEN, &train, &val, &cfg, &RunConfig::robot2d())
        .expect("sweep");
    let per_h: Vec<(Vec<f64>, usize, f64)> = counts
        .iter()
        .map(|h| {
            let pts: Vec<_> = points.iter().filter(|p| p.heads == *h).collect();
            let u = (0..2).map(|i| mean(&pts.iter().map(|p| p.uncertainty[i]).collect::<Vec<_>>())).collect();
            let crashes = pts.iter().map(|p| p.crashes).sum();
            let mse = mean(&pts.iter().map(|p| p.mse).collect::<Vec<_>>());
            (u, crashes, mse)
        })
        .collect();
    let first = &per_h[0].0;
    let last = &per_h[counts.len() - 1].0;
    let filters = (0..2).any(|i| last[i] < first[i]);
    let monotone = per_h.windows(2).all(|w| w[1].1 <= w[0].1);
    let el = t.elapsed();
    let summary: Vec<String> = counts
        .iter()
        .zip(&per_h)
        .map(|(h, (u, c, m))| format!("h={h}: U ({:.3}, {:.3}) crashes {c} mse {m:.4}", u[0], u[1]))
        .collect();
    verdict(
        filters && monotone && within(el, 90.0 * 60.0),
        format!("{}; {el:.1?}", summary.join("; ")),
    )
}

fn c10_baseline(ctx: &mut Context) -> Verdict {
    let bench = ctx.robot_bench();
    let a = row(&bench.rows, "abnet4").report.as_ref().expect("abnet row");
    let b = row(&bench.rows, "mlp").report.as_ref().expect("mlp row");
    verdict(
        b.safety < a.safety && b.crashes >= 1,
        format!(
            "MLP SAFETY {:.3} with {} crashed runs (U {:.3?}) vs ABNet SAFETY {:.3}",
            b.safety, b.crashes, b.uncertainty, a.safety
        ),
    )
}

/// Every applied control is the weight-average of the head controls with
/// weights on the simplex.
fn inside_hull(trajs: &[Trajectory]) -> (usize, f64) {
    let mut bad = 0;
    let mut worst = 0.0f64;
    for tr in trajs {
        for ((u, heads), w) in tr.controls.iter().zip(&tr.head_controls).zip(&tr.weights) {
            let combo: Vec<f64> = (0..u.len())
                .map(|i| heads.iter().zip(w).filter(|(h, _)| !h.is_empty()).map(|(h, wk)| wk * h[i]).sum())
                .collect();
            let err = u.iter().zip(&combo).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            if !check_simplex(w) || err > 1e-9 {
                bad += 1;
            }
        }
    }
    (bad, worst)
}

fn c11_merge(ctx: &mut Context) -> Verdict {
    let t = Instant::now();
    let task = Task::robot2d();
    let (train, val) = ctx.robot_split();
    let norm = Normalizer::fit(train.iter().map(|r| r.z.as_slice())).unwrap();
    let opts = SolverOptions::default();
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let models: Vec<AbnetModel> = [21u64, 22]
        .iter()
        .map(|seed| {
            let mut m =
                AbnetModel::new(task.clone(), &HeadSpec::uniform(2, HIDDEN, *seed), PENALTY_HIDDEN, norm.clone(), *seed)
                    .unwrap();
            let c = TrainConfig { seed: *seed, ..cfg.clone() };
            let mut opt = m.new_optimizer(c.lr);
            train_oneshot(&mut m, &train, &c, &mut opt).expect("merge input training");
            m
        })
        .collect();
    let losses: Vec<f64> = models.iter().map(|m| mean(&m.evaluate_mse(&val, &opts).unwrap())).collect();
    let mix = fuse_by_loss(&losses).unwrap();
    let merged = merge(&models[0], &models[1], [mix[0], 1.0 - mix[0]], PenaltyMerge::First).unwrap();
    let trajs = evaluate(&merged, &task, &RunConfig::robot2d()).expect("merged evaluation");
    let rep = abnet_core::harness::compute_metrics(&trajs, None).unwrap();
    let (outside, worst) = inside_hull(&trajs);
    let el = t.elapsed();
    verdict(
        rep.safety >= 0.0 && outside == 0 && within(el, 20.0 * 60.0),
        format!(
            "mix {:.3?} from losses {:.4?}, {} runs: SAFETY {:.3}, crashes {}, steps outside hull {outside} (max gap {worst:.1e}), {el:.1?}",
            [mix[0], 1.0 - mix[0]],
            losses,
            rep.runs,
            rep.safety,
            rep.crashes
        ),
    )
}

fn c12_single_head(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let task = Task::robot2d();
    let mut model =
        AbnetModel::new(task.clone(), &HeadSpec::uniform(1, HIDDEN, 12), PENALTY_HIDDEN, Normalizer::identity(5), 12).unwrap();
    model.logits.data[0] = 0.37;
    let cascades = task.cascades();
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1012);
    let (mut probes, mut mismatches) = (0, 0);
    while probes < 1000 {
        let x = random_state(&task, &mut rng);
        if task.sys().min_barrier(&x) < 0.0 {
            continue;
        }
        probes += 1;
        let z = task.observe(&x, [6.0, rng.gen_range(-3.0..3.0)]);
        let fused = model.forward(&x, &z, &opts).unwrap();
        let lower = model.lower_penalties(&z).unwrap();
        let head = model.heads[0].evaluate(&task, &cascades, &x, &z, &lower, &opts).unwrap();
        let same = fused.u.iter().zip(&head.u).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    verdict(
        mismatches == 0 && within(el, 5.0),
        format!("{probes} probe states, {mismatches} bitwise mismatches, {el:.2?}"),
    )
}

type Criterion = fn(&mut Context) -> Verdict;

fn main() {
    let criteria: [(u32, &str, Criterion); 12] = [
        (1, "QP oracle equivalence", c1_qp_oracle),
        (2, "QP gradient correctness", c2_qp_gradients),
        (3, "Lie-derivative correctness", c3_lie_derivatives),
        (4, "fused-row identity", c4_fused_row),
        (5, "simplex invariant", c5_simplex),
        (6, "expert dataset safety", c6_expert_safety),
        (7, "end-to-end robot safety", c7_robot_safety),
        (8, "end-to-end arm safety", c8_arm_safety),
        (9, "noise-filtering trend", c9_head_sweep),
        (10, "baseline contrast", c10_baseline),
        (11, "merging safety", c11_merge),
        (12, "degenerate-fusion identity", c12_single_head),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut ctx = Context::default();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!("{} #{id:<2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
