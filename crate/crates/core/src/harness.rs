//! Closed-loop evaluation under observation noise, metrics and reports.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abnet::{fuse_heads, train_heads, AbnetError, AbnetModel, HeadSpec, TrainConfig};
use crate::barriernet::Normalizer;
use crate::baseline::MlpPolicy;
use crate::data::Record;
use crate::dynamics::{self, DynamicsError};
use crate::expert::{self, ExpertConfig, Region};
use crate::nn;
use crate::qp::SolverOptions;
use crate::rng;
use crate::task::Task;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("start state is unsafe (b = {0})")]
    UnsafeStart(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("no trajectories or records to evaluate")]
    EmptyInput,
    #[error("scenario sampler found no admissible start and goal")]
    NoScenario,
    #[error("controller: {0}")]
    Controller(String),
    #[error(transparent)]
    Model(#[from] AbnetError),
}

/// One control decision plus diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Action {
    pub u: Vec<f64>,
    pub head_u: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub infeasible_heads: usize,
    pub degenerate_rows: usize,
    pub fallback: bool,
}

/// Anything that maps a (possibly noisy) observation to a control. `x` and
/// `goal` are the true state and goal; learned controllers only use `x` in
/// their safety layer.
pub trait Controller: Sync {
    fn act(&self, x: &[f64], z: &[f64], goal: [f64; 2]) -> Result<Action, HarnessError>;
}

impl Controller for AbnetModel {
    fn act(&self, x: &[f64], z: &[f64], _goal: [f64; 2]) -> Result<Action, HarnessError> {
        let out = self.forward(x, z, &SolverOptions::default())?;
        Ok(Action {
            head_u: out.heads.iter().map(|h| h.as_ref().map_or_else(Vec::new, |h| h.u.clone())).collect(),
            infeasible_heads: out.excluded.len(),
            degenerate_rows: out.degenerate_rows(),
            fallback: out.fallback,
            weights: out.weights,
            u: out.u,
        })
    }
}

impl Controller for MlpPolicy {
    fn act(&self, _x: &[f64], z: &[f64], _goal: [f64; 2]) -> Result<Action, HarnessError> {
        let u = self.eval(z).map_err(|e| HarnessError::Controller(e.to_string()))?;
        Ok(Action {
            u,
            ..Default::default()
        })
    }
}

/// The labelling expert as a controller; it sees the true state and goal.
pub struct ExpertPolicy {
    pub task: Task,
    pub cfg: ExpertConfig,
}

impl Controller for ExpertPolicy {
    fn act(&self, x: &[f64], _z: &[f64], goal: [f64; 2]) -> Result<Action, HarnessError> {
        let u = expert::expert_control(&self.task, &self.cfg, x, goal).map_err(|e| HarnessError::Controller(e.to_string()))?;
        Ok(Action {
            u,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Same start and goal for every run; runs differ only in noise.
    Fixed { start: Vec<f64>, goal: [f64; 2] },
    /// Fresh start and goal per run.
    Sampled { start: Region, goal: Region, clearance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub runs: usize,
    pub horizon: usize,
    /// Uniform noise amplitude as a fraction of each observation entry.
    pub noise: f64,
    pub seed: u64,
    pub scenario: Scenario,
}

impl RunConfig {
    pub fn robot2d() -> Self {
        Self {
            runs: 100,
            horizon: 137,
            noise: 0.1,
            seed: 0,
            scenario: Scenario::Fixed {
                start: vec![-6.5, 0.3, 0.0, 1.0],
                goal: [6.0, 0.0],
            },
        }
    }

    pub fn arm2() -> Self {
        Self {
            runs: 100,
            horizon: 400,
            noise: 0.1,
            seed: 0,
            scenario: Scenario::Fixed {
                start: vec![0.2, 0.0, 1.3, 0.0],
                goal: [0.45, 1.45],
            },
        }
    }

    pub fn for_task(task: &Task) -> Self {
        match task.id() {
            "arm2" => Self::arm2(),
            _ => Self::robot2d(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 || self.horizon == 0 || !(self.noise >= 0.0) {
            return Err(HarnessError::Controller(format!(
                "need runs ≥ 1, horizon ≥ 1 and noise ≥ 0, got {}, {}, {}",
                self.runs, self.horizon, self.noise
            )));
        }
        Ok(())
    }

    /// Start and goal of run `k`; identical for every model.
    pub fn scenario_for(&self, task: &Task, k: usize) -> Result<(Vec<f64>, [f64; 2]), HarnessError> {
        match &self.scenario {
            Scenario::Fixed { start, goal } => Ok((start.clone(), *goal)),
            Scenario::Sampled { start, goal, clearance } => {
                let mut r = rng::stream(self.seed, "scenario", k as u64);
                expert::sample_scenario(task, start, goal, *clearance, &mut r).ok_or(HarnessError::NoScenario)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFlags {
    pub infeasible_steps: usize,
    pub degenerate_rows: usize,
    pub fallback_steps: usize,
}

impl StepFlags {
    pub fn any(&self) -> bool {
        self.infeasible_steps + self.degenerate_rows + self.fallback_steps > 0
    }

    fn add(&mut self, o: &StepFlags) {
        self.infeasible_steps += o.infeasible_steps;
        self.degenerate_rows += o.degenerate_rows;
        self.fallback_steps += o.fallback_steps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal: [f64; 2],
    /// `horizon + 1` states.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// `min_j b_j` at every state.
    pub barrier: Vec<f64>,
    pub head_controls: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<Vec<f64>>,
    pub flags: StepFlags,
}

impl Trajectory {
    pub fn min_barrier(&self) -> f64 {
        self.barrier.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `z_i + U(-η|z_i|, η|z_i|)` per entry.
pub fn perturb<R: Rng + ?Sized>(z: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    if noise == 0.0 {
        return z.to_vec();
    }
    z.iter()
        .map(|v| {
            let a = noise * v.abs();
            if a > 0.0 {
                v + rng.gen_range(-a..=a)
            } else {
                *v
            }
        })
        .collect()
}

/// Rolls `ctrl` from `start` for `horizon` steps; noise touches only the
/// observation handed to the controller.
pub fn closed_loop_run<R: Rng + ?Sized>(
    ctrl: &dyn Controller,
    task: &Task,
    start: &[f64],
    goal: [f64; 2],
    horizon: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Trajectory, HarnessError> {
    let sys = task.sys();
    let b0 = sys.min_barrier(start);
    if b0 < 0.0 {
        return Err(HarnessError::UnsafeStart(b0));
    }
    let mut x = start.to_vec();
    let mut traj = Trajectory {
        goal,
        states: vec![x.clone()],
        controls: Vec::with_capacity(horizon),
        barrier: vec![b0],
        head_controls: Vec::with_capacity(horizon),
        weights: Vec::with_capacity(horizon),
        flags: StepFlags::default(),
    };
    for _ in 0..horizon {
        let z = perturb(&task.observe(&x, goal), noise, rng);
        let a = ctrl.act(&x, &z, goal)?;
        if a.infeasible_heads > 0 {
            traj.flags.infeasible_steps += 1;
        }
        traj.flags.degenerate_rows += a.degenerate_rows;
        if a.fallback {
            traj.flags.fallback_steps += 1;
        }
        x = dynamics::step(sys, &x, &a.u, task.dt)?;
        traj.barrier.push(sys.min_barrier(&x));
        traj.states.push(x.clone());
        traj.controls.push(a.u);
        traj.head_controls.push(a.head_u);
        traj.weights.push(a.weights);
    }
    Ok(traj)
}

/// `n - 1` denominator; exactly zero for fewer than two or identical values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 || v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub safety: f64,
    pub conser_mean: f64,
    pub conser_std: f64,
    /// One entry per control channel.
    pub uncertainty: Vec<f64>,
    pub crashes: usize,
    pub flags: StepFlags,
    /// Runs with `min b < 0` that raised no flag.
    pub unflagged_violations: usize,
}

/// Per-record squared error (mean over control components) on held-out
/// data, without noise.
pub fn heldout_errors(ctrl: &dyn Controller, records: &[Record]) -> Result<Vec<f64>, HarnessError> {
    records
        .par_iter()
        .map(|r| {
            let a = ctrl.act(&r.x, &r.z, r.goal)?;
            nn::mse_loss(&a.u, &r.u_star).map_err(|e| HarnessError::Controller(e.to_string()))
        })
        .collect()
}

pub fn compute_metrics(trajs: &[Trajectory], heldout: Option<&[f64]>) -> Result<MetricsReport, HarnessError> {
    if trajs.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mins: Vec<f64> = trajs.iter().map(Trajectory::min_barrier).collect();
    let steps = trajs.iter().map(|t| t.controls.len()).min().unwrap_or(0);
    let q = trajs.iter().find_map(|t| t.controls.first().map(Vec::len)).unwrap_or(0);
    let uncertainty = (0..q)
        .map(|i| {
            if steps == 0 {
                return 0.0;
            }
            let per_t: Vec<f64> = (0..steps)
                .map(|t| sample_std(&trajs.iter().map(|tr| tr.controls[t][i]).collect::<Vec<_>>()))
                .collect();
            mean(&per_t)
        })
        .collect();
    let mut flags = StepFlags::default();
    for t in trajs {
        flags.add(&t.flags);
    }
    let (mse_mean, mse_std) = match heldout {
        Some(e) if !e.is_empty() => (Some(mean(e)), Some(sample_std(e))),
        _ => (None, None),
    };
    Ok(MetricsReport {
        runs: trajs.len(),
        mse_mean,
        mse_std,
        safety: mins.iter().copied().fold(f64::INFINITY, f64::min),
        conser_mean: mean(&mins),
        conser_std: sample_std(&mins),
        uncertainty,
        crashes: mins.iter().filter(|b| **b < 0.0).count(),
        unflagged_violations: trajs.iter().filter(|t| t.min_barrier() < 0.0 && !t.flags.any()).count(),
        flags,
    })
}

/// All runs of one controller under `cfg`; run `k` uses the same scenario
/// and noise stream for every controller.
pub fn evaluate(ctrl: &dyn Controller, task: &Task, cfg: &RunConfig) -> Result<Vec<Trajectory>, HarnessError> {
    cfg.validate()?;
    (0..cfg.runs)
        .into_par_iter()
        .map(|k| {
            let (start, goal) = cfg.scenario_for(task, k)?;
            let mut noise = rng::stream(cfg.seed, "noise", k as u64);
            closed_loop_run(ctrl, task, &start, goal, cfg.horizon, cfg.noise, &mut noise)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// Paired evaluation of several controllers; a failing controller yields a
/// row with its error instead of aborting the table.
pub fn benchmark(
    models: &[(&str, &dyn Controller)],
    task: &Task,
    cfg: &RunConfig,
    heldout: Option<&[Record]>,
) -> Vec<BenchmarkRow> {
    models
        .iter()
        .map(|(name, ctrl)| {
            let result = evaluate(*ctrl, task, cfg).and_then(|trajs| {
                let errs = heldout.map(|h| heldout_errors(*ctrl, h)).transpose()?;
                let rep = compute_metrics(&trajs, errs.as_deref())?;
                Ok((rep, trajs))
            });
            match result {
                Ok((rep, trajs)) => BenchmarkRow {
                    name: name.to_string(),
                    report: Some(rep),
                    error: None,
                    trajectories: trajs,
                },
                Err(e) => {
                    warn!("{name}: {e}");
                    BenchmarkRow {
                        name: name.to_string(),
                        report: None,
                        error: Some(e.to_string()),
                        trajectories: Vec::new(),
                    }
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub heads: usize,
    pub seed: u64,
    pub mse: f64,
    pub uncertainty: Vec<f64>,
    pub safety: f64,
    pub crashes: usize,
}

/// Scalable training at each head count and seed, then the noisy benchmark.
#[allow(clippy::too_many_arguments)]
pub fn head_count_sweep(
    head_counts: &[usize],
    seeds: &[u64],
    task: &Task,
    hidden: &[usize],
    penalty_hidden: &[usize],
    train: &[Record],
    val: &[Record],
    train_cfg: &TrainConfig,
    run_cfg: &RunConfig,
) -> Result<Vec<SweepPoint>, HarnessError> {
    if head_counts.is_empty() || head_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Controller("head counts must be nonempty and ascending".into()));
    }
    let normalizer = Normalizer::fit(train.iter().map(|r| r.z.as_slice())).ok_or(HarnessError::EmptyInput)?;
    let mut out = Vec::new();
    for &seed in seeds {
        // Nested head sets: the h-head model extends the smaller ones, so
        // every head is trained once per seed.
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let specs = HeadSpec::uniform(*head_counts.last().unwrap(), hidden, seed);
        let trained = train_heads(task, &specs, penalty_hidden, &normalizer, train, &cfg);
        for &h in head_counts {
            let subset = trained[..h]
                .iter()
                .map(|r| match r {
                    Ok(t) => Ok(t.clone()),
                    Err(e) => Err(AbnetError::Invalid(e.to_string())),
                })
                .collect();
            let res = fuse_heads(task, subset, train, val, &cfg)?;
            let trajs = evaluate(&res.model, task, run_cfg)?;
            let eval_set = if val.is_empty() { train } else { val };
            let errs = heldout_errors(&res.model, eval_set)?;
            let rep = compute_metrics(&trajs, Some(&errs))?;
            out.push(SweepPoint {
                heads: h,
                seed,
                mse: rep.mse_mean.unwrap_or(f64::NAN),
                uncertainty: rep.uncertainty,
                safety: rep.safety,
                crashes: rep.crashes,
            });
        }
    }
    Ok(out)
}

pub fn report_json(rows: &[BenchmarkRow]) -> String {
    serde_json::to_string_pretty(rows).expect("report serializes")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Table columns: MSE mean/std, SAFETY, CONSER mean/std, per-channel
/// uncertainty, crash count and flags.
pub fn report_csv(rows: &[BenchmarkRow]) -> String {
    let q = rows
        .iter()
        .filter_map(|r| r.report.as_ref())
        .map(|r| r.uncertainty.len())
        .max()
        .unwrap_or(2);
    let mut s = String::from("model,mse_mean,mse_std,safety,conser_mean,conser_std");
    for i in 1..=q {
        let _ = write!(s, ",u{i}_uncertainty");
    }
    s.push_str(",crashes,infeasible_steps,degenerate_rows,fallback_steps,unflagged_violations,error\n");
    for r in rows {
        let _ = write!(s, "{}", r.name);
        match &r.report {
            Some(m) => {
                let _ = write!(
                    s,
                    ",{},{},{:.6},{:.6},{:.6}",
                    opt(m.mse_mean),
                    opt(m.mse_std),
                    m.safety,
                    m.conser_mean,
                    m.conser_std
                );
                for i in 0..q {
                    let _ = write!(s, ",{}", opt(m.uncertainty.get(i).copied()));
                }
                let _ = writeln!(
                    s,
                    ",{},{},{},{},{},",
                    m.crashes,
                    m.flags.infeasible_steps,
                    m.flags.degenerate_rows,
                    m.flags.fallback_steps,
                    m.unflagged_violations
                );
            }
            None => {
                s.push_str(&",".repeat(5 + q + 5));
                let _ = writeln!(s, ",\"{}\"", r.error.as_deref().unwrap_or("").replace('"', "'"));
            }
        }
    }
    s
}

/// Long-format control profile: `run,t,u1..uq,b`.
pub fn trace_csv(trajs: &[Trajectory]) -> String {
    let q = trajs.iter().find_map(|t| t.controls.first().map(Vec::len)).unwrap_or(0);
    let mut s = String::from("run,t");
    for i in 1..=q {
        let _ = write!(s, ",u{i}");
    }
    s.push_str(",b\n");
    for (k, tr) in trajs.iter().enumerate() {
        for (t, u) in tr.controls.iter().enumerate() {
            let _ = write!(s, "{k},{t}");
            for v in u {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", tr.barrier[t]);
        }
    }
    s
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("heads,seed,mse,u1_uncertainty,u2_uncertainty,safety,crashes\n");
    for p in points {
        let u = |i: usize| p.uncertainty.get(i).map_or_else(String::new, |v| format!("{v:.6}"));
        let _ = writeln!(s, "{},{},{:.6},{},{},{:.6},{}", p.heads, p.seed, p.mse, u(0), u(1), p.safety, p.crashes);
    }
    s
}
