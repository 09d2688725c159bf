//! Hand-tuned HOCBF-QP controllers that label the demonstration datasets.

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriernet::{solve_safety_qp, BarrierNetError};
use crate::data::{Dataset, DatasetHeader, Record, FORMAT_VERSION};
use crate::dynamics::{self, DynamicsError, Obstacle};
use crate::qp::SolverOptions;
use crate::rng;
use crate::task::{System, Task};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error(transparent)]
    Qp(#[from] BarrierNetError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid expert configuration: {0}")]
    Config(String),
    #[error("trajectory {traj}: no valid rollout after {attempts} attempts")]
    SamplingExhausted { traj: usize, attempts: usize },
    #[error("start state violates the safety constraint (b = {0})")]
    UnsafeStart(f64),
}

/// Goal-tracking law producing the reference control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackingLaw {
    /// `ω = k_heading · wrap(θ_aim - θ)`, `a = k_speed (v_d - v)` with
    /// `v_d = min(v_max, k_dist · distance to goal)`. The aim point is the
    /// goal, or a via-point beside the obstacle (`detour` beyond its rim)
    /// while the straight segment to the goal would cross it.
    Robot2d {
        k_heading: f64,
        k_speed: f64,
        k_dist: f64,
        v_max: f64,
        detour: f64,
    },
    /// Joint-space PD toward the inverse-kinematics goal angles.
    Arm2 { kp: f64, kd: f64 },
}

/// Axis-aligned box; `lo[i] == hi[i]` pins a coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..*hi) } else { *lo })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// `(p₁, p₂)`, fixed.
    pub penalties: [f64; 2],
    pub law: TrackingLaw,
    pub start: Region,
    /// Cartesian goal point.
    pub goal: Region,
    pub trajectories: usize,
    /// Horizon drawn uniformly from `[min, max]` steps.
    pub horizon: [usize; 2],
    pub goal_tolerance: f64,
    /// End a trajectory once the goal is reached and the system is at rest.
    pub stop_at_goal: bool,
    /// Required `b` at sampled starts and goals.
    pub clearance: f64,
    pub max_attempts: usize,
}

impl ExpertConfig {
    pub fn robot2d() -> Self {
        Self {
            penalties: [1.0, 1.0],
            law: TrackingLaw::Robot2d {
                k_heading: 2.0,
                k_speed: 1.5,
                k_dist: 0.8,
                v_max: 2.0,
                detour: 0.0,
            },
            start: Region {
                lo: vec![-7.0, -3.0, -0.3, 0.0],
                hi: vec![-6.0, 3.0, 0.3, 1.0],
            },
            goal: Region {
                lo: vec![6.0, -3.0],
                hi: vec![6.0, 3.0],
            },
            trajectories: 100,
            horizon: [137, 137],
            goal_tolerance: 0.5,
            stop_at_goal: false,
            clearance: 0.5,
            max_attempts: 50,
        }
    }

    pub fn arm2() -> Self {
        Self {
            penalties: [1.0, 1.0],
            law: TrackingLaw::Arm2 { kp: 2.5, kd: 3.0 },
            start: Region {
                lo: vec![0.0, 0.0, 0.8, 0.0],
                hi: vec![0.6, 0.0, 1.6, 0.0],
            },
            goal: Region {
                lo: vec![0.2, 1.2],
                hi: vec![0.7, 1.7],
            },
            trajectories: 1000,
            horizon: [400, 520],
            goal_tolerance: 0.02,
            stop_at_goal: true,
            clearance: 0.05,
            max_attempts: 50,
        }
    }

    pub fn for_task(task: &Task) -> Self {
        match task.system {
            System::Robot2d(_) => Self::robot2d(),
            System::Arm2(_) => Self::arm2(),
        }
    }

    pub fn validate(&self, task: &Task) -> Result<(), ExpertError> {
        if self.penalties.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(ExpertError::Config(format!("penalties must be positive, got {:?}", self.penalties)));
        }
        let n = task.sys().state_dim();
        if self.start.lo.len() != n || self.start.hi.len() != n || self.goal.lo.len() != 2 || self.goal.hi.len() != 2 {
            return Err(ExpertError::Config("sampling regions have the wrong dimension".into()));
        }
        if self.start.lo.iter().zip(&self.start.hi).chain(self.goal.lo.iter().zip(&self.goal.hi)).any(|(l, h)| l > h) {
            return Err(ExpertError::Config("sampling region has lo > hi".into()));
        }
        if self.horizon[0] == 0 || self.horizon[0] > self.horizon[1] {
            return Err(ExpertError::Config(format!("bad horizon {:?}", self.horizon)));
        }
        if self.max_attempts == 0 {
            return Err(ExpertError::Config("max_attempts must be positive".into()));
        }
        let law_fits = matches!(
            (&self.law, &task.system),
            (TrackingLaw::Robot2d { .. }, System::Robot2d(_)) | (TrackingLaw::Arm2 { .. }, System::Arm2(_))
        );
        if !law_fits {
            return Err(ExpertError::Config("tracking law does not match the task".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON, stored in dataset manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + two_pi
    } else {
        r
    }
}

/// Point beside `o` to head for when the segment `p → goal` passes within
/// `R + detour` of its center ahead of `p`; `None` otherwise.
fn via_point(o: &Obstacle, p: [f64; 2], goal: [f64; 2], detour: f64) -> Option<[f64; 2]> {
    let (gx, gy) = (goal[0] - p[0], goal[1] - p[1]);
    let len = gx.hypot(gy);
    if len < 1e-9 {
        return None;
    }
    let (ux, uy) = (gx / len, gy / len);
    let (cx, cy) = (o.center[0] - p[0], o.center[1] - p[1]);
    let along = cx * ux + cy * uy;
    let cross = ux * cy - uy * cx;
    let clear = o.radius + detour;
    if along <= 0.0 || along >= len || cross.abs() >= clear {
        return None;
    }
    // Pass on the side away from the center; left when dead ahead.
    let side = if cross > 0.0 { -1.0 } else { 1.0 };
    let (nx, ny) = (-uy * side, ux * side);
    Some([o.center[0] + clear * nx, o.center[1] + clear * ny])
}

/// The tracking law's output before the safety filter.
pub fn reference_control(task: &Task, cfg: &ExpertConfig, x: &[f64], goal: [f64; 2]) -> Vec<f64> {
    match (&cfg.law, &task.system) {
        (
            TrackingLaw::Robot2d {
                k_heading,
                k_speed,
                k_dist,
                v_max,
                detour,
            },
            System::Robot2d(robot),
        ) => {
            let (dx, dy) = (goal[0] - x[0], goal[1] - x[1]);
            let dist = dx.hypot(dy);
            let aim = robot
                .obstacles
                .iter()
                .find_map(|o| via_point(o, [x[0], x[1]], goal, *detour))
                .unwrap_or(goal);
            let (ax, ay) = (aim[0] - x[0], aim[1] - x[1]);
            let omega = if dist > 1e-9 {
                k_heading * wrap_angle(ay.atan2(ax) - x[2])
            } else {
                0.0
            };
            let v_d = v_max.min(k_dist * dist);
            vec![omega, k_speed * (v_d - x[3])]
        }
        (TrackingLaw::Arm2 { kp, kd }, System::Arm2(arm)) => {
            let target = arm.ik(goal).unwrap_or([x[0], x[2]]);
            // Shortest angular error so the arm never winds around.
            let e1 = wrap_angle(target[0] - x[0]);
            let e2 = wrap_angle(target[1] - x[2]);
            vec![kp * e1 - kd * x[1], kp * e2 - kd * x[3]]
        }
        _ => unreachable!("validated config"),
    }
}

/// Safe expert label `u*` at `x`: identity-weighted QP around the tracking
/// law with the configured fixed penalties.
pub fn expert_control(task: &Task, cfg: &ExpertConfig, x: &[f64], goal: [f64; 2]) -> Result<Vec<f64>, ExpertError> {
    let u_ref = reference_control(task, cfg, x, goal);
    let q = u_ref.len();
    let qp = solve_safety_qp(
        task.sys(),
        &task.cascades(),
        x,
        &u_ref,
        &vec![1.0; q],
        &cfg.penalties[..1],
        cfg.penalties[1],
        &SolverOptions::default(),
    )?;
    Ok(qp.u())
}

/// Goal point of the end effector or robot.
pub fn position(task: &Task, x: &[f64]) -> [f64; 2] {
    match &task.system {
        System::Robot2d(_) => [x[0], x[1]],
        System::Arm2(arm) => arm.fk(x[0], x[2]),
    }
}

fn speed(task: &Task, x: &[f64]) -> f64 {
    match task.system {
        System::Robot2d(_) => x[3].abs(),
        System::Arm2(_) => x[1].hypot(x[3]),
    }
}

pub fn at_goal(task: &Task, cfg: &ExpertConfig, x: &[f64], goal: [f64; 2]) -> bool {
    let p = position(task, x);
    (p[0] - goal[0]).hypot(p[1] - goal[1]) <= cfg.goal_tolerance
}

/// Samples a start state and goal satisfying the clearance requirements.
pub fn sample_scenario<R: Rng + ?Sized>(
    task: &Task,
    start: &Region,
    goal: &Region,
    clearance: f64,
    rng: &mut R,
) -> Option<(Vec<f64>, [f64; 2])> {
    let sys = task.sys();
    for _ in 0..1000 {
        let x = start.sample(rng);
        let g = goal.sample(rng);
        let goal = [g[0], g[1]];
        if sys.min_barrier(&x) < clearance {
            continue;
        }
        let goal_ok = match &task.system {
            System::Robot2d(r) => r.obstacles.iter().all(|o| o.barrier(goal[0], goal[1]) >= clearance),
            System::Arm2(a) => a.ik(goal).is_some() && a.obstacles.iter().all(|o| o.barrier(goal[0], goal[1]) >= clearance),
        };
        if goal_ok {
            return Some((x, goal));
        }
    }
    None
}

/// `(x_t, u*_t)` for each recorded step.
pub type Rollout = Vec<(Vec<f64>, Vec<f64>)>;

/// One expert rollout from `start`.
pub fn rollout(
    task: &Task,
    cfg: &ExpertConfig,
    start: &[f64],
    goal: [f64; 2],
    horizon: usize,
) -> Result<Rollout, ExpertError> {
    let sys = task.sys();
    let b0 = sys.min_barrier(start);
    if b0 < 0.0 {
        return Err(ExpertError::UnsafeStart(b0));
    }
    let mut x = start.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = expert_control(task, cfg, &x, goal)?;
        let next = dynamics::step(sys, &x, &u, task.dt)?;
        out.push((std::mem::replace(&mut x, next), u));
        if cfg.stop_at_goal && at_goal(task, cfg, &x, goal) && speed(task, &x) < 0.05 {
            break;
        }
    }
    Ok(out)
}

/// Deterministic dataset generation; trajectories run in parallel, each on
/// its own random stream.
pub fn generate_dataset(task: &Task, cfg: &ExpertConfig, seed: u64) -> Result<Dataset, ExpertError> {
    cfg.validate(task)?;
    let sys = task.sys();
    let trajs: Vec<Vec<Record>> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|traj| {
            for attempt in 0..cfg.max_attempts {
                let mut r = rng::stream(seed, "expert", (traj as u64) << 20 | attempt as u64);
                let Some((start, goal)) = sample_scenario(task, &cfg.start, &cfg.goal, cfg.clearance, &mut r) else {
                    continue;
                };
                let horizon = r.gen_range(cfg.horizon[0]..=cfg.horizon[1]);
                match rollout(task, cfg, &start, goal, horizon) {
                    Ok(steps) if steps.iter().all(|(x, _)| sys.min_barrier(x) >= 0.0) => {
                        return Ok(steps
                            .into_iter()
                            .enumerate()
                            .map(|(t, (x, u))| Record {
                                traj,
                                t,
                                z: task.observe(&x, goal),
                                x,
                                goal,
                                u_star: u,
                            })
                            .collect());
                    }
                    Ok(_) => debug!("trajectory {traj} attempt {attempt}: left the safe set, resampling"),
                    Err(e) => debug!("trajectory {traj} attempt {attempt}: {e}, resampling"),
                }
            }
            Err(ExpertError::SamplingExhausted {
                traj,
                attempts: cfg.max_attempts,
            })
        })
        .collect::<Result<_, _>>()?;
    let records: Vec<Record> = trajs.into_iter().flatten().collect();
    info!("generated {} records over {} trajectories", records.len(), cfg.trajectories);
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            task: task.id().into(),
            config_hash: task.config_hash(),
            seed,
            trajectories: cfg.trajectories,
            records: records.len(),
        },
        records,
    })
}

/// Fraction of trajectories that end within the goal tolerance, judged at
/// the state reached by applying the last recorded label.
pub fn goal_reach_fraction(task: &Task, cfg: &ExpertConfig, data: &Dataset) -> f64 {
    let mut last: std::collections::BTreeMap<usize, &Record> = Default::default();
    for r in &data.records {
        last.insert(r.traj, r);
    }
    if last.is_empty() {
        return 0.0;
    }
    let hits = last
        .values()
        .filter(|r| match dynamics::step(task.sys(), &r.x, &r.u_star, task.dt) {
            Ok(x) => at_goal(task, cfg, &x, r.goal),
            Err(_) => false,
        })
        .count();
    hits as f64 / last.len() as f64
}
