//! Multi-head fusion of BarrierNet heads, training, merging and checkpoints.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriernet::{fallback_control, BarrierNetError, Head, HeadNodes, HeadOutput, Normalizer, ObservationMap};
use crate::data::Record;
use crate::hocbf::{fused_row_residual, HocbfCascade};
use crate::nn::{self, softplus, AdamState, Gradients, Mlp, NnError, NodeId, Tape, Tensor};
use crate::qp::SolverOptions;
use crate::rng;
use crate::task::Task;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Allowed deviation of `Σ w_k` from one.
pub const SIMPLEX_TOL: f64 = 1e-12;
const LOSS_FLOOR: f64 = 1e-12;
/// Smallest weight representable through a finite logit.
const MIN_WEIGHT: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum AbnetError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("a model needs at least one head")]
    NoHeads,
    #[error("loss {value} of head {head} is not positive")]
    NonPositiveLoss { head: usize, value: f64 },
    #[error("models are incompatible: {0}")]
    IncompatibleTasks(String),
    #[error("mixing weights {0:?} are not on the simplex")]
    BadMix(Vec<f64>),
    #[error("fusion weights left the simplex: {0:?}")]
    SimplexViolation(Vec<f64>),
    #[error("every head failed to train")]
    AllHeadsFailed,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Head(#[from] BarrierNetError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Network producing the shared lower-order penalties `p_1 .. p_{m-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyNet {
    pub net: Mlp,
    pub normalizer: Normalizer,
}

impl PenaltyNet {
    pub fn new<R: rand::Rng + ?Sized>(task: &Task, hidden: &[usize], normalizer: Normalizer, rng: &mut R) -> Self {
        let lower = task.cascades().first().map_or(1, |c| c.degree() - 1);
        let mut dims = vec![task.obs_dim()];
        dims.extend_from_slice(hidden);
        dims.push(lower);
        Self {
            net: Mlp::new(&dims, rng),
            normalizer,
        }
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.net.eval(&self.normalizer.apply(z))?.into_iter().map(softplus).collect())
    }

    fn forward_tape<'p>(&'p self, tape: &mut Tape<'p>, z: &[f64]) -> Result<NodeId, NnError> {
        let input = tape.input(self.normalizer.apply(z));
        let raw = self.net.forward(tape, input)?;
        Ok(tape.softplus(raw))
    }
}

/// Architecture and seed of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "identity_map")]
    pub obs_map: ObservationMap,
    pub seed: u64,
}

fn identity_map() -> ObservationMap {
    ObservationMap::Identity
}

impl HeadSpec {
    /// `h` identical architectures with independent seeds.
    pub fn uniform(h: usize, hidden: &[usize], seed: u64) -> Vec<Self> {
        (0..h)
            .map(|k| HeadSpec {
                hidden: hidden.to_vec(),
                obs_map: ObservationMap::Identity,
                seed: seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnetModel {
    pub task: Task,
    pub heads: Vec<Head>,
    /// Outputs are averaged; one member is the usual shared penalty net.
    pub penalty: Vec<PenaltyNet>,
    pub logits: Tensor,
}

/// Evaluation-time output of the fused model.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub u: Vec<f64>,
    /// Weights actually applied, after excluding infeasible heads.
    pub weights: Vec<f64>,
    pub lower: Vec<f64>,
    pub heads: Vec<Option<HeadOutput>>,
    pub excluded: Vec<usize>,
    /// No head was feasible; `u` is the minimum-norm box control.
    pub fallback: bool,
}

impl FusedOutput {
    pub fn degenerate_rows(&self) -> usize {
        self.heads.iter().flatten().map(|h| h.qp.degenerate.len()).sum()
    }

    /// `(constraint, a·u - Σ_k w_k rhs_k)` for every constraint that has a
    /// row in all surviving heads.
    pub fn fused_residuals(&self) -> Vec<(usize, f64)> {
        let live: Vec<(&HeadOutput, f64)> = self
            .heads
            .iter()
            .zip(&self.weights)
            .filter_map(|(h, w)| h.as_ref().map(|h| (h, *w)))
            .collect();
        let Some((first, _)) = live.first() else {
            return Vec::new();
        };
        first
            .qp
            .rows
            .iter()
            .filter_map(|row| {
                let rows: Option<Vec<_>> = live
                    .iter()
                    .map(|(h, _)| h.qp.rows.iter().find(|r| r.constraint == row.constraint).cloned())
                    .collect();
                let ws: Vec<f64> = live.iter().map(|(_, w)| *w).collect();
                rows.map(|rows| (row.constraint, fused_row_residual(&rows, &ws, &self.u)))
            })
            .collect()
    }
}

struct TapeOutput {
    u: NodeId,
    heads: Vec<HeadNodes>,
}

impl AbnetModel {
    pub fn new(
        task: Task,
        specs: &[HeadSpec],
        penalty_hidden: &[usize],
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self, AbnetError> {
        if specs.is_empty() {
            return Err(AbnetError::NoHeads);
        }
        let heads = specs
            .iter()
            .map(|s| {
                let mut r = rng::stream(s.seed, "head", 0);
                Head::new(&task, &s.hidden, normalizer.clone(), s.obs_map.clone(), &mut r)
            })
            .collect();
        let mut r = rng::stream(seed, "penalty", 0);
        let penalty = vec![PenaltyNet::new(&task, penalty_hidden, normalizer, &mut r)];
        Ok(Self {
            task,
            heads,
            penalty,
            logits: Tensor::vector(vec![0.0; specs.len()]),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        nn::softmax(&self.logits.data)
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        self.logits = Tensor::vector(logits_from_weights(w));
    }

    pub fn cascades(&self) -> Vec<HocbfCascade> {
        self.task.cascades()
    }

    pub fn validate(&self) -> Result<(), AbnetError> {
        if self.heads.is_empty() {
            return Err(AbnetError::NoHeads);
        }
        if self.penalty.is_empty() {
            return Err(AbnetError::Invalid("no penalty network".into()));
        }
        if self.logits.len() != self.heads.len() || !self.logits.data.iter().all(|l| l.is_finite()) {
            return Err(AbnetError::Invalid("logits do not match heads".into()));
        }
        let q = self.task.sys().control_dim();
        let obs = self.task.obs_dim();
        for (k, h) in self.heads.iter().enumerate() {
            h.backbone.validate()?;
            if h.control_dim() != q
                || h.backbone.output_dim() != 2 * q + 1
                || h.normalizer.dim() != obs
                || h.backbone.input_dim() != h.obs_map.out_dim(obs)
            {
                return Err(AbnetError::Invalid(format!("head {k} does not fit the task")));
            }
        }
        for p in &self.penalty {
            p.net.validate()?;
            if p.net.input_dim() != obs || p.normalizer.dim() != obs {
                return Err(AbnetError::Invalid("penalty network does not fit the task".into()));
            }
        }
        Ok(())
    }

    pub fn check_simplex(&self) -> Result<(), AbnetError> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(AbnetError::SimplexViolation(w));
        }
        Ok(())
    }

    /// Trainable tensors in tape slot order: penalty nets, heads, logits.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.penalty.iter().flat_map(|p| p.net.tensors()).collect();
        out.extend(self.heads.iter().flat_map(|h| h.backbone.tensors()));
        out.push(&self.logits);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.penalty.iter_mut().flat_map(|p| p.net.tensors_mut()).collect();
        out.extend(self.heads.iter_mut().flat_map(|h| h.backbone.tensors_mut()));
        out.push(&mut self.logits);
        out
    }

    pub fn new_optimizer(&self, lr: f64) -> AdamState {
        AdamState::for_params(&self.params(), lr)
    }

    /// Lower-order penalties: the mean of the penalty networks' outputs.
    pub fn lower_penalties(&self, z: &[f64]) -> Result<Vec<f64>, AbnetError> {
        let mut acc = self.penalty[0].eval(z)?;
        for p in &self.penalty[1..] {
            for (a, v) in acc.iter_mut().zip(p.eval(z)?) {
                *a += v;
            }
        }
        if self.penalty.len() > 1 {
            let k = 1.0 / self.penalty.len() as f64;
            acc.iter_mut().for_each(|a| *a *= k);
        }
        Ok(acc)
    }

    fn lower_tape<'p>(&'p self, tape: &mut Tape<'p>, z: &[f64]) -> Result<NodeId, AbnetError> {
        let mut acc = self.penalty[0].forward_tape(tape, z)?;
        for p in &self.penalty[1..] {
            let v = p.forward_tape(tape, z)?;
            acc = tape.add(acc, v)?;
        }
        if self.penalty.len() > 1 {
            acc = tape.scale(acc, 1.0 / self.penalty.len() as f64);
        }
        Ok(acc)
    }

    /// Fused control at state `x` with observation `z`. Heads whose QP is
    /// infeasible are dropped and the remaining weights renormalized.
    pub fn forward(&self, x: &[f64], z: &[f64], opts: &SolverOptions) -> Result<FusedOutput, AbnetError> {
        let cascades = self.cascades();
        let lower = self.lower_penalties(z)?;
        let w = self.weights();
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut excluded = Vec::new();
        for (k, head) in self.heads.iter().enumerate() {
            match head.evaluate(&self.task, &cascades, x, z, &lower, opts) {
                Ok(out) => heads.push(Some(out)),
                Err(e) if e.is_infeasible() => {
                    excluded.push(k);
                    heads.push(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if excluded.len() == heads.len() {
            warn!("all heads infeasible at {x:?}, using fallback control");
            return Ok(FusedOutput {
                u: fallback_control(self.task.sys()),
                weights: vec![0.0; w.len()],
                lower,
                heads,
                excluded,
                fallback: true,
            });
        }
        let weights: Vec<f64> = if excluded.is_empty() {
            w
        } else {
            let live: f64 = w.iter().zip(&heads).filter(|(_, h)| h.is_some()).map(|(w, _)| w).sum();
            w.iter()
                .zip(&heads)
                .map(|(w, h)| if h.is_some() { w / live } else { 0.0 })
                .collect()
        };
        let u = combine(&heads, &weights);
        Ok(FusedOutput {
            u,
            weights,
            lower,
            heads,
            excluded,
            fallback: false,
        })
    }

    fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        cascades: &[HocbfCascade],
        x: &[f64],
        z: &[f64],
        opts: &SolverOptions,
    ) -> Result<TapeOutput, AbnetError> {
        let lower = self.lower_tape(tape, z)?;
        let heads = self
            .heads
            .iter()
            .map(|h| h.forward_tape(tape, &self.task, cascades, x, z, lower, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let logits = tape.param(&self.logits);
        let w = tape.softmax(logits);
        let mut u = None;
        for (k, h) in heads.iter().enumerate() {
            let wk = tape.slice(w, k, 1)?;
            let term = tape.scale_by(h.u, wk)?;
            u = Some(match u {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(TapeOutput {
            u: u.expect("at least one head"),
            heads,
        })
    }

    /// Loss and parameter gradient for one record; `None` if some head's QP
    /// was infeasible there.
    pub fn sample_gradient(
        &self,
        rec: &Record,
        cfg: &TrainConfig,
        cascades: &[HocbfCascade],
    ) -> Result<Option<(f64, Gradients)>, AbnetError> {
        let mut tape = Tape::new();
        let out = match self.forward_tape(&mut tape, cascades, &rec.x, &rec.z, &cfg.qp) {
            Ok(o) => o,
            Err(AbnetError::Head(e)) if e.is_infeasible() => return Ok(None),
            Err(e) => return Err(e),
        };
        let y = tape.input(rec.u_star.clone());
        let fused = tape.mse(out.u, y)?;
        let mut loss = tape.scale(fused, cfg.lambda_fused);
        let inv_h = 1.0 / self.heads.len() as f64;
        for h in &out.heads {
            let lu = tape.mse(h.u, y)?;
            let lu = tape.scale(lu, cfg.lambda_heads * inv_h);
            let lr = tape.mse(h.u_ref, y)?;
            let lr = tape.scale(lr, cfg.lambda_ref * inv_h);
            loss = tape.add(loss, lu)?;
            loss = tape.add(loss, lr)?;
        }
        let value = tape.value(loss)[0];
        Ok(Some((value, tape.backward(loss))))
    }

    /// Per-record MSE of the fused control against the label.
    pub fn evaluate_mse(&self, records: &[Record], opts: &SolverOptions) -> Result<Vec<f64>, AbnetError> {
        records
            .par_iter()
            .map(|r| {
                let out = self.forward(&r.x, &r.z, opts)?;
                Ok(nn::mse_loss(&out.u, &r.u_star)?)
            })
            .collect()
    }
}

fn combine(heads: &[Option<HeadOutput>], weights: &[f64]) -> Vec<f64> {
    let mut u: Option<Vec<f64>> = None;
    for (h, w) in heads.iter().zip(weights) {
        let Some(h) = h else { continue };
        let term = h.u.iter().map(|v| v * w);
        u = Some(match u {
            None => term.collect(),
            Some(acc) => acc.iter().zip(term).map(|(a, t)| a + t).collect(),
        });
    }
    u.expect("at least one live head")
}

fn logits_from_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.max(MIN_WEIGHT).ln()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "head")]
pub enum PenaltySelection {
    Average,
    Pick(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_fused: f64,
    pub lambda_heads: f64,
    pub lambda_ref: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<u64>,
    /// Logit-only iterations after loss-based fusion in scalable training.
    pub extra_iters: usize,
    pub penalty_selection: PenaltySelection,
    pub qp: SolverOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lambda_fused: 1.0,
            lambda_heads: 0.5,
            lambda_ref: 0.5,
            seed: 0,
            max_steps: None,
            extra_iters: 0,
            penalty_selection: PenaltySelection::Average,
            qp: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub infeasible_samples: usize,
}

impl TrainReport {
    /// Whether the last epoch's loss is below the first one's.
    pub fn decreasing(&self) -> bool {
        match (self.epoch_loss.first(), self.epoch_loss.last()) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        }
    }
}

/// Joint training of every parameter with Adam on minibatches.
pub fn train_oneshot(
    model: &mut AbnetModel,
    train: &[Record],
    cfg: &TrainConfig,
    opt: &mut AdamState,
) -> Result<TrainReport, AbnetError> {
    use rand::seq::SliceRandom;
    if train.is_empty() {
        return Err(AbnetError::EmptyDataset);
    }
    model.validate()?;
    let cascades = model.cascades();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let batch = cfg.batch_size.max(1);
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let m: &AbnetModel = model;
            let results: Vec<Option<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|&i| m.sample_gradient(&train[i], cfg, &cascades))
                .collect::<Result<_, _>>()?;
            let mut grads: Option<Gradients> = None;
            let mut n = 0usize;
            for r in results {
                match r {
                    None => report.infeasible_samples += 1,
                    Some((l, g)) => {
                        sum += l;
                        n += 1;
                        match grads.as_mut() {
                            None => grads = Some(g),
                            Some(acc) => acc.add_assign(&g),
                        }
                    }
                }
            }
            count += n;
            let Some(mut g) = grads else { continue };
            g.scale(1.0 / n as f64);
            opt.step(model.params_mut(), &g)?;
            report.steps += 1;
            model.check_simplex()?;
        }
        if count > 0 {
            let mean = sum / count as f64;
            info!("epoch {epoch}: loss {mean:.6e} over {count} samples");
            report.epoch_loss.push(mean);
        }
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break 'epochs;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionProvenance {
    TrainedLogits,
    LossRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub provenance: FusionProvenance,
}

/// Reciprocal-loss weights `w_k ∝ 1/ℓ_k`.
pub fn fuse_by_loss(losses: &[f64]) -> Result<Vec<f64>, AbnetError> {
    if losses.is_empty() {
        return Err(AbnetError::NoHeads);
    }
    if let Some((head, value)) = losses.iter().enumerate().find(|(_, l)| !(**l > 0.0) || !l.is_finite()) {
        return Err(AbnetError::NonPositiveLoss { head, value: *value });
    }
    let inv: Vec<f64> = losses.iter().map(|l| 1.0 / l.max(LOSS_FLOOR)).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone)]
pub struct ScalableResult {
    pub model: AbnetModel,
    pub fusion: FusionReport,
    pub head_reports: Vec<TrainReport>,
    /// Indices into the spec list of heads that failed and were left out.
    pub failed: Vec<usize>,
}

/// One head trained alone, with the penalty network it was trained with.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: Head,
    pub penalty: PenaltyNet,
    pub report: TrainReport,
}

/// Trains each spec as its own single-head model, in parallel. Failures are
/// reported per head.
pub fn train_heads(
    task: &Task,
    specs: &[HeadSpec],
    penalty_hidden: &[usize],
    normalizer: &Normalizer,
    train: &[Record],
    cfg: &TrainConfig,
) -> Vec<Result<TrainedHead, AbnetError>> {
    specs
        .par_iter()
        .map(|spec| {
            if train.is_empty() {
                return Err(AbnetError::EmptyDataset);
            }
            let mut m = AbnetModel::new(task.clone(), std::slice::from_ref(spec), penalty_hidden, normalizer.clone(), spec.seed)?;
            let mut opt = m.new_optimizer(cfg.lr);
            let c = TrainConfig {
                seed: spec.seed,
                ..cfg.clone()
            };
            let report = train_oneshot(&mut m, train, &c, &mut opt)?;
            Ok(TrainedHead {
                head: m.heads.remove(0),
                penalty: m.penalty.remove(0),
                report,
            })
        })
        .collect()
}

/// Freezes independently trained heads into one model: reconciles their
/// penalty networks and sets the weights from validation losses (`val`, or
/// `train` when `val` is empty). Failed heads are logged and left out.
pub fn fuse_heads(
    task: &Task,
    trained: Vec<Result<TrainedHead, AbnetError>>,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
) -> Result<ScalableResult, AbnetError> {
    if trained.is_empty() {
        return Err(AbnetError::NoHeads);
    }
    let mut heads = Vec::new();
    let mut penalties = Vec::new();
    let mut head_reports = Vec::new();
    let mut failed = Vec::new();
    for (k, r) in trained.into_iter().enumerate() {
        match r {
            Ok(t) => {
                heads.push(t.head);
                penalties.push(t.penalty);
                head_reports.push(t.report);
            }
            Err(e) => {
                warn!("head {k} failed to train: {e}");
                failed.push(k);
            }
        }
    }
    if heads.is_empty() {
        return Err(AbnetError::AllHeadsFailed);
    }
    let penalty = match cfg.penalty_selection {
        PenaltySelection::Average => penalties,
        PenaltySelection::Pick(k) => {
            if k >= penalties.len() {
                return Err(AbnetError::Invalid(format!("cannot pick penalty net {k} of {}", penalties.len())));
            }
            vec![penalties.swap_remove(k)]
        }
    };
    let n = heads.len();
    let mut model = AbnetModel {
        task: task.clone(),
        heads,
        penalty,
        logits: Tensor::vector(vec![0.0; n]),
    };
    let eval_set = if val.is_empty() { train } else { val };
    let losses = head_losses(&model, eval_set, &cfg.qp)?;
    let weights = fuse_by_loss(&losses)?;
    model.set_weights(&weights);
    model.check_simplex()?;
    if cfg.extra_iters > 0 {
        tune_logits(&mut model, train, cfg)?;
    }
    Ok(ScalableResult {
        fusion: FusionReport {
            losses,
            weights: model.weights(),
            provenance: if cfg.extra_iters > 0 {
                FusionProvenance::TrainedLogits
            } else {
                FusionProvenance::LossRule
            },
        },
        model,
        head_reports,
        failed,
    })
}

/// [`train_heads`] followed by [`fuse_heads`].
pub fn train_scalable(
    task: &Task,
    specs: &[HeadSpec],
    penalty_hidden: &[usize],
    normalizer: &Normalizer,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
) -> Result<ScalableResult, AbnetError> {
    if specs.is_empty() {
        return Err(AbnetError::NoHeads);
    }
    if train.is_empty() {
        return Err(AbnetError::EmptyDataset);
    }
    let trained = train_heads(task, specs, penalty_hidden, normalizer, train, cfg);
    fuse_heads(task, trained, train, val, cfg)
}

/// Per-head MSE on `records` under the model's shared penalties. Records
/// where a head is infeasible are skipped for that head.
pub fn head_losses(model: &AbnetModel, records: &[Record], opts: &SolverOptions) -> Result<Vec<f64>, AbnetError> {
    if records.is_empty() {
        return Err(AbnetError::EmptyDataset);
    }
    let cascades = model.cascades();
    let per_record: Vec<Vec<Option<f64>>> = records
        .par_iter()
        .map(|r| {
            let lower = model.lower_penalties(&r.z)?;
            model
                .heads
                .iter()
                .map(|h| match h.evaluate(&model.task, &cascades, &r.x, &r.z, &lower, opts) {
                    Ok(o) => Ok(Some(nn::mse_loss(&o.u, &r.u_star)?)),
                    Err(e) if e.is_infeasible() => Ok(None),
                    Err(e) => Err(AbnetError::from(e)),
                })
                .collect()
        })
        .collect::<Result<_, AbnetError>>()?;
    Ok((0..model.num_heads())
        .map(|k| {
            let vals: Vec<f64> = per_record.iter().filter_map(|r| r[k]).collect();
            if vals.is_empty() {
                f64::INFINITY
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect())
}

/// Full-batch Adam on the logits alone, with head outputs held fixed.
fn tune_logits(model: &mut AbnetModel, records: &[Record], cfg: &TrainConfig) -> Result<(), AbnetError> {
    let cascades = model.cascades();
    let m: &AbnetModel = model;
    let samples: Vec<(Vec<Vec<f64>>, Vec<f64>)> = records
        .par_iter()
        .filter_map(|r| {
            let lower = m.lower_penalties(&r.z).ok()?;
            let us: Option<Vec<Vec<f64>>> = m
                .heads
                .iter()
                .map(|h| h.evaluate(&m.task, &cascades, &r.x, &r.z, &lower, &cfg.qp).ok().map(|o| o.u))
                .collect();
            us.map(|us| (us, r.u_star.clone()))
        })
        .collect();
    if samples.is_empty() {
        return Ok(());
    }
    let mut opt = AdamState::new(&[model.num_heads()], cfg.lr);
    for _ in 0..cfg.extra_iters {
        let w = model.weights();
        let mut gw = vec![0.0; w.len()];
        for (us, y) in &samples {
            let q = y.len() as f64;
            for i in 0..y.len() {
                let ui: f64 = us.iter().zip(&w).map(|(u, w)| w * u[i]).sum();
                let r = 2.0 * (ui - y[i]) / q;
                for (k, u) in us.iter().enumerate() {
                    gw[k] += r * u[i];
                }
            }
        }
        gw.iter_mut().for_each(|g| *g /= samples.len() as f64);
        let dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let gl: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| w * (g - dot)).collect();
        opt.step(vec![&mut model.logits], &Gradients { slots: vec![gl] })?;
        model.check_simplex()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMerge {
    /// Keep the first model's penalty networks.
    #[default]
    First,
    /// Average over both models' penalty networks.
    Average,
}

/// Concatenates the heads of `a` and `b` with weights
/// `[mix₀·wᴬ, mix₁·wᴮ]`.
pub fn merge(a: &AbnetModel, b: &AbnetModel, mix: [f64; 2], penalty: PenaltyMerge) -> Result<AbnetModel, AbnetError> {
    if a.task.config_hash() != b.task.config_hash() {
        return Err(AbnetError::IncompatibleTasks(format!(
            "{} ({}) vs {} ({})",
            a.task.id(),
            a.task.config_hash(),
            b.task.id(),
            b.task.config_hash()
        )));
    }
    if mix.iter().any(|m| !(*m >= 0.0)) || (mix[0] + mix[1] - 1.0).abs() > SIMPLEX_TOL {
        return Err(AbnetError::BadMix(mix.to_vec()));
    }
    let weights: Vec<f64> = a
        .weights()
        .iter()
        .map(|w| mix[0] * w)
        .chain(b.weights().iter().map(|w| mix[1] * w))
        .collect();
    let mut heads = a.heads.clone();
    heads.extend(b.heads.iter().cloned());
    let mut nets = a.penalty.clone();
    if penalty == PenaltyMerge::Average {
        nets.extend(b.penalty.iter().cloned());
    }
    let merged = AbnetModel {
        task: a.task.clone(),
        heads,
        penalty: nets,
        logits: Tensor::vector(logits_from_weights(&weights)),
    };
    merged.validate()?;
    merged.check_simplex()?;
    Ok(merged)
}

/// On-disk model: one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task_id: String,
    pub config_hash: String,
    pub model: AbnetModel,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub fusion: Option<FusionReport>,
}

impl Checkpoint {
    pub fn new(model: AbnetModel, optimizer: Option<AdamState>, fusion: Option<FusionReport>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            task_id: model.task.id().into(),
            config_hash: model.task.config_hash(),
            model,
            optimizer,
            fusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses and validates a checkpoint; with `expected`, also refuses a
    /// model built for a different task configuration.
    pub fn from_json(text: &str, expected: Option<&Task>) -> Result<Self, AbnetError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| AbnetError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(AbnetError::Checkpoint(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.config_hash != ck.model.task.config_hash() {
            return Err(AbnetError::Checkpoint("stored hash does not match the embedded task".into()));
        }
        if let Some(t) = expected {
            if t.config_hash() != ck.config_hash {
                return Err(AbnetError::IncompatibleTasks(format!(
                    "checkpoint is for {} ({}), expected {} ({})",
                    ck.task_id,
                    ck.config_hash,
                    t.id(),
                    t.config_hash()
                )));
            }
        }
        ck.model.validate()?;
        if let Some(opt) = &ck.optimizer {
            let sizes: Vec<usize> = ck.model.params().iter().map(|t| t.len()).collect();
            if opt.sizes() != sizes {
                return Err(AbnetError::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_rule_examples() {
        assert_eq!(fuse_by_loss(&[1.0, 3.0]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(fuse_by_loss(&[2.0; 4]).unwrap(), vec![0.25; 4]);
        let a = fuse_by_loss(&[0.3, 1.7, 0.9]).unwrap();
        let b = fuse_by_loss(&[3.0, 17.0, 9.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(fuse_by_loss(&[1.0, 0.0]), Err(AbnetError::NonPositiveLoss { head: 1, .. })));
        assert!(matches!(fuse_by_loss(&[-1.0]), Err(AbnetError::NonPositiveLoss { head: 0, .. })));
    }

    #[test]
    fn logits_round_trip_weights() {
        let w = [0.2, 0.5, 0.3];
        let back = nn::softmax(&logits_from_weights(&w));
        for (a, b) in w.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
        let back = nn::softmax(&logits_from_weights(&[1.0, 0.0]));
        assert_eq!(back[0], 1.0);
        assert!(back[1] < 1e-290);
    }

    #[test]
    fn model_shapes() {
        let task = Task::robot2d();
        let m = AbnetModel::new(task.clone(), &HeadSpec::uniform(3, &[8], 1), &[4], Normalizer::identity(5), 0).unwrap();
        m.validate().unwrap();
        assert_eq!(m.weights(), vec![1.0 / 3.0; 3]);
        assert_eq!(m.params().len(), 4 + 3 * 4 + 1);
        assert!(matches!(
            AbnetModel::new(task, &[], &[4], Normalizer::identity(5), 0),
            Err(AbnetError::NoHeads)
        ));
    }
}
