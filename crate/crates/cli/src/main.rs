//! `abnet`: dataset generation, training, evaluation and merging.
//!
//! Exit codes: 0 success, 1 I/O or other unexpected failure, 2 invalid
//! configuration, input or incompatible models, 3 dataset generation
//! failure, 4 training failure, 5 every evaluated model failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abnet_core::abnet::{
    fuse_by_loss, fuse_heads, merge, train_heads, train_oneshot, AbnetError, AbnetModel, Checkpoint, FusionProvenance,
    FusionReport, HeadSpec, PenaltyMerge, TrainReport,
};
use abnet_core::barriernet::{backward_failures, Normalizer};
use abnet_core::data::{split_by_trajectory, Dataset, Record};
use abnet_core::expert::generate_dataset;
use abnet_core::harness::{benchmark, report_csv, report_json, trace_csv, Controller, ExpertPolicy};
use abnet_core::nn::Tensor;
use abnet_core::qp::SolverOptions;
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use config::Config;
use manifest::{OutDir, RunManifest};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_GENERATION: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_EVAL: u8 = 5;

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "abnet", version, about = "Safe multi-head BarrierNet controllers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Robot2d,
    Arm2,
}

impl TaskKind {
    fn id(self) -> &'static str {
        match self {
            TaskKind::Robot2d => "robot2d",
            TaskKind::Arm2 => "arm2",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Train every head and the fusion weights jointly.
    Oneshot,
    /// Train heads independently, then fuse them by validation loss.
    Scalable,
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyArg {
    First,
    Average,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the expert and write a labelled dataset.
    GenData {
        #[arg(long, value_enum)]
        task: TaskKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long, value_enum, default_value = "oneshot")]
        mode: Mode,
        #[arg(long)]
        heads: Option<usize>,
        /// Dataset file, or a directory containing dataset.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue one-shot training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of one or more models.
    Eval {
        /// Comma-separated checkpoint paths; `expert` names the labelling expert.
        #[arg(long, value_delimiter = ',', required = true)]
        model: Vec<String>,
        /// Task for expert-only runs without a config.
        #[arg(long, value_enum)]
        task: Option<TaskKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset whose validation split gives the held-out MSE.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig {
        #[arg(long, value_enum)]
        task: Option<TaskKind>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Merge two models into one with weights on the simplex.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Share of model `a`; omitted, it comes from validation losses.
        #[arg(long)]
        wa: Option<f64>,
        /// Dataset for the validation losses when `--wa` is omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "first")]
        penalty: PenaltyArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.cmd {
        Cmd::GenData { task, config, seed, out } => gen_data(task, config.as_deref(), seed, &out),
        Cmd::Train {
            mode,
            heads,
            data,
            config,
            seed,
            epochs,
            resume,
            out,
        } => train(TrainArgs {
            mode,
            heads,
            data: &data,
            config: config.as_deref(),
            seed,
            epochs,
            resume: resume.as_deref(),
            out: &out,
        }),
        Cmd::Eval {
            model,
            task,
            config,
            runs,
            noise,
            seed,
            data,
            out,
        } => eval(EvalArgs {
            models: &model,
            task,
            config: config.as_deref(),
            runs,
            noise,
            seed,
            data: data.as_deref(),
            out: &out,
        }),
        Cmd::ShowConfig { task, config } => load_config(config.as_deref(), task.map(TaskKind::id), None).map(|c| {
            print!("{}", c.to_toml());
        }),
        Cmd::Merge {
            a,
            b,
            wa,
            data,
            config,
            penalty,
            out,
        } => merge_cmd(&a, &b, wa, data.as_deref(), config.as_deref(), penalty, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

/// `ABNET_THREADS` caps the worker pool.
fn init_threads() -> CmdResult {
    let Ok(v) = std::env::var("ABNET_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("ABNET_THREADS must be a positive integer, got {v:?}"))
        .exit_with(EXIT_CONFIG)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().exit_with(EXIT_IO)
}

fn load_config(path: Option<&Path>, hint: Option<&str>, seed: Option<u64>) -> Result<Config, Failure> {
    let mut cfg = Config::load(path, hint).exit_with(EXIT_CONFIG)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// A path to `file`, or a directory that contains it.
fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn read_dataset(path: &Path) -> Result<(PathBuf, Dataset), Failure> {
    let p = resolve(path, "dataset.jsonl");
    let ds = Dataset::read(&p).with_context(|| format!("loading dataset {}", p.display())).exit_with(EXIT_CONFIG)?;
    Ok((p, ds))
}

fn read_checkpoint(path: &Path) -> Result<(PathBuf, Checkpoint), Failure> {
    let p = resolve(path, "model.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())).exit_with(EXIT_CONFIG)?;
    let ck = Checkpoint::from_json(&text, None).with_context(|| format!("loading {}", p.display())).exit_with(EXIT_CONFIG)?;
    Ok((p, ck))
}

fn min_barrier(cfg: &Config, records: &[Record]) -> f64 {
    let task = cfg.task();
    records.iter().map(|r| task.sys().min_barrier(&r.x)).fold(f64::INFINITY, f64::min)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gen_data(task: TaskKind, config: Option<&Path>, seed: Option<u64>, out: &Path) -> CmdResult {
    let cfg = load_config(config, Some(task.id()), seed)?;
    let mut manifest = RunManifest::new(config, cfg.clone());
    manifest.seeds.insert("data".into(), cfg.seed);
    let mut dir = OutDir::create(out).exit_with(EXIT_IO)?;

    let ds = generate_dataset(&cfg.task(), &cfg.expert, cfg.seed).exit_with(EXIT_GENERATION)?;
    dir.write("dataset.jsonl", &ds.to_jsonl()).exit_with(EXIT_IO)?;
    let min_b = min_barrier(&cfg, &ds.records);
    println!(
        "{}: {} trajectories, {} records, min b {:.6}",
        ds.header.task, ds.header.trajectories, ds.header.records, min_b
    );
    manifest.results = json!({
        "trajectories": ds.header.trajectories,
        "records": ds.header.records,
        "min_barrier": min_b,
    });
    dir.finish(manifest).exit_with(EXIT_IO)
}

struct TrainArgs<'a> {
    mode: Mode,
    heads: Option<usize>,
    data: &'a Path,
    config: Option<&'a Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    resume: Option<&'a Path>,
    out: &'a Path,
}

fn loss_csv(curves: &[(String, &TrainReport)]) -> String {
    let mut s = String::from("model,epoch,loss\n");
    for (name, rep) in curves {
        for (e, l) in rep.epoch_loss.iter().enumerate() {
            s.push_str(&format!("{name},{},{l}\n", e + 1));
        }
    }
    s
}

fn val_mse(model: &AbnetModel, val: &[Record], opts: &SolverOptions) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    model.evaluate_mse(val, opts).ok().map(|e| mean(&e))
}

fn train(args: TrainArgs) -> CmdResult {
    let (data_path, data) = read_dataset(args.data)?;
    let mut cfg = load_config(args.config, Some(&data.header.task), args.seed)?;
    if let Some(h) = args.heads {
        cfg.train.heads = h;
    }
    if let Some(e) = args.epochs {
        cfg.train.opt.epochs = e;
    }
    cfg.validate().exit_with(EXIT_CONFIG)?;
    let task = cfg.task();
    data.check_task(&task).exit_with(EXIT_CONFIG)?;
    if args.resume.is_some() && matches!(args.mode, Mode::Scalable) {
        return Err(anyhow!("--resume applies to one-shot training only")).exit_with(EXIT_CONFIG);
    }

    let mut manifest = RunManifest::new(args.config, cfg.clone());
    manifest.input(&data_path).exit_with(EXIT_IO)?;
    manifest.seeds.insert("init".into(), cfg.seed);
    manifest.seeds.insert("shuffle".into(), cfg.seed);
    let mut dir = OutDir::create(args.out).exit_with(EXIT_IO)?;

    let (train_set, val) = split_by_trajectory(&data.records, cfg.train.val_fraction);
    info!("{} training and {} validation records", train_set.len(), val.len());
    let norm = Normalizer::fit(train_set.iter().map(|r| r.z.as_slice()))
        .ok_or_else(|| anyhow!("no training records"))
        .exit_with(EXIT_TRAINING)?;
    let tc = &cfg.train.opt;
    let specs = HeadSpec::uniform(cfg.train.heads, &cfg.train.hidden, cfg.seed);

    let (checkpoint, reports) = match args.mode {
        Mode::Oneshot => {
            let (mut model, mut opt) = match args.resume {
                Some(p) => {
                    let (p, ck) = read_checkpoint(p)?;
                    manifest.input(&p).exit_with(EXIT_IO)?;
                    if ck.config_hash != task.config_hash() {
                        return Err(anyhow!("checkpoint {} was trained on a different task", p.display()))
                            .exit_with(EXIT_CONFIG);
                    }
                    let opt = ck.optimizer.unwrap_or_else(|| ck.model.new_optimizer(tc.lr));
                    (ck.model, opt)
                }
                None => {
                    let m = AbnetModel::new(task.clone(), &specs, &cfg.train.penalty_hidden, norm, cfg.seed)
                        .exit_with(EXIT_TRAINING)?;
                    let opt = m.new_optimizer(tc.lr);
                    (m, opt)
                }
            };
            let start_step = opt.step;
            let report = train_oneshot(&mut model, &train_set, tc, &mut opt).exit_with(EXIT_TRAINING)?;
            println!("steps {} -> {}", start_step, opt.step);
            (Checkpoint::new(model, Some(opt), None), vec![("fused".to_string(), report)])
        }
        Mode::Scalable => {
            let trained = train_heads(&task, &specs, &cfg.train.penalty_hidden, &norm, &train_set, tc);
            let mut reports = Vec::new();
            for (k, t) in trained.iter().enumerate() {
                let Ok(t) = t else { continue };
                let single = AbnetModel {
                    task: task.clone(),
                    heads: vec![t.head.clone()],
                    penalty: vec![t.penalty.clone()],
                    logits: Tensor::vector(vec![0.0]),
                };
                dir.write(&format!("heads/head_{k}.json"), &Checkpoint::new(single, None, None).to_json())
                    .exit_with(EXIT_IO)?;
                reports.push((format!("head_{k}"), t.report.clone()));
            }
            let result = fuse_heads(&task, trained, &train_set, &val, tc).exit_with(EXIT_TRAINING)?;
            if !result.failed.is_empty() {
                eprintln!("warning: heads {:?} failed and were left out", result.failed);
            }
            println!("head losses {:?}", result.fusion.losses);
            (Checkpoint::new(result.model, None, Some(result.fusion)), reports)
        }
    };

    let model = &checkpoint.model;
    model.check_simplex().exit_with(EXIT_TRAINING)?;
    let weights = model.weights();
    let mse = val_mse(model, &val, &tc.qp);
    dir.write("model.json", &checkpoint.to_json()).exit_with(EXIT_IO)?;
    let curves: Vec<(String, &TrainReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    dir.write("losses.csv", &loss_csv(&curves)).exit_with(EXIT_IO)?;

    for (name, r) in &reports {
        println!(
            "{name}: {} epochs, loss {:.5} -> {:.5}, {} infeasible samples",
            r.epoch_loss.len(),
            r.epoch_loss.first().copied().unwrap_or(f64::NAN),
            r.epoch_loss.last().copied().unwrap_or(f64::NAN),
            r.infeasible_samples
        );
    }
    println!("weights {weights:?}");
    if let Some(m) = mse {
        println!("validation mse {m:.6}");
    }
    manifest.results = json!({
        "mode": match args.mode { Mode::Oneshot => "oneshot", Mode::Scalable => "scalable" },
        "heads": model.num_heads(),
        "weights": weights,
        "validation_mse": mse,
        "reports": reports.iter().map(|(n, r)| json!({"model": n, "report": r})).collect::<Vec<_>>(),
        "backward_failures": backward_failures(),
    });
    dir.finish(manifest).exit_with(EXIT_IO)
}

struct EvalArgs<'a> {
    models: &'a [String],
    task: Option<TaskKind>,
    config: Option<&'a Path>,
    runs: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
    data: Option<&'a Path>,
    out: &'a Path,
}

enum Loaded {
    Expert,
    Model(Box<AbnetModel>),
}

/// Display name for a model path: the directory for `.../model.json`,
/// otherwise the file stem.
fn model_name(path: &Path) -> String {
    let p = resolve(path, "model.json");
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match p.parent().and_then(Path::file_name) {
        Some(parent) if stem == "model" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn eval(args: EvalArgs) -> CmdResult {
    let mut loaded: Vec<(String, Loaded)> = Vec::new();
    let mut inputs = Vec::new();
    for m in args.models {
        let m = m.trim();
        if m == "expert" {
            loaded.push(("expert".into(), Loaded::Expert));
            continue;
        }
        let (p, ck) = read_checkpoint(Path::new(m))?;
        inputs.push(p);
        loaded.push((model_name(Path::new(m)), Loaded::Model(Box::new(ck.model))));
    }
    for i in 0..loaded.len() {
        if loaded[..i].iter().any(|(n, _)| *n == loaded[i].0) {
            loaded[i].0 = format!("{}_{i}", loaded[i].0);
        }
    }

    let model_task = loaded.iter().find_map(|(_, l)| match l {
        Loaded::Model(m) => Some(m.task.clone()),
        Loaded::Expert => None,
    });
    let hint = match (&model_task, args.task) {
        (Some(t), Some(k)) if t.id() != k.id() => {
            return Err(anyhow!("models are for {} but --task {} was given", t.id(), k.id())).exit_with(EXIT_CONFIG)
        }
        (Some(t), _) => Some(t.id()),
        (None, k) => k.map(TaskKind::id),
    };
    let mut cfg = load_config(args.config, hint, args.seed)?;
    if let Some(r) = args.runs {
        cfg.eval.runs = r;
    }
    if let Some(n) = args.noise {
        cfg.eval.noise = n;
    }
    cfg.validate().exit_with(EXIT_CONFIG)?;
    let task = cfg.task();
    for (name, l) in &loaded {
        if let Loaded::Model(m) = l {
            if m.task.config_hash() != task.config_hash() {
                return Err(anyhow!("{name} was trained on a different task configuration")).exit_with(EXIT_CONFIG);
            }
        }
    }

    let mut manifest = RunManifest::new(args.config, cfg.clone());
    manifest.seeds.insert("noise".into(), cfg.seed);
    for p in &inputs {
        manifest.input(p).exit_with(EXIT_IO)?;
    }
    let heldout = match args.data {
        Some(d) => {
            let (p, ds) = read_dataset(d)?;
            ds.check_task(&task).exit_with(EXIT_CONFIG)?;
            manifest.input(&p).exit_with(EXIT_IO)?;
            let (_, val) = split_by_trajectory(&ds.records, cfg.train.val_fraction);
            Some(if val.is_empty() { ds.records } else { val })
        }
        None => None,
    };

    let expert = ExpertPolicy {
        task: task.clone(),
        cfg: cfg.expert.clone(),
    };
    let ctrls: Vec<(&str, &dyn Controller)> = loaded
        .iter()
        .map(|(n, l)| {
            let c: &dyn Controller = match l {
                Loaded::Expert => &expert,
                Loaded::Model(m) => m.as_ref(),
            };
            (n.as_str(), c)
        })
        .collect();
    let rows = benchmark(&ctrls, &task, &cfg.eval, heldout.as_deref());

    let mut dir = OutDir::create(args.out).exit_with(EXIT_IO)?;
    let csv = report_csv(&rows);
    dir.write("report.csv", &csv).exit_with(EXIT_IO)?;
    dir.write("report.json", &report_json(&rows)).exit_with(EXIT_IO)?;
    for row in rows.iter().filter(|r| r.report.is_some()) {
        dir.write(&format!("traces/{}.csv", row.name), &trace_csv(&row.trajectories)).exit_with(EXIT_IO)?;
    }
    print!("{csv}");
    let failed: Vec<&str> = rows.iter().filter(|r| r.report.is_none()).map(|r| r.name.as_str()).collect();
    manifest.results = json!({ "failed": failed });
    dir.finish(manifest).exit_with(EXIT_IO)?;
    if failed.len() == rows.len() {
        return Err(anyhow!("every model failed")).exit_with(EXIT_EVAL);
    }
    Ok(())
}

fn merge_cmd(
    a: &Path,
    b: &Path,
    wa: Option<f64>,
    data: Option<&Path>,
    config: Option<&Path>,
    penalty: PenaltyArg,
    out: &Path,
) -> CmdResult {
    let (pa, ca) = read_checkpoint(a)?;
    let (pb, cb) = read_checkpoint(b)?;
    if ca.config_hash != cb.config_hash {
        return Err(AbnetError::IncompatibleTasks(format!(
            "{} ({}) vs {} ({})",
            ca.task_id, ca.config_hash, cb.task_id, cb.config_hash
        )))
        .exit_with(EXIT_CONFIG);
    }
    let cfg = load_config(config, Some(&ca.task_id), None)?;
    let mut manifest = RunManifest::new(config, cfg.clone());
    manifest.input(&pa).exit_with(EXIT_IO)?;
    manifest.input(&pb).exit_with(EXIT_IO)?;

    let (mix, losses) = match (wa, data) {
        (Some(w), _) => {
            if !(0.0..=1.0).contains(&w) {
                return Err(anyhow!("--wa must lie in [0, 1], got {w}")).exit_with(EXIT_CONFIG);
            }
            ([w, 1.0 - w], None)
        }
        (None, Some(d)) => {
            let (p, ds) = read_dataset(d)?;
            ds.check_task(&ca.model.task).exit_with(EXIT_CONFIG)?;
            manifest.input(&p).exit_with(EXIT_IO)?;
            let (_, val) = split_by_trajectory(&ds.records, cfg.train.val_fraction);
            let val = if val.is_empty() { ds.records } else { val };
            let opts = &cfg.train.opt.qp;
            let la = mean(&ca.model.evaluate_mse(&val, opts).exit_with(EXIT_IO)?);
            let lb = mean(&cb.model.evaluate_mse(&val, opts).exit_with(EXIT_IO)?);
            println!("validation losses a {la} b {lb}");
            let w = fuse_by_loss(&[la, lb]).exit_with(EXIT_CONFIG)?;
            ([w[0], w[1]], Some(vec![la, lb]))
        }
        (None, None) => return Err(anyhow!("pass --wa or --data")).exit_with(EXIT_CONFIG),
    };
    let penalty = match penalty {
        PenaltyArg::First => PenaltyMerge::First,
        PenaltyArg::Average => PenaltyMerge::Average,
    };
    let merged = merge(&ca.model, &cb.model, mix, penalty).exit_with(EXIT_CONFIG)?;
    let weights = merged.weights();
    println!("mix {mix:?}");
    println!("weights {weights:?}");
    let fusion = losses.clone().map(|l| FusionReport {
        losses: l,
        weights: mix.to_vec(),
        provenance: FusionProvenance::LossRule,
    });

    let mut dir = OutDir::create(out).exit_with(EXIT_IO)?;
    dir.write("model.json", &Checkpoint::new(merged, None, fusion).to_json()).exit_with(EXIT_IO)?;
    manifest.results = json!({ "mix": mix, "losses": losses, "weights": weights });
    dir.finish(manifest).exit_with(EXIT_IO)
}
