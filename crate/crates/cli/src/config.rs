//! Run configuration: a TOML file layered over built-in per-task defaults.

use std::path::Path;

use abnet_core::abnet::TrainConfig;
use abnet_core::expert::ExpertConfig;
use abnet_core::harness::RunConfig;
use abnet_core::task::{System, Task};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// The task as a flat section: `kind`, `dt` and the system parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    #[serde(flatten)]
    pub system: System,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub heads: usize,
    pub hidden: Vec<usize>,
    pub penalty_hidden: Vec<usize>,
    /// Fraction of trajectories held out for validation losses.
    pub val_fraction: f64,
    #[serde(flatten)]
    pub opt: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub task: TaskSection,
    pub expert: ExpertConfig,
    pub train: TrainSection,
    pub eval: RunConfig,
}

impl Config {
    pub fn defaults(kind: &str) -> Result<Self> {
        let task = match kind {
            "robot2d" => Task::robot2d(),
            "arm2" => Task::arm2(),
            other => bail!("unknown task {other:?}, expected robot2d or arm2"),
        };
        let mut cfg = Self {
            seed: 1,
            expert: ExpertConfig::for_task(&task),
            train: TrainSection {
                heads: 4,
                hidden: vec![128, 32, 32],
                penalty_hidden: vec![32, 32],
                val_fraction: 0.1,
                opt: TrainConfig {
                    epochs: if kind == "arm2" { 10 } else { 20 },
                    ..Default::default()
                },
            },
            eval: RunConfig::for_task(&task),
            task: TaskSection {
                system: task.system,
                dt: task.dt,
            },
        };
        cfg.set_seed(1);
        Ok(cfg)
    }

    /// Sets the run seed; training shuffles and evaluation noise draw
    /// their streams from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.opt.seed = seed;
        self.eval.seed = seed;
    }

    pub fn task(&self) -> Task {
        Task {
            system: self.task.system.clone(),
            dt: self.task.dt,
        }
    }

    /// Loads `path` over the defaults of its task. `hint` names the task
    /// when the file does not, and must agree with it when both do.
    pub fn load(path: Option<&Path>, hint: Option<&str>) -> Result<Self> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        Self::from_table(user, hint)
    }

    pub fn from_table(user: Table, hint: Option<&str>) -> Result<Self> {
        let named = user.get("task").and_then(|t| t.get("kind")).and_then(Value::as_str);
        let kind = match (named, hint) {
            (Some(a), Some(b)) if a != b => bail!("config is for task {a} but {b} was requested"),
            (Some(k), _) | (None, Some(k)) => k.to_string(),
            (None, None) => bail!("no task given: pass --task or set [task] kind"),
        };
        for section in ["train", "eval"] {
            if user.get(section).and_then(|t| t.get("seed")).is_some() {
                bail!("{section}.seed is derived from the top-level seed; set that instead");
            }
        }
        let base = Value::try_from(Self::defaults(&kind)?).context("serializing defaults")?;
        let user = Value::Table(user);
        let merged = overlay(base, user.clone());
        let mut cfg: Config = merged.try_into().context("invalid configuration")?;
        cfg.set_seed(cfg.seed);
        let resolved = Value::try_from(&cfg).context("serializing configuration")?;
        if let Some(key) = unknown_key(&user, &resolved, String::new()) {
            bail!("unknown configuration key {key}");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task();
        if !(self.task.dt > 0.0) {
            bail!("task dt must be positive");
        }
        self.expert.validate(&task).map_err(|e| anyhow!(e))?;
        self.eval.validate().map_err(|e| anyhow!(e))?;
        let t = &self.train;
        if t.heads == 0 || t.hidden.is_empty() || t.penalty_hidden.is_empty() {
            bail!("train needs heads ≥ 1 and non-empty hidden layer lists");
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            bail!("val_fraction must lie in [0, 1), got {}", t.val_fraction);
        }
        if t.opt.batch_size == 0 || !(t.opt.lr > 0.0) {
            bail!("train needs batch_size ≥ 1 and lr > 0");
        }
        Ok(())
    }

    /// TOML that loads back to `self`; the derived seeds are left out.
    pub fn to_toml(&self) -> String {
        let mut v = Value::try_from(self).expect("configuration serializes");
        for section in ["train", "eval"] {
            if let Some(Value::Table(t)) = v.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&v).expect("configuration serializes")
    }
}

/// Deep merge of `over` into `base`. A table whose `kind` changes is taken
/// from `over` whole, since its fields belong to another variant.
fn overlay(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Table(mut b), Value::Table(o)) => {
            if b.get("kind").is_some() && o.get("kind").is_some() && b.get("kind") != o.get("kind") {
                return Value::Table(o);
            }
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => overlay(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (_, o) => o,
    }
}

/// First key of `user` that did not survive into the resolved config.
fn unknown_key(user: &Value, resolved: &Value, prefix: String) -> Option<String> {
    let Value::Table(u) = user else { return None };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match resolved.get(k) {
            None => return Some(path),
            Some(r) => {
                if let Some(bad) = unknown_key(v, r, path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in ["robot2d", "arm2"] {
            let cfg = Config::defaults(kind).unwrap();
            let back = Config::from_table(cfg.to_toml().parse().unwrap(), None).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn committed_configs_match_defaults() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for kind in ["robot2d", "arm2"] {
            let cfg = Config::load(Some(&dir.join(format!("{kind}.toml"))), None).unwrap();
            assert_eq!(cfg, Config::defaults(kind).unwrap(), "{kind}");
        }
    }

    #[test]
    fn overrides_and_errors() {
        let t: Table = "[train]\nepochs = 3\nheads = 2\n".parse().unwrap();
        let cfg = Config::from_table(t, Some("arm2")).unwrap();
        assert_eq!((cfg.train.opt.epochs, cfg.train.heads), (3, 2));
        assert_eq!(cfg.task().id(), "arm2");

        let t: Table = "[train]\nepochz = 3\n".parse().unwrap();
        let err = Config::from_table(t, Some("robot2d")).unwrap_err().to_string();
        assert!(err.contains("train.epochz"), "{err}");

        let t: Table = "seed = 9\n[eval]\nseed = 3\n".parse().unwrap();
        assert!(Config::from_table(t, Some("robot2d")).is_err());
        let t: Table = "seed = 9\n".parse().unwrap();
        let cfg = Config::from_table(t, Some("robot2d")).unwrap();
        assert_eq!((cfg.train.opt.seed, cfg.eval.seed), (9, 9));

        let t: Table = "[task]\nkind = \"arm2\"\n".parse().unwrap();
        assert!(Config::from_table(t, Some("robot2d")).is_err());
        assert!(Config::from_table(Table::new(), None).is_err());

        let t: Table = "[train]\nval_fraction = 1.5\n".parse().unwrap();
        assert!(Config::from_table(t, Some("robot2d")).is_err());
    }

    #[test]
    fn switching_variant_replaces_the_table() {
        let t: Table = r#"
[eval.scenario]
kind = "sampled"
clearance = 0.5
start = { lo = [-7.0, -3.0, -0.3, 0.0], hi = [-6.0, 3.0, 0.3, 1.0] }
goal = { lo = [6.0, -3.0], hi = [6.0, 3.0] }
"#
        .parse()
        .unwrap();
        let cfg = Config::from_table(t, Some("robot2d")).unwrap();
        assert!(matches!(cfg.eval.scenario, abnet_core::harness::Scenario::Sampled { .. }));
    }

    #[test]
    fn optional_fields_are_accepted() {
        let t: Table = "[train]\nmax_steps = 5\n".parse().unwrap();
        assert_eq!(Config::from_table(t, Some("robot2d")).unwrap().train.opt.max_steps, Some(5));
    }
}
