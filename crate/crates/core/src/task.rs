//! Task definitions: which system, its time step, and what a policy observes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{AffineSystem, Robot2d, TwoLinkArm};
use crate::hocbf::HocbfCascade;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Robot2d(Robot2d),
    Arm2(TwoLinkArm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub system: System,
    pub dt: f64,
}

impl Task {
    pub fn robot2d() -> Self {
        Self {
            system: System::Robot2d(Robot2d::default()),
            dt: 0.1,
        }
    }

    pub fn arm2() -> Self {
        Self {
            system: System::Arm2(TwoLinkArm::default()),
            dt: 0.01,
        }
    }

    pub fn id(&self) -> &'static str {
        match self.system {
            System::Robot2d(_) => "robot2d",
            System::Arm2(_) => "arm2",
        }
    }

    pub fn sys(&self) -> &dyn AffineSystem {
        match &self.system {
            System::Robot2d(s) => s,
            System::Arm2(s) => s,
        }
    }

    pub fn cascades(&self) -> Vec<HocbfCascade> {
        HocbfCascade::for_system(self.sys())
    }

    pub fn obs_dim(&self) -> usize {
        match self.system {
            System::Robot2d(_) => 5,
            System::Arm2(_) => 6,
        }
    }

    /// Policy input for state `x` and goal point `goal`.
    ///
    /// The robot sees its full state and the lateral goal coordinate (the
    /// goal line's `x` is fixed per scenario); the arm sees joint state and
    /// the Cartesian goal.
    pub fn observe(&self, x: &[f64], goal: [f64; 2]) -> Vec<f64> {
        let mut z = x.to_vec();
        match self.system {
            System::Robot2d(_) => z.push(goal[1]),
            System::Arm2(_) => z.extend_from_slice(&goal),
        }
        z
    }

    /// SHA-256 over the canonical JSON of the task and its cascades. Models
    /// and datasets carry it so mismatched files are rejected on load.
    pub fn config_hash(&self) -> String {
        let cascades = self.cascades();
        let canon = serde_json::json!({ "task": self, "cascades": cascades });
        hex::encode(Sha256::digest(canon.to_string().as_bytes()))
    }
}
