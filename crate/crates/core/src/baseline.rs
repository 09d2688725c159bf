//! Plain end-to-end MLP policy without a safety layer, for comparison.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abnet::{AbnetError, TrainConfig, TrainReport};
use crate::barriernet::Normalizer;
use crate::data::Record;
use crate::nn::{AdamState, Gradients, Mlp, NnError, Tape};
use crate::rng;
use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub task: Task,
    pub net: Mlp,
    pub normalizer: Normalizer,
}

impl MlpPolicy {
    pub fn new(task: Task, hidden: &[usize], normalizer: Normalizer, seed: u64) -> Self {
        let mut dims = vec![task.obs_dim()];
        dims.extend_from_slice(hidden);
        dims.push(task.sys().control_dim());
        let net = Mlp::new(&dims, &mut rng::stream(seed, "baseline", 0));
        Self { task, net, normalizer }
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        self.net.eval(&self.normalizer.apply(z))
    }

    fn sample_gradient(&self, rec: &Record) -> Result<(f64, Gradients), NnError> {
        let mut tape = Tape::new();
        let input = tape.input(self.normalizer.apply(&rec.z));
        let out = self.net.forward(&mut tape, input)?;
        let y = tape.input(rec.u_star.clone());
        let loss = tape.mse(out, y)?;
        Ok((tape.value(loss)[0], tape.backward(loss)))
    }

    /// Minibatch Adam on the MSE to the labels; uses the epoch, batch, lr,
    /// seed and step-limit fields of `cfg`.
    pub fn train(&mut self, train: &[Record], cfg: &TrainConfig) -> Result<TrainReport, AbnetError> {
        if train.is_empty() {
            return Err(AbnetError::EmptyDataset);
        }
        let mut opt = AdamState::for_params(&self.net.tensors(), cfg.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut report = TrainReport::default();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                    break;
                }
                let me: &MlpPolicy = self;
                let results: Vec<(f64, Gradients)> =
                    chunk.par_iter().map(|&i| me.sample_gradient(&train[i])).collect::<Result<_, _>>()?;
                let mut g = Gradients::zeros_like(&results[0].1);
                for (l, gi) in &results {
                    sum += l;
                    g.add_assign(gi);
                }
                g.scale(1.0 / results.len() as f64);
                opt.step(self.net.tensors_mut(), &g)?;
                report.steps += 1;
            }
            report.epoch_loss.push(sum / train.len() as f64);
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
        }
        Ok(report)
    }
}
