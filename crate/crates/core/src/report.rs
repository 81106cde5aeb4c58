//! Adaptation reports and the evaluation protocol shared by every algorithm.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdp::{self, PolicyTable, TabularMdp};
use crate::rng;
use crate::zeroshot::{evaluate_policy_rollouts, RewardTask};

/// Guarded relative improvement, in percent:
/// `(R − R_zs) / max(|R_zs|, 0.01·|R_opt|)`.
pub fn improvement_pct(ret: f64, zero_shot: f64, optimal: f64) -> f64 {
    let denom = zero_shot.abs().max(0.01 * optimal.abs());
    if denom == 0.0 {
        return 0.0;
    }
    100.0 * (ret - zero_shot) / denom
}

/// How policies are scored at evaluation points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Exact infinite-horizon discounted return from `d0` (stderr 0).
    #[default]
    Exact,
    /// Mean discounted return of `task.eval_episodes` seeded rollouts.
    Rollout,
}

/// Scores policies for one task under a fixed protocol.
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    pub mdp: &'a TabularMdp,
    pub task: &'a RewardTask,
    pub mode: EvalMode,
    pub seed: u64,
}

impl Evaluator<'_> {
    /// `(mean, stderr)` of the discounted return. Rollout evaluations at
    /// different `point`s use independent streams.
    pub fn score(&self, policy: &PolicyTable, point: u64) -> Result<(f64, f64)> {
        match self.mode {
            EvalMode::Exact => Ok((mdp::exact_return(self.mdp, policy, &self.task.reward)?, 0.0)),
            EvalMode::Rollout => {
                let seed = rng::derive_seed(self.seed, &[0xE7A1, point]);
                let stats =
                    evaluate_policy_rollouts(self.mdp, policy, self.task, self.task.eval_episodes.max(1), seed)?;
                Ok((stats.mean_discounted, stats.stderr_discounted))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Cumulative environment transitions consumed so far.
    pub env_steps: u64,
    /// Episode index (ReLA, Q-learning) or gradient-step index (LoLA).
    pub episode: usize,
    pub mean_return: f64,
    pub stderr: f64,
    pub improvement_pct: f64,
    /// Cosine between the current latent and the zero-shot latent; NaN for
    /// action-space baselines.
    pub cosine_to_zr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub algorithm: String,
    pub task: String,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub zero_shot_return: f64,
    pub optimal_return: f64,
    pub degenerate_inference: bool,
    /// Final adapted latent, when the algorithm searches latent space.
    pub final_latent: Option<Vec<f64>>,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl AdaptationReport {
    pub fn final_return(&self) -> f64 {
        self.records.last().map(|r| r.mean_return).unwrap_or(self.zero_shot_return)
    }

    pub fn initial_return(&self) -> f64 {
        self.records.first().map(|r| r.mean_return).unwrap_or(self.zero_shot_return)
    }
}

/// Collects evaluation points and fills the derived columns.
pub(crate) struct Recorder {
    pub records: Vec<EvalRecord>,
    pub zero_shot_return: f64,
    pub optimal_return: f64,
}

impl Recorder {
    pub fn new(zero_shot_return: f64, optimal_return: f64) -> Self {
        Self { records: Vec::new(), zero_shot_return, optimal_return }
    }

    pub fn push(&mut self, env_steps: u64, episode: usize, (mean, stderr): (f64, f64), cosine: f64) {
        self.records.push(EvalRecord {
            env_steps,
            episode,
            mean_return: mean,
            stderr,
            improvement_pct: improvement_pct(mean, self.zero_shot_return, self.optimal_return),
            cosine_to_zr: cosine,
        });
    }
}

/// Whether evaluation point `i` (0-based iteration count completed) of a run
/// of `total` iterations is recorded: the start, every `every`-th iteration,
/// and the end.
pub fn is_eval_point(done: usize, total: usize, every: usize) -> bool {
    done == 0 || done == total || (every > 0 && done % every == 0)
}

pub(crate) fn latent_vec(z: &DVector<f64>) -> Option<Vec<f64>> {
    Some(z.iter().copied().collect())
}
