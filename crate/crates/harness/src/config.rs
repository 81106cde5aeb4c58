//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use bfm_core::bfm::Temperatures;
use bfm_core::envs::{self, GridSpec, TaskSpec};
use bfm_core::features::{DataDistribution, FeatureKind};
use bfm_core::lola::LolaConfig;
use bfm_core::mdp::TabularMdp;
use bfm_core::rela::RelaConfig;
use bfm_core::report::EvalMode;
use serde::{Deserialize, Serialize};

use crate::baseline::QLearningConfig;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Fourrooms11,
    Corridor20,
    Random50,
    Grid(GridSpec),
    Random { n_states: usize, n_actions: usize, branching: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RhoSpec {
    #[default]
    Uniform,
    /// Visit frequencies of uniform-policy rollouts from `d0`.
    Exploratory { episodes: usize, horizon: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfmSpec {
    pub codebook_size: usize,
    pub codebook_seed: u64,
    pub temperatures: Temperatures,
}

impl Default for BfmSpec {
    fn default() -> Self {
        Self { codebook_size: 64, codebook_seed: 0, temperatures: Temperatures::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rela,
    Lola,
    Td3zScratch,
    QLearningActionSpace,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rela => "rela",
            Self::Lola => "lola",
            Self::Td3zScratch => "td3z_scratch",
            Self::QLearningActionSpace => "q_learning_action_space",
        }
    }
}

fn default_gamma() -> f64 {
    0.9
}

fn default_horizon() -> usize {
    envs::DEFAULT_HORIZON
}

fn default_eval_episodes() -> usize {
    50
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub features: FeatureKind,
    #[serde(default)]
    pub rho: RhoSpec,
    #[serde(default)]
    pub bfm: BfmSpec,
    pub tasks: Vec<TaskSpec>,
    /// Episode length for ReLA, Q-learning and rollout evaluation.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub rela: RelaConfig,
    #[serde(default)]
    pub lola: LolaConfig,
    #[serde(default)]
    pub q_learning: QLearningConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Overrides `rela.episodes` and `q_learning.episodes`.
    #[serde(default)]
    pub episodes: Option<usize>,
    /// Overrides `lola.gradient_steps`.
    #[serde(default)]
    pub gradient_steps: Option<usize>,
    /// Overrides every sub-config's `eval_every`.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Overrides every sub-config's `eval_mode`.
    #[serde(default)]
    pub eval_mode: Option<EvalMode>,
    /// Model file; defaults to `<output_dir>/model.json`.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(HarnessError::config)?;
        cfg.apply_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn apply_overrides(&mut self) {
        if let Some(n) = self.episodes {
            self.rela.episodes = n;
            self.q_learning.episodes = n;
        }
        if let Some(n) = self.gradient_steps {
            self.lola.gradient_steps = n;
        }
        if let Some(n) = self.eval_every {
            self.rela.eval_every = n;
            self.lola.eval_every = n;
            self.q_learning.eval_every = n;
        }
        if let Some(m) = self.eval_mode {
            self.rela.eval_mode = m;
            self.lola.eval_mode = m;
            self.q_learning.eval_mode = m;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if self.tasks.is_empty() {
            return bad("no tasks configured".into());
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate task name {:?}", w[0]));
        }
        if let Some(t) = self.tasks.iter().find(|t| !valid_name(&t.name)) {
            return bad(format!("task name {:?} must be non-empty [A-Za-z0-9_-]", t.name));
        }
        if self.seeds.is_empty() {
            return bad("no seeds configured".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.bfm.codebook_size == 0 {
            return bad("codebook_size must be at least 1".into());
        }
        let t = self.bfm.temperatures;
        if !(t.interp > 0.0 && t.interp.is_finite() && t.policy > 0.0 && t.policy.is_finite()) {
            return bad("temperatures must be positive and finite".into());
        }
        self.rela.validate().map_err(HarnessError::config)?;
        self.lola.validate().map_err(HarnessError::config)?;
        self.q_learning.validate().map_err(HarnessError::config)?;
        Ok(())
    }

    pub fn build_mdp(&self) -> Result<TabularMdp> {
        let mdp = match &self.env {
            EnvSpec::Fourrooms11 => envs::fourrooms11(self.gamma).map(|g| g.mdp),
            EnvSpec::Corridor20 => envs::corridor20(self.gamma).map(|g| g.mdp),
            EnvSpec::Random50 => envs::random50(self.gamma),
            EnvSpec::Grid(spec) => envs::make_gridworld(spec, self.gamma).map(|g| g.mdp),
            EnvSpec::Random { n_states, n_actions, branching, seed } => {
                envs::make_random_mdp(*n_states, *n_actions, *branching, *seed, self.gamma)
            }
        };
        mdp.map_err(HarnessError::setup)
    }

    pub fn build_rho(&self, mdp: &TabularMdp) -> Result<DataDistribution> {
        match self.rho {
            RhoSpec::Uniform => Ok(DataDistribution::uniform(mdp.n_states())),
            RhoSpec::Exploratory { episodes, horizon, seed } => {
                DataDistribution::exploratory(mdp, episodes, horizon, seed).map_err(HarnessError::setup)
            }
        }
    }

    /// `--out` wins over `output_dir`; one of them is required.
    pub fn output_dir(&self, cli: Option<&Path>) -> Result<PathBuf> {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| HarnessError::Config("no output directory: pass --out or set output_dir".into()))
    }

    pub fn model_path(&self, out: &Path) -> PathBuf {
        self.model.clone().unwrap_or_else(|| out.join("model.json"))
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "env": "corridor20",
        "features": {"kind": "laplacian_eigs", "d": 4},
        "tasks": [{"name": "a", "kind": "on_span", "seed": 1}],
        "algorithm": "lola"
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.gamma, 0.9);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.bfm.codebook_size, 64);
        assert_eq!(cfg.build_mdp().unwrap().n_states(), 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("\"algorithm\"", "\"colour\": 1, \"algorithm\"");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(HarnessError::Config(_))));
        let text = MINIMAL.replace("\"lola\"\n", "\"lola\", \"lola\": {\"hrizon\": 3}\n");
        assert!(ExperimentConfig::from_json(&text).is_err());
        let text = MINIMAL.replace("\"seed\": 1}", "\"seed\": 1, \"extra\": 0}");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn overrides_reach_every_sub_config() {
        let text = MINIMAL.replace("\"lola\"\n", "\"lola\", \"episodes\": 7, \"gradient_steps\": 9, \"eval_every\": 3\n");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!((cfg.rela.episodes, cfg.q_learning.episodes, cfg.lola.gradient_steps), (7, 7, 9));
        assert_eq!((cfg.rela.eval_every, cfg.lola.eval_every, cfg.q_learning.eval_every), (3, 3, 3));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (from, to) in [
            ("\"lola\"\n", "\"lola\", \"lola\": {\"k\": 1}\n"),
            ("\"lola\"\n", "\"lola\", \"seeds\": []\n"),
            ("\"lola\"\n", "\"lola\", \"gamma\": 1.0\n"),
            ("\"lola\"\n", "\"sarsa\"\n"),
            ("\"name\": \"a\"", "\"name\": \"a/b\""),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(matches!(ExperimentConfig::from_json(&text), Err(HarnessError::Config(_))), "{to}");
        }
    }

    #[test]
    fn inline_environments() {
        let text = MINIMAL.replace(
            "\"corridor20\"",
            r#"{"grid": {"width": 3, "height": 2, "start_cells": [[0, 0]], "slip_prob": 0.1}}"#,
        );
        assert_eq!(ExperimentConfig::from_json(&text).unwrap().build_mdp().unwrap().n_states(), 6);
        let text =
            MINIMAL.replace("\"corridor20\"", r#"{"random": {"n_states": 7, "n_actions": 2, "branching": 3, "seed": 1}}"#);
        assert_eq!(ExperimentConfig::from_json(&text).unwrap().build_mdp().unwrap().n_actions(), 2);
    }
}
