//! Test-time reward inference and policy evaluation.

use nalgebra::DVector;

use crate::bfm::BfmModel;
use crate::error::{Error, Result};
use crate::features::project_reward;
use crate::mdp::{self, PolicyTable, Start, TabularMdp};
use crate::rng;
use crate::sphere;

/// Below this norm the regression latent is treated as zero.
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardTask {
    pub name: String,
    pub reward: DVector<f64>,
    /// Episode length in steps.
    pub horizon: usize,
    pub eval_episodes: usize,
}

impl RewardTask {
    pub fn new(name: impl Into<String>, reward: DVector<f64>, horizon: usize, eval_episodes: usize) -> Result<Self> {
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("task reward has non-finite entries".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("task horizon must be at least 1".into()));
        }
        Ok(Self { name: name.into(), reward, horizon, eval_episodes })
    }
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    /// Unnormalized regression solution.
    pub z_r: DVector<f64>,
    /// `√d`-normalized `z_r`; `None` when `z_r` is (numerically) zero.
    pub z_r_sphere: Option<DVector<f64>>,
    /// Latent used to condition the zero-shot policy: `z_r_sphere`, or the
    /// first codebook entry when inference is degenerate.
    pub policy_latent: DVector<f64>,
    pub degenerate: bool,
    /// `φ z_r`.
    pub reconstructed_reward: DVector<f64>,
}

pub fn infer(model: &BfmModel, task: &RewardTask, ridge: f64) -> Result<InferenceResult> {
    if task.reward.len() != model.n_states() {
        return Err(Error::Dimension(format!(
            "task reward has {} entries, model has {} states",
            task.reward.len(),
            model.n_states()
        )));
    }
    let proj = project_reward(model.features(), model.rho(), &task.reward, ridge)?;
    let degenerate = proj.z_r.norm() <= DEGENERACY_TOL;
    let z_r_sphere = if degenerate { None } else { sphere::normalize(&proj.z_r) };
    let policy_latent = z_r_sphere.clone().unwrap_or_else(|| model.codebook().get(0));
    Ok(InferenceResult {
        z_r: proj.z_r,
        z_r_sphere,
        policy_latent,
        degenerate,
        reconstructed_reward: proj.projected,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnStats {
    pub mean_discounted: f64,
    pub stderr_discounted: f64,
    pub mean_undiscounted: f64,
    pub stderr_undiscounted: f64,
    pub episodes: usize,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo returns of an arbitrary policy table over `task.horizon` steps from `d0`.
pub fn evaluate_policy_rollouts(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    task: &RewardTask,
    n_episodes: usize,
    seed: u64,
) -> Result<ReturnStats> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    let mut disc = Vec::with_capacity(n_episodes);
    let mut undisc = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut rng = rng::derived(seed, &[ep as u64]);
        let roll = mdp::rollout(mdp, |s, r| policy.sample(s, r), Start::Initial, task.horizon, &task.reward, &mut rng)?;
        disc.push(mdp::discounted_return(&roll, mdp.discount()));
        undisc.push(roll.rewards.iter().sum());
    }
    let (mean_discounted, stderr_discounted) = mean_stderr(&disc);
    let (mean_undiscounted, stderr_undiscounted) = mean_stderr(&undisc);
    Ok(ReturnStats { mean_discounted, stderr_discounted, mean_undiscounted, stderr_undiscounted, episodes: n_episodes })
}

/// Monte-Carlo returns of the softmax policy `π_z`.
pub fn evaluate_return(
    mdp: &TabularMdp,
    model: &BfmModel,
    z: &DVector<f64>,
    task: &RewardTask,
    n_episodes: usize,
    seed: u64,
) -> Result<ReturnStats> {
    evaluate_policy_rollouts(mdp, &model.at(z).table(), task, n_episodes, seed)
}

/// Exact infinite-horizon discounted return of `π_z` from `d0`.
pub fn exact_latent_return(mdp: &TabularMdp, model: &BfmModel, z: &DVector<f64>, reward: &DVector<f64>) -> Result<f64> {
    mdp::exact_return(mdp, &model.at(z).table(), reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfm::{pretrain_with_codebook, Codebook, Temperatures};
    use crate::envs;
    use crate::features::{make_features, DataDistribution, FeatureKind};
    use nalgebra::DMatrix;

    fn fork_model() -> (TabularMdp, BfmModel) {
        let mdp = envs::two_action_fork(0.5).unwrap();
        let f = make_features(&mdp, &FeatureKind::OneHotSubset { indices: vec![1] }).unwrap();
        let cb = Codebook::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        // A very cold softmax makes π_z deterministic.
        let t = Temperatures { interp: 20.0, policy: 1e3 };
        let model = pretrain_with_codebook(&mdp, &f, &DataDistribution::uniform(3), cb, t).unwrap();
        (mdp, model)
    }

    fn task(reward: Vec<f64>, horizon: usize) -> RewardTask {
        RewardTask::new("t", DVector::from_vec(reward), horizon, 4).unwrap()
    }

    #[test]
    fn infers_indicator_weight() {
        let (_, model) = fork_model();
        let res = infer(&model, &task(vec![0.0, 1.0, 0.0], 3), 0.0).unwrap();
        assert!((res.z_r[0] - 1.0).abs() < 1e-12);
        assert!(!res.degenerate);
        assert!((res.z_r_sphere.unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_reward_is_degenerate() {
        let (_, model) = fork_model();
        let res = infer(&model, &task(vec![0.0, 0.0, 1.0], 3), 0.0).unwrap();
        assert!(res.degenerate);
        assert!(res.z_r_sphere.is_none());
        assert_eq!(res.policy_latent, model.codebook().get(0));
    }

    #[test]
    fn full_rank_features_reconstruct_reward() {
        let mdp = envs::two_action_fork(0.5).unwrap();
        let f = make_features(&mdp, &FeatureKind::OneHotSubset { indices: vec![0, 1, 2] }).unwrap();
        let model = crate::bfm::pretrain(&mdp, &f, &DataDistribution::uniform(3), 2, 0, Temperatures::default()).unwrap();
        let r = vec![0.5, -1.0, 2.0];
        let res = infer(&model, &task(r.clone(), 3), 0.0).unwrap();
        assert!((res.reconstructed_reward - DVector::from_vec(r)).amax() < 1e-12);
    }

    #[test]
    fn deterministic_fork_return() {
        let (mdp, model) = fork_model();
        let z = DVector::from_element(1, 1.0);
        let stats = evaluate_return(&mdp, &model, &z, &task(vec![0.0, 1.0, 0.0], 3), 5, 1).unwrap();
        assert!((stats.mean_discounted - 1.75).abs() < 1e-12);
        assert!((stats.mean_undiscounted - 3.0).abs() < 1e-12);
        assert_eq!(stats.stderr_discounted, 0.0);
    }

    #[test]
    fn zero_reward_gives_zero_return_and_is_repeatable() {
        let (mdp, model) = fork_model();
        let z = DVector::from_element(1, 1.0);
        let t = task(vec![0.0; 3], 7);
        let a = evaluate_return(&mdp, &model, &z, &t, 6, 9).unwrap();
        assert_eq!(a.mean_discounted, 0.0);
        let b = evaluate_return(&mdp, &model, &z, &t, 6, 9).unwrap();
        assert_eq!(a, b);
    }
}
