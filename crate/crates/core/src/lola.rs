//! Lookahead latent adaptation.
//!
//! Actor-only search over latents: a Gaussian around `mu` proposes latents,
//! each is scored by an `n`-step rollout closed with the BFM's own value
//! estimate, and `mu` follows the leave-one-out REINFORCE gradient.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bfm::{BfmModel, LatentPolicy};
use crate::error::{Error, Result};
use crate::features::DEFAULT_RIDGE;
use crate::mdp::TabularMdp;
use crate::rela::RunSetup;
use crate::report::{is_eval_point, AdaptationReport, EvalMode};
use crate::rng::{self, Rng};
use crate::sphere;
use crate::zeroshot::RewardTask;

const STREAM_START: u64 = 11;
const STREAM_ROLLOUT: u64 = 12;
const STREAM_MIXTURE: u64 = 13;

/// Isotropic Gaussian over latents with a trainable mean on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: DVector<f64>,
    pub sigma: f64,
    pub lr: f64,
}

impl LatentGaussian {
    pub fn new(mu: DVector<f64>, sigma: f64, lr: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
        }
        let mu = sphere::normalize(&mu).ok_or_else(|| Error::InvalidArgument("mu must be non-zero".into()))?;
        Ok(Self { mu, sigma, lr })
    }

    /// Ambient draw `mu + σ·ε`.
    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let sigma = self.sigma;
        self.mu.map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
    }

    /// `mu ← normalize(mu + lr·g)`.
    pub fn step(&mut self, g: &DVector<f64>) {
        if let Some(mu) = sphere::normalize(&(&self.mu + g * self.lr)) {
            self.mu = mu;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LolaConfig {
    pub horizon: usize,
    pub k: usize,
    pub m: usize,
    pub reset_prob: f64,
    pub lr: f64,
    /// Defaults to `0.02·√d`.
    pub sigma: Option<f64>,
    pub gradient_steps: usize,
    pub bootstrap: bool,
    pub zero_shot_init: bool,
    pub ridge: f64,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
}

impl Default for LolaConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            k: 5,
            m: 2,
            reset_prob: 0.2,
            lr: 0.05,
            sigma: None,
            gradient_steps: 50,
            bootstrap: true,
            zero_shot_init: true,
            ridge: DEFAULT_RIDGE,
            eval_every: 5,
            eval_mode: EvalMode::Exact,
        }
    }
}

impl LolaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k < 2 {
            return bad(format!("k = {} but the leave-one-out baseline needs k >= 2", self.k));
        }
        if self.horizon == 0 {
            return bad("lookahead horizon must be at least 1".into());
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.reset_prob) {
            return bad(format!("reset_prob {} outside [0, 1]", self.reset_prob));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma must be positive, got {s}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }

    pub fn sigma_for(&self, d: usize) -> f64 {
        self.sigma.unwrap_or(0.02 * sphere::radius(d))
    }

    /// Environment transitions consumed by one gradient step.
    pub fn steps_per_update(&self) -> u64 {
        (self.m * self.k * self.horizon) as u64
    }
}

/// States visited online, sampled uniformly by visit.
#[derive(Clone, Debug, Default)]
pub struct StateBank {
    states: Vec<usize>,
}

impl StateBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, states: &[usize]) {
        self.states.extend_from_slice(states);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> Option<usize> {
        (!self.states.is_empty()).then(|| self.states[rng.random_range(0..self.states.len())])
    }
}

/// `n`-step discounted return of `policy` from `s0` plus, when `z_r` is
/// given, the bootstrap `γⁿ E_{a~π_z(·|s_n)} ψ(s_n, a, z)ᵀ z_r`. Returns the
/// value and the visited states `s_1..s_n`.
fn lookahead(
    mdp: &TabularMdp,
    policy: &LatentPolicy<'_>,
    reward: &DVector<f64>,
    s0: usize,
    n: usize,
    z_r: Option<&DVector<f64>>,
    rng: &mut Rng,
) -> (f64, Vec<usize>) {
    let gamma = mdp.discount();
    let mut s = s0;
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut visited = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng::sample_index(rng, &policy.probs(s));
        s = mdp.sample_next(s, a, rng);
        ret += disc * reward[s];
        disc *= gamma;
        visited.push(s);
    }
    if let Some(z_r) = z_r {
        let probs = policy.probs(s);
        let terminal: f64 = probs.iter().enumerate().map(|(a, p)| p * policy.psi_dot(s, a, z_r)).sum();
        ret += disc * terminal;
    }
    (ret, visited)
}

/// Lookahead return of `π_z` from `s0`. `z` is sphere-normalized before it
/// conditions the policy; `z_r` enters only the bootstrap term.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_return(
    mdp: &TabularMdp,
    model: &BfmModel,
    task: &RewardTask,
    s0: usize,
    z: &DVector<f64>,
    z_r: &DVector<f64>,
    n: usize,
    bootstrap: bool,
    seed: u64,
) -> Result<f64> {
    if s0 >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("start state {s0} out of range")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("lookahead horizon must be at least 1".into()));
    }
    let zn = sphere::normalize(z).ok_or_else(|| Error::InvalidArgument("latent must be non-zero".into()))?;
    let policy = model.at(&zn);
    let mut rng = rng::seeded(seed);
    Ok(lookahead(mdp, &policy, &task.reward, s0, n, bootstrap.then_some(z_r), &mut rng).0)
}

fn check_batch(returns: &[f64], latents: &[DVector<f64>], mu: &DVector<f64>, sigma: f64) -> Result<()> {
    if returns.len() < 2 {
        return Err(Error::InvalidArgument(format!("leave-one-out needs k >= 2 samples, got {}", returns.len())));
    }
    if returns.len() != latents.len() {
        return Err(Error::Dimension(format!("{} returns for {} latents", returns.len(), latents.len())));
    }
    if latents.iter().any(|z| z.len() != mu.len()) {
        return Err(Error::Dimension("latent and mean dimensions differ".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `(1/k) Σ_i [R_i − mean_{j≠i} R_j] (z_i − mu) / σ²`.
pub fn loo_gradient(returns: &[f64], latents: &[DVector<f64>], mu: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
    check_batch(returns, latents, mu, sigma)?;
    let k = returns.len() as f64;
    let mut g = DVector::zeros(mu.len());
    for (i, (r, z)) in returns.iter().zip(latents).enumerate() {
        // Pairwise differences keep the advantage exactly zero on ties.
        let adv: f64 = returns.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, rj)| r - rj).sum::<f64>() / (k - 1.0);
        g += (z - mu) * adv;
    }
    Ok(g / (k * sigma * sigma))
}

/// Baseline-free REINFORCE, `(1/k) Σ_i R_i (z_i − mu) / σ²`.
pub fn reinforce_gradient(
    returns: &[f64],
    latents: &[DVector<f64>],
    mu: &DVector<f64>,
    sigma: f64,
) -> Result<DVector<f64>> {
    check_batch(returns, latents, mu, sigma)?;
    let mut g = DVector::zeros(mu.len());
    for (r, z) in returns.iter().zip(latents) {
        g += (z - mu) * *r;
    }
    Ok(g / (returns.len() as f64 * sigma * sigma))
}

pub fn run_lola(
    mdp: &TabularMdp,
    model: &BfmModel,
    task: &RewardTask,
    config: &LolaConfig,
    seed: u64,
) -> Result<AdaptationReport> {
    config.validate()?;
    let started = Instant::now();
    let setup = RunSetup::new(mdp, model, task, config.ridge, config.eval_mode, seed)?;
    let z_r = setup.inference.z_r.clone();
    let bootstrap = config.bootstrap.then_some(&z_r);
    let d = model.dim();
    let mut gauss = LatentGaussian::new(setup.initial_latent(config.zero_shot_init, d, seed), config.sigma_for(d), config.lr)?;
    let mut bank = StateBank::new();
    let mut recorder = setup.recorder();
    let per_update = config.steps_per_update();

    recorder.push(0, 0, setup.evaluator.score(&model.at(&gauss.mu).table(), 0)?, setup.cosine(&gauss.mu));
    for step in 1..=config.gradient_steps {
        let t = step as u64;
        let mut g = DVector::zeros(d);
        let mut visited = Vec::with_capacity(per_update as usize);
        for i in 0..config.m {
            let mut start_rng = rng::derived(seed, &[STREAM_START, t, i as u64]);
            let from_d0 = start_rng.random::<f64>() < config.reset_prob;
            let s0 = match (from_d0, bank.sample(&mut rng::derived(seed, &[STREAM_MIXTURE, t, i as u64]))) {
                (false, Some(s)) => s,
                _ => mdp.sample_initial(&mut start_rng),
            };
            let mut latents = Vec::with_capacity(config.k);
            let mut returns = Vec::with_capacity(config.k);
            for j in 0..config.k {
                let mut r = rng::derived(seed, &[STREAM_ROLLOUT, t, i as u64, j as u64]);
                let z = gauss.sample(&mut r);
                let zn = sphere::normalize(&z).unwrap_or_else(|| gauss.mu.clone());
                let (ret, states) = lookahead(mdp, &model.at(&zn), &task.reward, s0, config.horizon, bootstrap, &mut r);
                latents.push(z);
                returns.push(ret);
                visited.extend(states);
            }
            g += loo_gradient(&returns, &latents, &gauss.mu, gauss.sigma)?;
        }
        g /= config.m as f64;
        gauss.step(&g);
        bank.extend(&visited);
        if is_eval_point(step, config.gradient_steps, config.eval_every) {
            let score = setup.evaluator.score(&model.at(&gauss.mu).table(), t)?;
            recorder.push(t * per_update, step, score, setup.cosine(&gauss.mu));
        }
    }
    let cfg = serde_json::to_value(config)?;
    Ok(setup.report("lola", task, seed, recorder, Some(&gauss.mu), cfg, started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfm::{pretrain, pretrain_with_codebook, Codebook, Temperatures};
    use crate::envs;
    use crate::features::{make_features, DataDistribution, FeatureKind};
    use nalgebra::DMatrix;

    fn fork() -> (TabularMdp, BfmModel) {
        let mdp = envs::two_action_fork(0.5).unwrap();
        let f = make_features(&mdp, &FeatureKind::OneHotSubset { indices: vec![1] }).unwrap();
        let cb = Codebook::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let t = Temperatures { interp: 20.0, policy: 1e3 };
        let model = pretrain_with_codebook(&mdp, &f, &DataDistribution::uniform(3), cb, t).unwrap();
        (mdp, model)
    }

    fn task(reward: Vec<f64>) -> RewardTask {
        RewardTask::new("t", DVector::from_vec(reward), 10, 4).unwrap()
    }

    #[test]
    fn bootstrap_closes_the_series() {
        let (mdp, model) = fork();
        let one = DVector::from_element(1, 1.0);
        let r = lookahead_return(&mdp, &model, &task(vec![0.0, 1.0, 0.0]), 0, &one, &one, 2, true, 0).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        let q = crate::mdp::optimal_q(&mdp, &DVector::from_vec(vec![0.0, 1.0, 0.0])).unwrap().q;
        assert!((r - q[(0, 0)]).abs() < 1e-9);
    }

    #[test]
    fn zero_reward_without_bootstrap_is_zero() {
        let (mdp, model) = fork();
        let one = DVector::from_element(1, 1.0);
        assert_eq!(lookahead_return(&mdp, &model, &task(vec![0.0; 3]), 0, &one, &one, 1, false, 3).unwrap(), 0.0);
        assert!(lookahead_return(&mdp, &model, &task(vec![0.0; 3]), 5, &one, &one, 1, false, 3).is_err());
    }

    #[test]
    fn bootstrap_adds_the_discounted_terminal_value() {
        let mdp = envs::make_random_mdp(6, 3, 3, 2, 0.9).unwrap();
        let f = make_features(&mdp, &FeatureKind::RandomOrthonormal { d: 3, seed: 2 }).unwrap();
        let model = pretrain(&mdp, &f, &DataDistribution::uniform(6), 5, 2, Temperatures::default()).unwrap();
        let t = task((0..6).map(|i| i as f64 * 0.1).collect());
        let z = model.codebook().get(2);
        let z_r = DVector::from_vec(vec![0.5, -0.25, 1.0]);
        for seed in 0..5 {
            let on = lookahead_return(&mdp, &model, &t, 1, &z, &z_r, 4, true, seed).unwrap();
            let off = lookahead_return(&mdp, &model, &t, 1, &z, &z_r, 4, false, seed).unwrap();
            // Same stream, same trajectory: recover s_4 and its terminal term.
            let pol = model.at(&z);
            let (_, states) = lookahead(&mdp, &pol, &t.reward, 1, 4, None, &mut rng::seeded(seed));
            let s4 = *states.last().unwrap();
            let p = pol.probs(s4);
            let term: f64 = (0..3).map(|a| p[a] * pol.psi_dot(s4, a, &z_r)).sum();
            assert!((on - off - 0.9f64.powi(4) * term).abs() < 1e-12);
        }
    }

    #[test]
    fn loo_gradient_hand_example() {
        let lat = vec![DVector::from_element(1, 0.5), DVector::from_element(1, -0.3)];
        let g = loo_gradient(&[2.0, 0.0], &lat, &DVector::zeros(1), 1.0).unwrap();
        assert!((g[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn equal_returns_give_an_exactly_zero_gradient() {
        let mut r = rng::seeded(1);
        let lat: Vec<DVector<f64>> = (0..5).map(|_| sphere::sample(&mut r, 3)).collect();
        let g = loo_gradient(&[0.1; 5], &lat, &DVector::from_element(3, 1.0), 0.3).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_sample_is_rejected() {
        let lat = vec![DVector::from_element(1, 0.5)];
        assert!(loo_gradient(&[1.0], &lat, &DVector::zeros(1), 1.0).is_err());
        assert!(LolaConfig { k: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn score_function_has_zero_mean() {
        let g = LatentGaussian::new(DVector::from_vec(vec![1.0, -1.0]), 0.5, 0.1).unwrap();
        let mut r = rng::seeded(9);
        let n = 40_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            sum += (g.sample(&mut r) - &g.mu) / (g.sigma * g.sigma);
        }
        let mean = sum / n as f64;
        // Each coordinate has standard deviation 1/σ; allow four standard errors.
        let se = 1.0 / g.sigma / (n as f64).sqrt();
        assert!(mean.amax() < 4.0 * se, "{mean}");
    }

    #[test]
    fn step_keeps_mu_on_the_sphere() {
        let mut g = LatentGaussian::new(DVector::from_vec(vec![3.0, 4.0, 0.0]), 0.1, 0.7).unwrap();
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let step = g.sample(&mut r) * 5.0;
            g.step(&step);
            assert!((g.mu.norm() - 3f64.sqrt()).abs() < 1e-9);
        }
    }

    fn small_setup() -> (TabularMdp, BfmModel, RewardTask) {
        let mdp = envs::make_random_mdp(8, 3, 3, 12, 0.9).unwrap();
        let f = make_features(&mdp, &FeatureKind::RandomOrthonormal { d: 3, seed: 12 }).unwrap();
        let model = pretrain(&mdp, &f, &DataDistribution::uniform(8), 8, 12, Temperatures::default()).unwrap();
        let t = RewardTask::new("t", DVector::from_fn(8, |i, _| if i == 5 { 1.0 } else { 0.0 }), 20, 4).unwrap();
        (mdp, model, t)
    }

    #[test]
    fn frozen_learning_rate_keeps_everything_constant() {
        let (mdp, model, t) = small_setup();
        let cfg = LolaConfig { lr: 0.0, gradient_steps: 6, eval_every: 1, ..Default::default() };
        let rep = run_lola(&mdp, &model, &t, &cfg, 4).unwrap();
        let first = &rep.records[0];
        for r in &rep.records {
            assert_eq!(r.mean_return, first.mean_return);
            assert_eq!(r.cosine_to_zr.to_bits(), first.cosine_to_zr.to_bits());
        }
    }

    #[test]
    fn accounting_and_determinism() {
        let (mdp, model, t) = small_setup();
        let cfg = LolaConfig { gradient_steps: 7, eval_every: 3, ..Default::default() };
        let a = run_lola(&mdp, &model, &t, &cfg, 8).unwrap();
        let b = run_lola(&mdp, &model, &t, &cfg, 8).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_latent, b.final_latent);
        let last = a.records.last().unwrap();
        assert_eq!(last.env_steps, 7 * 2 * 5 * 15);
        assert_eq!(a.records.iter().map(|r| r.episode).collect::<Vec<_>>(), vec![0, 3, 6, 7]);
        let mu = DVector::from_vec(a.final_latent.unwrap());
        assert!((mu.norm() - 3f64.sqrt()).abs() < 1e-9);
    }
}
