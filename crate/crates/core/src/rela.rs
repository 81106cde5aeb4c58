//! Residual latent adaptation.
//!
//! The pre-trained successor features provide a frozen base Q-function
//! `ψ(s,a,·)ᵀz_r`; a tabular residual critic learns the part of the true
//! reward the base term cannot see, and the policy is improved by gradient
//! ascent on the latent `z` alone.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bfm::{BfmModel, LatentPolicy};
use crate::error::{Error, Result};
use crate::features::DEFAULT_RIDGE;
use crate::mdp::{self, TabularMdp};
use crate::report::{is_eval_point, latent_vec, AdaptationReport, EvalMode, Evaluator, Recorder};
use crate::rng::{self, Rng};
use crate::sphere;
use crate::zeroshot::{infer, InferenceResult, RewardTask};

const STREAM_INIT: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const ZERO_SHOT_EVAL_POINT: u64 = u64::MAX;

/// One environment transition; `r` is the reward of `s_next`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Fixed-capacity FIFO buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self { items: Vec::new(), capacity, next: 0 })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// `n` draws with replacement.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Tabular critic with a polyak-averaged target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCritic {
    pub q: DMatrix<f64>,
    pub q_target: DMatrix<f64>,
    pub lr: f64,
    pub tau: f64,
}

impl ResidualCritic {
    pub fn new(n_states: usize, n_actions: usize, lr: f64, tau: f64) -> Result<Self> {
        if !(lr > 0.0 && lr <= 1.0) {
            return Err(Error::InvalidArgument(format!("critic learning rate {lr} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("polyak coefficient {tau} outside [0, 1]")));
        }
        Ok(Self { q: DMatrix::zeros(n_states, n_actions), q_target: DMatrix::zeros(n_states, n_actions), lr, tau })
    }

    fn polyak(&mut self) {
        let tau = self.tau;
        self.q_target.zip_apply(&self.q, |t, q| *t = (1.0 - tau) * *t + tau * q);
    }
}

/// Which latent the base term conditions the successor features on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseConditioning {
    /// `ψ(s, a, z)ᵀ z_r` with the current latent.
    Z,
    /// `ψ(s, a, z_r)ᵀ z_r`, frozen for the whole run.
    #[default]
    ZR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaConfig {
    pub zero_shot_init: bool,
    pub residual: bool,
    pub warm_start_steps: usize,
    pub utd: usize,
    #[serde(rename = "eps")]
    pub exploration_eps: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub base_psi_conditioning: BaseConditioning,
    pub buffer_capacity: usize,
    pub ridge: f64,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
}

impl Default for RelaConfig {
    fn default() -> Self {
        Self {
            zero_shot_init: true,
            residual: true,
            warm_start_steps: 0,
            utd: 4,
            exploration_eps: 0.1,
            actor_lr: 0.05,
            critic_lr: 0.1,
            tau: 0.01,
            batch_size: 64,
            episodes: 300,
            base_psi_conditioning: BaseConditioning::ZR,
            buffer_capacity: 100_000,
            ridge: DEFAULT_RIDGE,
            eval_every: 10,
            eval_mode: EvalMode::Exact,
        }
    }
}

impl RelaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.utd == 0 {
            return bad("utd must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.exploration_eps) {
            return bad(format!("eps {} outside [0, 1]", self.exploration_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.actor_lr >= 0.0 && self.actor_lr.is_finite()) {
            return bad(format!("actor_lr {} must be finite and non-negative", self.actor_lr));
        }
        if !(self.ridge >= 0.0) {
            return bad(format!("ridge {} must be non-negative", self.ridge));
        }
        ResidualCritic::new(1, 1, self.critic_lr, self.tau).map(|_| ())
    }
}

/// `ψ(s, a, z_cond)ᵀ z_r`.
pub fn base_q(model: &BfmModel, s: usize, a: usize, z_cond: &DVector<f64>, z_r: &DVector<f64>) -> f64 {
    model.at(z_cond).psi_dot(s, a, z_r)
}

/// Everything the critic and actor need about the current latent, tabulated
/// once per latent update.
pub struct LatentTables<'m> {
    pub policy: LatentPolicy<'m>,
    /// `π_z(a|s)`.
    pub probs: DMatrix<f64>,
    /// Base Q-term; `None` when the residual decomposition is disabled.
    pub base: Option<DMatrix<f64>>,
}

impl<'m> LatentTables<'m> {
    /// `base` is the frozen table for `ZR` conditioning; with `Z`
    /// conditioning pass `z_r` and the table is rebuilt from `z`.
    pub fn new(model: &'m BfmModel, z: &DVector<f64>, base: BaseSource<'_>) -> Self {
        let policy = model.at(z);
        let (n, na) = (model.n_states(), model.n_actions());
        let mut probs = DMatrix::zeros(n, na);
        for s in 0..n {
            for (a, p) in policy.probs(s).into_iter().enumerate() {
                probs[(s, a)] = p;
            }
        }
        let base = match base {
            BaseSource::Off => None,
            BaseSource::Frozen(t) => Some(t.clone()),
            BaseSource::Current(z_r) => Some(DMatrix::from_fn(n, na, |s, a| policy.psi_dot(s, a, z_r))),
        };
        Self { policy, probs, base }
    }

    fn base_at(&self, s: usize, a: usize) -> f64 {
        self.base.as_ref().map_or(0.0, |b| b[(s, a)])
    }

    /// `Σ_a π_z(a|s) (base(s,a) + table(s,a))`.
    fn expected(&self, s: usize, table: &DMatrix<f64>) -> f64 {
        (0..self.probs.ncols()).map(|a| self.probs[(s, a)] * (self.base_at(s, a) + table[(s, a)])).sum()
    }
}

pub enum BaseSource<'a> {
    Off,
    Frozen(&'a DMatrix<f64>),
    Current(&'a DVector<f64>),
}

/// `ψ(·, ·, z_cond)ᵀ z_r` for every state-action pair.
pub fn base_table(model: &BfmModel, z_cond: &DVector<f64>, z_r: &DVector<f64>) -> DMatrix<f64> {
    let policy = model.at(z_cond);
    DMatrix::from_fn(model.n_states(), model.n_actions(), |s, a| policy.psi_dot(s, a, z_r))
}

/// One pass of TD updates over `batch`, in order, followed by a single polyak
/// step. Returns the TD error of each element before its update.
pub fn critic_update(critic: &mut ResidualCritic, tables: &LatentTables<'_>, batch: &[Transition], gamma: f64) -> Vec<f64> {
    let mut errors = Vec::with_capacity(batch.len());
    for t in batch {
        let y = t.r + gamma * tables.expected(t.s_next, &critic.q_target);
        let err = y - (tables.base_at(t.s, t.a) + critic.q[(t.s, t.a)]);
        critic.q[(t.s, t.a)] += critic.lr * err;
        errors.push(err);
    }
    critic.polyak();
    errors
}

/// Tangent-space gradient of
/// `J(z) = mean_s Σ_a π_z(a|s) [base(s,a;z) + q(s,a)]` over `states`.
///
/// `z_r_for_base` is `Some(z_r)` only when the base term is conditioned on
/// the current latent and so contributes its own derivative.
pub fn latent_gradient(
    tables: &LatentTables<'_>,
    critic_q: &DMatrix<f64>,
    z_r_for_base: Option<&DVector<f64>>,
    states: &[usize],
) -> DVector<f64> {
    let policy = &tables.policy;
    let z = policy.z();
    let d = z.len();
    let na = tables.probs.ncols();
    let beta = policy.model().temperatures().policy;
    let mut g = DVector::zeros(d);
    if states.is_empty() {
        return g;
    }
    let mut qs = vec![0.0; na];
    for &s in states {
        for (a, q) in qs.iter_mut().enumerate() {
            *q = tables.base_at(s, a) + critic_q[(s, a)];
        }
        let v: f64 = (0..na).map(|a| tables.probs[(s, a)] * qs[a]).sum();
        for a in 0..na {
            let p = tables.probs[(s, a)];
            // ∇ log-softmax term: β_π π_a (Q_a − V) (ψ_a + J_aᵀ z).
            let c = beta * p * (qs[a] - v);
            if c != 0.0 {
                g += policy.psi(s, a) * c;
                policy.add_psi_vjp(s, a, z, c, &mut g);
            }
            if let Some(z_r) = z_r_for_base {
                policy.add_psi_vjp(s, a, z_r, p, &mut g);
            }
        }
    }
    g /= states.len() as f64;
    sphere::tangent(z, &g)
}

/// `normalize(z + lr·g)`; keeps `z` when the step lands on the origin.
pub fn latent_step(z: &DVector<f64>, g: &DVector<f64>, lr: f64) -> DVector<f64> {
    sphere::normalize(&(z + g * lr)).unwrap_or_else(|| z.clone())
}

/// Critic state at the end of a run, for diagnostics.
#[derive(Clone, Debug)]
pub struct RelaOutcome {
    pub report: AdaptationReport,
    pub critic: ResidualCritic,
    pub inference: InferenceResult,
    pub last_td_errors: Vec<f64>,
}

/// Inference, reference returns and the evaluator shared by the latent
/// adaptation loops.
pub(crate) struct RunSetup<'a> {
    pub inference: InferenceResult,
    pub evaluator: Evaluator<'a>,
    pub zero_shot_return: f64,
    pub optimal_return: f64,
}

impl<'a> RunSetup<'a> {
    pub fn new(
        mdp: &'a TabularMdp,
        model: &BfmModel,
        task: &'a RewardTask,
        ridge: f64,
        mode: EvalMode,
        seed: u64,
    ) -> Result<Self> {
        if model.n_states() != mdp.n_states() || model.n_actions() != mdp.n_actions() {
            return Err(Error::Dimension("model and environment disagree on the state-action space".into()));
        }
        let inference = infer(model, task, ridge)?;
        let evaluator = Evaluator { mdp, task, mode, seed: rng::derive_seed(seed, &[0xE7]) };
        let (zero_shot_return, _) = evaluator.score(&model.at(&inference.policy_latent).table(), ZERO_SHOT_EVAL_POINT)?;
        let optimal_return = mdp::optimal_return(mdp, &task.reward)?;
        Ok(Self { inference, evaluator, zero_shot_return, optimal_return })
    }

    pub fn recorder(&self) -> Recorder {
        Recorder::new(self.zero_shot_return, self.optimal_return)
    }

    /// NaN when inference was degenerate.
    pub fn cosine(&self, z: &DVector<f64>) -> f64 {
        match &self.inference.z_r_sphere {
            Some(zr) => sphere::cosine(z, zr),
            None => f64::NAN,
        }
    }

    pub fn initial_latent(&self, zero_shot_init: bool, d: usize, seed: u64) -> DVector<f64> {
        if zero_shot_init {
            self.inference.policy_latent.clone()
        } else {
            sphere::sample(&mut rng::derived(seed, &[STREAM_INIT]), d)
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn report(
        &self,
        algorithm: &str,
        task: &RewardTask,
        seed: u64,
        recorder: Recorder,
        z: Option<&DVector<f64>>,
        config: serde_json::Value,
        started: Instant,
    ) -> AdaptationReport {
        AdaptationReport {
            algorithm: algorithm.into(),
            task: task.name.clone(),
            seed,
            records: recorder.records,
            zero_shot_return: self.zero_shot_return,
            optimal_return: self.optimal_return,
            degenerate_inference: self.inference.degenerate,
            final_latent: z.and_then(latent_vec),
            config,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        }
    }
}

fn behaviour_action(probs: &DMatrix<f64>, s: usize, eps: f64, rng: &mut Rng) -> usize {
    let na = probs.ncols();
    if eps > 0.0 && rng.random::<f64>() < eps {
        rng.random_range(0..na)
    } else {
        let row: Vec<f64> = probs.row(s).iter().copied().collect();
        rng::sample_index(rng, &row)
    }
}

/// Roll `steps` transitions under the behaviour policy in episodes of
/// `horizon` steps, storing them. Returns the number stored.
fn collect(
    mdp: &TabularMdp,
    probs: &DMatrix<f64>,
    reward: &DVector<f64>,
    horizon: usize,
    steps: usize,
    eps: f64,
    buffer: &mut ReplayBuffer,
    rng: &mut Rng,
) -> usize {
    let mut done = 0;
    while done < steps {
        let mut s = mdp.sample_initial(rng);
        for _ in 0..horizon.min(steps - done) {
            let a = behaviour_action(probs, s, eps, rng);
            let s2 = mdp.sample_next(s, a, rng);
            buffer.push(Transition { s, a, r: reward[s2], s_next: s2 });
            s = s2;
            done += 1;
        }
    }
    done
}

pub fn run_rela(
    mdp: &TabularMdp,
    model: &BfmModel,
    task: &RewardTask,
    config: &RelaConfig,
    seed: u64,
) -> Result<AdaptationReport> {
    run_rela_detailed(mdp, model, task, config, seed).map(|o| o.report)
}

pub fn run_rela_detailed(
    mdp: &TabularMdp,
    model: &BfmModel,
    task: &RewardTask,
    config: &RelaConfig,
    seed: u64,
) -> Result<RelaOutcome> {
    config.validate()?;
    let started = Instant::now();
    let setup = RunSetup::new(mdp, model, task, config.ridge, config.eval_mode, seed)?;
    let z_r = setup.inference.z_r.clone();
    let gamma = mdp.discount();

    let frozen_base = match (config.residual, config.base_psi_conditioning) {
        (true, BaseConditioning::ZR) => Some(base_table(model, &setup.inference.policy_latent, &z_r)),
        _ => None,
    };
    let source = || match (config.residual, config.base_psi_conditioning) {
        (false, _) => BaseSource::Off,
        (true, BaseConditioning::ZR) => BaseSource::Frozen(frozen_base.as_ref().expect("built above")),
        (true, BaseConditioning::Z) => BaseSource::Current(&z_r),
    };
    let grad_base = (config.residual && config.base_psi_conditioning == BaseConditioning::Z).then_some(&z_r);

    let mut z = setup.initial_latent(config.zero_shot_init, model.dim(), seed);
    let mut act_rng = rng::derived(seed, &[STREAM_ACT]);
    let mut replay_rng = rng::derived(seed, &[STREAM_REPLAY]);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut critic = ResidualCritic::new(model.n_states(), model.n_actions(), config.critic_lr, config.tau)?;
    let mut tables = LatentTables::new(model, &z, source());
    let mut recorder = setup.recorder();
    let mut last_td = Vec::new();

    recorder.push(0, 0, setup.evaluator.score(&tables.policy.table(), 0)?, setup.cosine(&z));
    let mut env_steps = collect(
        mdp,
        &tables.probs,
        &task.reward,
        task.horizon,
        config.warm_start_steps,
        config.exploration_eps,
        &mut buffer,
        &mut act_rng,
    ) as u64;

    for ep in 1..=config.episodes {
        let mut s = mdp.sample_initial(&mut act_rng);
        for _ in 0..task.horizon {
            let a = behaviour_action(&tables.probs, s, config.exploration_eps, &mut act_rng);
            let s2 = mdp.sample_next(s, a, &mut act_rng);
            buffer.push(Transition { s, a, r: task.reward[s2], s_next: s2 });
            env_steps += 1;
            s = s2;
            for _ in 0..config.utd {
                let batch = buffer.sample(&mut replay_rng, config.batch_size)?;
                last_td = critic_update(&mut critic, &tables, &batch, gamma);
            }
            let states: Vec<usize> =
                buffer.sample(&mut replay_rng, config.batch_size)?.iter().map(|t| t.s).collect();
            let g = latent_gradient(&tables, &critic.q, grad_base, &states);
            z = latent_step(&z, &g, config.actor_lr);
            tables = LatentTables::new(model, &z, source());
        }
        if is_eval_point(ep, config.episodes, config.eval_every) {
            recorder.push(env_steps, ep, setup.evaluator.score(&tables.policy.table(), ep as u64)?, setup.cosine(&z));
        }
    }

    let cfg = serde_json::to_value(config)?;
    let report = setup.report("rela", task, seed, recorder, Some(&z), cfg, started);
    Ok(RelaOutcome { report, critic, inference: setup.inference, last_td_errors: last_td })
}

/// Scratch latent actor-critic: the same latent search with a critic that
/// learns the full Q-function of `train_reward` and a random initial latent.
/// Returns are always scored on `task.reward`.
pub fn run_td3z_scratch(
    mdp: &TabularMdp,
    model: &BfmModel,
    task: &RewardTask,
    train_reward: &DVector<f64>,
    config: &RelaConfig,
    seed: u64,
) -> Result<AdaptationReport> {
    config.validate()?;
    if train_reward.len() != mdp.n_states() {
        return Err(Error::Dimension("training reward does not match the state space".into()));
    }
    let started = Instant::now();
    let setup = RunSetup::new(mdp, model, task, config.ridge, config.eval_mode, seed)?;
    let gamma = mdp.discount();
    let mut z = sphere::sample(&mut rng::derived(seed, &[STREAM_INIT]), model.dim());
    let mut act_rng = rng::derived(seed, &[STREAM_ACT]);
    let mut replay_rng = rng::derived(seed, &[STREAM_REPLAY]);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut critic = ResidualCritic::new(model.n_states(), model.n_actions(), config.critic_lr, config.tau)?;
    let mut tables = LatentTables::new(model, &z, BaseSource::Off);
    let mut recorder = setup.recorder();

    recorder.push(0, 0, setup.evaluator.score(&tables.policy.table(), 0)?, setup.cosine(&z));
    let mut env_steps = collect(
        mdp,
        &tables.probs,
        train_reward,
        task.horizon,
        config.warm_start_steps,
        config.exploration_eps,
        &mut buffer,
        &mut act_rng,
    ) as u64;
    for ep in 1..=config.episodes {
        let mut s = mdp.sample_initial(&mut act_rng);
        for _ in 0..task.horizon {
            let a = behaviour_action(&tables.probs, s, config.exploration_eps, &mut act_rng);
            let s2 = mdp.sample_next(s, a, &mut act_rng);
            buffer.push(Transition { s, a, r: train_reward[s2], s_next: s2 });
            env_steps += 1;
            s = s2;
            for _ in 0..config.utd {
                let batch = buffer.sample(&mut replay_rng, config.batch_size)?;
                critic_update(&mut critic, &tables, &batch, gamma);
            }
            let states: Vec<usize> =
                buffer.sample(&mut replay_rng, config.batch_size)?.iter().map(|t| t.s).collect();
            z = latent_step(&z, &latent_gradient(&tables, &critic.q, None, &states), config.actor_lr);
            tables = LatentTables::new(model, &z, BaseSource::Off);
        }
        if is_eval_point(ep, config.episodes, config.eval_every) {
            recorder.push(env_steps, ep, setup.evaluator.score(&tables.policy.table(), ep as u64)?, setup.cosine(&z));
        }
    }
    let cfg = serde_json::to_value(config)?;
    Ok(setup.report("td3z_scratch", task, seed, recorder, Some(&z), cfg, started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfm::{pretrain, pretrain_with_codebook, Codebook, Temperatures};
    use crate::envs;
    use crate::features::{make_features, DataDistribution, FeatureKind};

    fn chain_model() -> (TabularMdp, BfmModel) {
        let mdp = envs::chain2(0.5).unwrap();
        let f = make_features(&mdp, &FeatureKind::OneHotSubset { indices: vec![1] }).unwrap();
        let cb = Codebook::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let model = pretrain_with_codebook(&mdp, &f, &DataDistribution::uniform(2), cb, Temperatures::default()).unwrap();
        (mdp, model)
    }

    fn random_model(seed: u64) -> (TabularMdp, BfmModel) {
        let mdp = envs::make_random_mdp(7, 3, 3, seed, 0.9).unwrap();
        let f = make_features(&mdp, &FeatureKind::RandomOrthonormal { d: 3, seed }).unwrap();
        let t = Temperatures { interp: 4.0, policy: 2.0 };
        let model = pretrain(&mdp, &f, &DataDistribution::uniform(7), 6, seed, t).unwrap();
        (mdp, model)
    }

    fn one() -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }

    #[test]
    fn chain_base_q_is_the_geometric_series() {
        let (_, model) = chain_model();
        assert!((base_q(&model, 0, 0, &one(), &one()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn consistent_fixed_point_leaves_critic_unchanged() {
        let (_, model) = chain_model();
        let base = base_table(&model, &one(), &one());
        let tables = LatentTables::new(&model, &one(), BaseSource::Frozen(&base));
        let mut critic = ResidualCritic::new(2, 1, 0.1, 0.01).unwrap();
        let t = Transition { s: 0, a: 0, r: 1.0, s_next: 1 };
        let errs = critic_update(&mut critic, &tables, &[t], 0.5);
        assert!(errs[0].abs() < 1e-12);
        assert!(critic.q.amax() < 1e-12);
    }

    #[test]
    fn zero_reward_keeps_fresh_critic_at_zero() {
        let (_, model) = random_model(1);
        let z = model.codebook().get(0);
        let tables = LatentTables::new(&model, &z, BaseSource::Off);
        let mut critic = ResidualCritic::new(7, 3, 0.5, 0.1).unwrap();
        let batch: Vec<Transition> = (0..7).map(|s| Transition { s, a: s % 3, r: 0.0, s_next: (s + 1) % 7 }).collect();
        for _ in 0..10 {
            critic_update(&mut critic, &tables, &batch, 0.9);
        }
        assert_eq!(critic.q.amax(), 0.0);
        assert_eq!(critic.q_target.amax(), 0.0);
    }

    #[test]
    fn fixed_batch_td_error_vanishes() {
        let mdp = envs::make_random_mdp(5, 2, 1, 3, 0.8).unwrap();
        let f = make_features(&mdp, &FeatureKind::RandomOrthonormal { d: 2, seed: 3 }).unwrap();
        let model = pretrain(&mdp, &f, &DataDistribution::uniform(5), 4, 3, Temperatures::default()).unwrap();
        let z = model.codebook().get(1);
        let z_r = DVector::from_vec(vec![0.3, -0.7]);
        let tables = LatentTables::new(&model, &z, BaseSource::Current(&z_r));
        let batch: Vec<Transition> = (0..5)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| {
                let s_next = mdp.successors(s, a)[0].0;
                Transition { s, a, r: (s_next as f64).sin(), s_next }
            })
            .collect();
        let mut critic = ResidualCritic::new(5, 2, 0.5, 0.2).unwrap();
        let mut errs = vec![1.0];
        for _ in 0..3000 {
            errs = critic_update(&mut critic, &tables, &batch, mdp.discount());
        }
        assert!(errs.iter().all(|e| e.abs() < 1e-6), "{errs:?}");
    }

    fn objective(model: &BfmModel, z: &DVector<f64>, q: &DMatrix<f64>, z_r: Option<&DVector<f64>>, states: &[usize]) -> f64 {
        let pol = model.at(z);
        let total: f64 = states
            .iter()
            .map(|&s| {
                let p = pol.probs(s);
                (0..model.n_actions()).map(|a| p[a] * (q[(s, a)] + z_r.map_or(0.0, |zr| pol.psi_dot(s, a, zr)))).sum::<f64>()
            })
            .sum();
        total / states.len() as f64
    }

    fn fd_sphere_gradient(f: impl Fn(&DVector<f64>) -> f64, z: &DVector<f64>, h: f64) -> DVector<f64> {
        let d = z.len();
        DVector::from_fn(d, |j, _| {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[j] += h;
            minus[j] -= h;
            (f(&sphere::normalize(&plus).unwrap()) - f(&sphere::normalize(&minus).unwrap())) / (2.0 * h)
        })
    }

    #[test]
    fn latent_gradient_matches_finite_differences_for_both_conditionings() {
        let (_, model) = random_model(4);
        let mut g = rng::seeded(4);
        let states = [0, 1, 1, 3, 6, 5];
        for case in 0..6 {
            let z = sphere::sample(&mut g, 3);
            let z_r = DVector::from_fn(3, |_, _| g.random::<f64>() - 0.5);
            let q = DMatrix::from_fn(7, 3, |_, _| g.random::<f64>() * 3.0);
            let current = case % 2 == 0;
            let tables = if current {
                LatentTables::new(&model, &z, BaseSource::Current(&z_r))
            } else {
                LatentTables::new(&model, &z, BaseSource::Off)
            };
            let grad = latent_gradient(&tables, &q, current.then_some(&z_r), &states);
            let fd = fd_sphere_gradient(|zz| objective(&model, zz, &q, current.then_some(&z_r), &states), &z, 1e-5);
            let rel = (&grad - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-4, "case {case}: relative error {rel}");
        }
    }

    #[test]
    fn frozen_base_gradient_matches_finite_differences() {
        let (_, model) = random_model(9);
        let mut g = rng::seeded(9);
        let z = sphere::sample(&mut g, 3);
        let base = DMatrix::from_fn(7, 3, |_, _| g.random::<f64>());
        let q = DMatrix::from_fn(7, 3, |_, _| g.random::<f64>());
        let tables = LatentTables::new(&model, &z, BaseSource::Frozen(&base));
        let states = [2, 4, 6];
        let grad = latent_gradient(&tables, &q, None, &states);
        let total = &base + &q;
        let fd = fd_sphere_gradient(|zz| objective(&model, zz, &total, None, &states), &z, 1e-5);
        assert!((&grad - &fd).norm() / fd.norm() < 1e-4);
    }

    #[test]
    fn single_skill_gradient_is_the_softmax_term() {
        let (_, model) = {
            let mdp = envs::make_random_mdp(4, 2, 2, 5, 0.9).unwrap();
            let f = make_features(&mdp, &FeatureKind::RandomOrthonormal { d: 2, seed: 5 }).unwrap();
            let m = pretrain(&mdp, &f, &DataDistribution::uniform(4), 1, 5, Temperatures::default()).unwrap();
            (mdp, m)
        };
        let z = DVector::from_vec(vec![1.0, 1.0]);
        let q = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 0.5, -1.0, 0.0, 0.0, 0.0]);
        let tables = LatentTables::new(&model, &z, BaseSource::Off);
        let grad = latent_gradient(&tables, &q, None, &[1]);
        // Two actions: ∇J = π0 π1 (Q0 − Q1) β_π (ψ0 − ψ1), then tangent projection.
        let psi = &model.psi_tables()[0];
        let psi0 = psi.row(2).transpose();
        let psi1 = psi.row(3).transpose();
        let p = tables.probs.row(1);
        let hand = (&psi0 - &psi1) * (p[0] * p[1] * (2.0 - 0.5) * model.temperatures().policy);
        assert!((grad - sphere::tangent(&z, &hand)).amax() < 1e-12);
    }

    #[test]
    fn constant_critic_shift_leaves_gradient_unchanged() {
        let (_, model) = random_model(2);
        let mut g = rng::seeded(2);
        let z = sphere::sample(&mut g, 3);
        let q = DMatrix::from_fn(7, 3, |_, _| g.random::<f64>());
        let tables = LatentTables::new(&model, &z, BaseSource::Off);
        let states = [0, 2, 5];
        let a = latent_gradient(&tables, &q, None, &states);
        let b = latent_gradient(&tables, &q.add_scalar(7.5), None, &states);
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn replay_buffer_is_fifo_and_refuses_empty_sampling() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        let mut g = rng::seeded(0);
        assert!(buf.sample(&mut g, 1).is_err());
        for s in 0..3 {
            buf.push(Transition { s, a: 0, r: 0.0, s_next: 0 });
        }
        let mut kept: Vec<usize> = buf.items().iter().map(|t| t.s).collect();
        kept.sort();
        assert_eq!(kept, vec![1, 2]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            RelaConfig { utd: 0, ..Default::default() },
            RelaConfig { exploration_eps: 1.5, ..Default::default() },
            RelaConfig { critic_lr: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn runs_repeat_under_a_seed() {
        let (mdp, model) = random_model(6);
        let task = RewardTask::new("t", DVector::from_fn(7, |i, _| (i as f64).cos()), 10, 4).unwrap();
        let cfg = RelaConfig { episodes: 6, eval_every: 2, batch_size: 8, ..Default::default() };
        let a = run_rela(&mdp, &model, &task, &cfg, 3).unwrap();
        let b = run_rela(&mdp, &model, &task, &cfg, 3).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_latent, b.final_latent);
        assert_eq!(a.records.iter().map(|r| r.episode).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert_eq!(a.records.last().unwrap().env_steps, 60);
    }

    #[test]
    fn scratch_reduction_is_exact() {
        let (mdp, model) = random_model(8);
        let task = RewardTask::new("t", DVector::from_fn(7, |i, _| (i as f64).sin()), 10, 4).unwrap();
        let cfg = RelaConfig { episodes: 5, eval_every: 1, zero_shot_init: false, residual: false, ..Default::default() };
        let rela = run_rela(&mdp, &model, &task, &cfg, 21).unwrap();
        let scratch = run_td3z_scratch(&mdp, &model, &task, &task.reward, &cfg, 21).unwrap();
        assert_eq!(rela.records, scratch.records);
        assert_eq!(rela.final_latent, scratch.final_latent);
    }
}
