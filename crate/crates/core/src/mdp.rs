//! Exact finite-MDP machinery: transition kernels, policies, successor
//! measures, Q-functions, optimal control and seeded rollouts.
//!
//! State-action pairs are flattened row-major: `(s, a)` lives at row
//! `s * n_actions + a` of every `(S·A) × S` operator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const PROB_TOL: f64 = 1e-12;

/// Stop tolerance (sup-norm change) of value iteration.
pub const VI_TOLERANCE: f64 = 1e-10;

/// Finite reward-free MDP.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: DMatrix<f64>,
    initial_dist: DVector<f64>,
    discount: f64,
    // Sparse view of `transition`, used by rollouts and Bellman backups.
    successors: Vec<Vec<(usize, f64)>>,
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl TabularMdp {
    /// `transition` is `(n_states * n_actions) × n_states` with rows `P(·|s, a)`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: DMatrix<f64>,
        initial_dist: DVector<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("MDP needs at least one state and one action".into()));
        }
        if transition.nrows() != n_states * n_actions || transition.ncols() != n_states {
            return Err(Error::Dimension(format!(
                "transition is {}x{}, expected {}x{}",
                transition.nrows(),
                transition.ncols(),
                n_states * n_actions,
                n_states
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::Dimension(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial_dist.len()
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidArgument(format!("discount {discount} outside (0, 1)")));
        }
        let mut successors = Vec::with_capacity(n_states * n_actions);
        for row in 0..n_states * n_actions {
            let r: Vec<f64> = transition.row(row).iter().copied().collect();
            check_distribution(&r, &format!("P(·|s={}, a={})", row / n_actions, row % n_actions))?;
            successors.push(
                r.iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(s, p)| (s, *p))
                    .collect(),
            );
        }
        check_distribution(initial_dist.as_slice(), "initial distribution")?;
        Ok(Self { n_states, n_actions, transition, initial_dist, discount, successors })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    /// Sparse next-state distribution of `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    /// Same MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.initial_dist.clone(),
            discount,
        )
    }

    /// Same MDP with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: DVector<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.transition.clone(), initial_dist, self.discount)
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        let succ = self.successors(s, a);
        if succ.len() == 1 {
            return succ[0].0;
        }
        let probs: Vec<f64> = succ.iter().map(|(_, p)| *p).collect();
        succ[rng::sample_index(rng, &probs)].0
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        rng::sample_index(rng, self.initial_dist.as_slice())
    }

    /// Expected next-state reward `Σ_{s'} P(s'|s,a) r(s')`, flattened over `(s, a)`.
    pub fn expected_reward(&self, reward: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.successors.len(),
            self.successors.iter().map(|row| row.iter().map(|(s, p)| p * reward[*s]).sum()),
        )
    }

    fn check_reward(&self, reward: &DVector<f64>) -> Result<()> {
        if reward.len() != self.n_states {
            return Err(Error::Dimension(format!(
                "reward has {} entries, MDP has {} states",
                reward.len(),
                self.n_states
            )));
        }
        Ok(())
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        let p = policy.probs();
        if p.nrows() != self.n_states || p.ncols() != self.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                p.nrows(),
                p.ncols(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    /// State-to-state kernel `P^π[s][s'] = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_kernel(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n_states, self.n_states);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for &(s2, p) in self.successors(s, a) {
                    k[(s, s2)] += w * p;
                }
            }
        }
        k
    }
}

/// Stochastic policy `π[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    probs: DMatrix<f64>,
}

impl PolicyTable {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row: Vec<f64> = probs.row(s).iter().copied().collect();
            check_distribution(&row, &format!("π(·|s={s})"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidArgument(format!("action {a} out of range at state {s}")));
            }
            probs[(s, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        self.probs.row(s).iter().copied().collect()
    }

    /// Most likely action per state, lowest index on ties.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states()).map(|s| argmax(self.probs.row(s).iter().copied())).collect()
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        rng::sample_index(rng, &self.action_probs(s))
    }
}

/// Lowest index among maximal entries.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Discounted future-state mass `M^π`, rows indexed by `(s, a)`.
#[derive(Clone, Debug)]
pub struct SuccessorMeasure {
    pub m: DMatrix<f64>,
    n_actions: usize,
}

impl SuccessorMeasure {
    /// `M^π[(s, a)][·]` as an owned vector over next states.
    pub fn row(&self, s: usize, a: usize) -> DVector<f64> {
        self.m.row(s * self.n_actions + a).transpose()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// `(I − γ P^π)^{-1}`.
fn resolvent(mdp: &TabularMdp, policy: &PolicyTable) -> DMatrix<f64> {
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - mdp.state_kernel(policy) * mdp.discount();
    // Strictly diagonally dominant in the row-sum sense for γ < 1; LU never fails.
    a.lu().try_inverse().expect("I - γP^π is invertible for γ < 1")
}

/// `M^π = P (I − γ P^π)^{-1}`.
pub fn successor_measure(mdp: &TabularMdp, policy: &PolicyTable) -> Result<SuccessorMeasure> {
    mdp.check_policy(policy)?;
    let m = mdp.transition() * resolvent(mdp, policy);
    Ok(SuccessorMeasure { m, n_actions: mdp.n_actions() })
}

/// Reshape a flattened `(s, a)` vector into an `S × A` table.
pub fn unflatten(v: &DVector<f64>, n_states: usize, n_actions: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_states, n_actions, |s, a| v[s * n_actions + a])
}

/// `Q^π_r = M^π r` as an `S × A` table.
pub fn q_of_policy(mdp: &TabularMdp, policy: &PolicyTable, reward: &DVector<f64>) -> Result<DMatrix<f64>> {
    mdp.check_reward(reward)?;
    let m = successor_measure(mdp, policy)?;
    Ok(unflatten(&(m.m * reward), mdp.n_states(), mdp.n_actions()))
}

/// State values `V^π_r(s) = Σ_a π(a|s) Q^π_r(s, a)` by a single linear solve.
pub fn state_values(mdp: &TabularMdp, policy: &PolicyTable, reward: &DVector<f64>) -> Result<DVector<f64>> {
    mdp.check_reward(reward)?;
    mdp.check_policy(policy)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let pr = mdp.expected_reward(reward);
    let r_pi = DVector::from_fn(n, |s, _| (0..na).map(|a| policy.prob(s, a) * pr[s * na + a]).sum());
    let a = DMatrix::identity(n, n) - mdp.state_kernel(policy) * mdp.discount();
    a.lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Singular("policy evaluation system".into()))
}

/// Expected discounted return from the initial distribution, `d0ᵀ V^π_r`.
pub fn exact_return(mdp: &TabularMdp, policy: &PolicyTable, reward: &DVector<f64>) -> Result<f64> {
    Ok(mdp.initial_dist().dot(&state_values(mdp, policy, reward)?))
}

/// Optimal Q-function and its greedy deterministic policy.
#[derive(Clone, Debug)]
pub struct OptimalControl {
    pub q: DMatrix<f64>,
    pub policy: PolicyTable,
    pub actions: Vec<usize>,
    pub iterations: usize,
}

/// Value iteration for `Q*(s,a) = Σ_{s'} P(s'|s,a) [r(s') + γ max_{a'} Q*(s',a')]`,
/// stopped once the sup-norm change drops below [`VI_TOLERANCE`]. The greedy
/// policy breaks ties towards the lowest action index.
pub fn optimal_q(mdp: &TabularMdp, reward: &DVector<f64>) -> Result<OptimalControl> {
    mdp.check_reward(reward)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let mut v = DVector::<f64>::zeros(n);
    let mut q = DMatrix::<f64>::zeros(n, na);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta = 0.0f64;
        for s in 0..n {
            for a in 0..na {
                let val: f64 = mdp
                    .successors(s, a)
                    .iter()
                    .map(|&(s2, p)| p * (reward[s2] + gamma * v[s2]))
                    .sum();
                delta = delta.max((val - q[(s, a)]).abs());
                q[(s, a)] = val;
            }
        }
        for s in 0..n {
            v[s] = q.row(s).max();
        }
        if delta < VI_TOLERANCE {
            break;
        }
    }
    let actions: Vec<usize> = (0..n).map(|s| argmax(q.row(s).iter().copied())).collect();
    let policy = PolicyTable::deterministic(&actions, na)?;
    Ok(OptimalControl { q, policy, actions, iterations })
}

/// Exact optimal discounted return from `d0`: the greedy value-iteration
/// policy evaluated with a linear solve.
pub fn optimal_return(mdp: &TabularMdp, reward: &DVector<f64>) -> Result<f64> {
    let opt = optimal_q(mdp, reward)?;
    exact_return(mdp, &opt.policy, reward)
}

/// Trajectory with next-state rewards: `rewards[t] = r(states[t + 1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub start_state: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    State(usize),
    Initial,
}

/// Roll out `horizon` steps. `action_sampler(state, rng)` chooses actions and
/// shares the trajectory's random stream.
pub fn rollout<F>(
    mdp: &TabularMdp,
    mut action_sampler: F,
    start: Start,
    horizon: usize,
    reward: &DVector<f64>,
    rng: &mut Rng,
) -> Result<Rollout>
where
    F: FnMut(usize, &mut Rng) -> usize,
{
    mdp.check_reward(reward)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    let s0 = match start {
        Start::State(s) if s < mdp.n_states() => s,
        Start::State(s) => return Err(Error::InvalidArgument(format!("start state {s} out of range"))),
        Start::Initial => mdp.sample_initial(rng),
    };
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    states.push(s0);
    let mut s = s0;
    for _ in 0..horizon {
        let a = action_sampler(s, rng);
        if a >= mdp.n_actions() {
            return Err(Error::InvalidArgument(format!("sampler returned action {a}")));
        }
        let s2 = mdp.sample_next(s, a, rng);
        actions.push(a);
        rewards.push(reward[s2]);
        states.push(s2);
        s = s2;
    }
    Ok(Rollout { states, actions, rewards, start_state: s0 })
}

/// Seeded convenience wrapper around [`rollout`].
pub fn rollout_seeded<F>(
    mdp: &TabularMdp,
    action_sampler: F,
    start: Start,
    horizon: usize,
    reward: &DVector<f64>,
    seed: u64,
) -> Result<Rollout>
where
    F: FnMut(usize, &mut Rng) -> usize,
{
    let mut rng = rng::seeded(seed);
    rollout(mdp, action_sampler, start, horizon, reward, &mut rng)
}

pub fn discounted_return(rollout: &Rollout, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for r in &rollout.rewards {
        g += w * r;
        w *= gamma;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{chain2, make_random_mdp, two_action_fork};

    fn indicator(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    /// Iterative policy evaluation, the fixed-point oracle for `q_of_policy`.
    fn iterate_q(mdp: &TabularMdp, pi: &PolicyTable, r: &DVector<f64>, sweeps: usize) -> DMatrix<f64> {
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        let mut q = DMatrix::zeros(n, na);
        for _ in 0..sweeps {
            let v = DVector::from_fn(n, |s, _| (0..na).map(|a| pi.prob(s, a) * q[(s, a)]).sum::<f64>());
            q = DMatrix::from_fn(n, na, |s, a| {
                mdp.successors(s, a).iter().map(|&(s2, p)| p * (r[s2] + mdp.discount() * v[s2])).sum()
            });
        }
        q
    }

    #[test]
    fn chain2_successor_measure() {
        let mdp = chain2(0.5).unwrap();
        let m = successor_measure(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((m.m[(0, 1)] - 2.0).abs() < 1e-12);
        assert_eq!(m.m[(0, 0)], 0.0);
        assert_eq!(m.row(0, 0).len(), 2);
    }

    #[test]
    fn absorbing_state_mass() {
        for gamma in [0.1, 0.5, 0.9, 0.99] {
            let mdp = chain2(gamma).unwrap();
            let m = successor_measure(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
            assert!((m.m[(1, 1)] - 1.0 / (1.0 - gamma)).abs() < 1e-9);
        }
    }

    #[test]
    fn random_mdp_row_mass() {
        let mdp = make_random_mdp(5, 3, 3, 21, 0.8).unwrap();
        let m = successor_measure(&mdp, &PolicyTable::uniform(5, 3)).unwrap();
        for row in m.m.row_iter() {
            assert!((row.sum() - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn chain2_q_values() {
        let mdp = chain2(0.5).unwrap();
        let q = q_of_policy(&mdp, &PolicyTable::uniform(2, 1), &indicator(2, 1)).unwrap();
        assert!((q[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((q[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zero_q() {
        let mdp = make_random_mdp(6, 2, 3, 2, 0.9).unwrap();
        let q = q_of_policy(&mdp, &PolicyTable::uniform(6, 2), &DVector::zeros(6)).unwrap();
        assert_eq!(q.amax(), 0.0);
    }

    #[test]
    fn q_matches_iterative_evaluation() {
        let mdp = make_random_mdp(4, 3, 3, 5, 0.9).unwrap();
        let probs = DMatrix::from_fn(4, 3, |s, a| ((s + 2 * a + 1) as f64).sqrt());
        let sums: Vec<f64> = probs.row_iter().map(|r| r.sum()).collect();
        let pi = PolicyTable::new(DMatrix::from_fn(4, 3, |s, a| probs[(s, a)] / sums[s])).unwrap();
        let r = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.25]);
        let exact = q_of_policy(&mdp, &pi, &r).unwrap();
        let oracle = iterate_q(&mdp, &pi, &r, 10_000);
        assert!((exact - oracle).amax() < 1e-8);
    }

    #[test]
    fn reward_dimension_mismatch() {
        let mdp = chain2(0.5).unwrap();
        assert!(matches!(
            q_of_policy(&mdp, &PolicyTable::uniform(2, 1), &DVector::zeros(3)),
            Err(Error::Dimension(_))
        ));
        assert!(successor_measure(&mdp, &PolicyTable::uniform(3, 1)).is_err());
    }

    #[test]
    fn fork_optimal_control() {
        let mdp = two_action_fork(0.5).unwrap();
        let opt = optimal_q(&mdp, &indicator(3, 1)).unwrap();
        assert!((opt.q[(0, 0)] - 2.0).abs() < 1e-9);
        assert!(opt.q[(0, 1)].abs() < 1e-9);
        assert_eq!(opt.actions[0], 0);
    }

    #[test]
    fn constant_reward_constant_optimal_q() {
        let mdp = make_random_mdp(5, 3, 2, 9, 0.75).unwrap();
        let opt = optimal_q(&mdp, &DVector::from_element(5, 3.0)).unwrap();
        for q in opt.q.iter() {
            assert!((q - 12.0).abs() < 1e-8);
        }
    }

    #[test]
    fn chain2_optimal_q() {
        let mdp = chain2(0.5).unwrap();
        let opt = optimal_q(&mdp, &indicator(2, 1)).unwrap();
        assert!((opt.q[(0, 0)] - 2.0).abs() < 1e-9 && (opt.q[(1, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn chain2_rollouts() {
        let mdp = chain2(0.5).unwrap();
        let r = indicator(2, 1);
        let roll = rollout_seeded(&mdp, |_, _| 0, Start::Initial, 3, &r, 1).unwrap();
        assert_eq!(roll.rewards, vec![1.0, 1.0, 1.0]);
        assert_eq!(roll.states, vec![0, 1, 1, 1]);
        assert_eq!(roll.start_state, 0);
        let one = rollout_seeded(&mdp, |_, _| 0, Start::State(1), 1, &r, 1).unwrap();
        assert_eq!((one.actions.len(), one.rewards.len(), one.states.len()), (1, 1, 2));
        assert!(rollout_seeded(&mdp, |_, _| 0, Start::State(2), 1, &r, 1).is_err());
        assert!(rollout_seeded(&mdp, |_, _| 0, Start::Initial, 0, &r, 1).is_err());
    }

    #[test]
    fn rollouts_repeat_under_a_seed() {
        let mdp = make_random_mdp(8, 3, 4, 3, 0.9).unwrap();
        let pi = PolicyTable::uniform(8, 3);
        let r = DVector::from_fn(8, |i, _| i as f64);
        let a = rollout_seeded(&mdp, |s, g| pi.sample(s, g), Start::Initial, 50, &r, 77).unwrap();
        let b = rollout_seeded(&mdp, |s, g| pi.sample(s, g), Start::Initial, 50, &r, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discounted_return_examples() {
        let mk = |rewards: Vec<f64>| Rollout { states: vec![0; rewards.len() + 1], actions: vec![0; rewards.len()], rewards, start_state: 0 };
        assert_eq!(discounted_return(&mk(vec![1.0, 1.0, 1.0]), 0.5), 1.75);
        assert_eq!(discounted_return(&mk(vec![]), 0.5), 0.0);
        assert_eq!(discounted_return(&mk(vec![2.0]), 0.9), 2.0);
    }

    #[test]
    fn exact_return_agrees_with_q() {
        let mdp = make_random_mdp(7, 2, 3, 12, 0.9).unwrap();
        let pi = PolicyTable::uniform(7, 2);
        let r = DVector::from_fn(7, |i, _| (i as f64).cos());
        let q = q_of_policy(&mdp, &pi, &r).unwrap();
        let v = state_values(&mdp, &pi, &r).unwrap();
        for s in 0..7 {
            assert!((v[s] - 0.5 * (q[(s, 0)] + q[(s, 1)])).abs() < 1e-10);
        }
    }
}
