//! Gridworlds, seeded random MDPs, the canonical benchmark environments and
//! task-suite construction.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::bfm::Codebook;
use crate::error::{Error, Result};
use crate::features::{projector, DataDistribution, FeatureMap};
use crate::mdp::{self, TabularMdp};
use crate::rng;
use crate::sphere;
use crate::zeroshot::RewardTask;

/// Grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// Action order of every gridworld.
pub const NORTH: usize = 0;
pub const EAST: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: BTreeSet<Cell>,
    #[serde(default)]
    pub slip_prob: f64,
    #[serde(default)]
    pub goal_cells: Vec<Cell>,
    pub start_cells: Vec<Cell>,
}

/// A gridworld MDP together with its cell ↔ state bookkeeping.
#[derive(Clone, Debug)]
pub struct Gridworld {
    pub spec: GridSpec,
    pub mdp: TabularMdp,
    cells: Vec<Cell>,
    index: BTreeMap<Cell, usize>,
}

impl Gridworld {
    pub fn state(&self, cell: Cell) -> Option<usize> {
        self.index.get(&cell).copied()
    }

    pub fn cell(&self, state: usize) -> Cell {
        self.cells[state]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }
}

fn step(spec: &GridSpec, (r, c): Cell, dir: usize) -> Cell {
    let target = match dir {
        NORTH if r > 0 => (r - 1, c),
        EAST if c + 1 < spec.width => (r, c + 1),
        SOUTH if r + 1 < spec.height => (r + 1, c),
        WEST if c > 0 => (r, c - 1),
        _ => (r, c),
    };
    if spec.walls.contains(&target) {
        (r, c)
    } else {
        target
    }
}

/// Four actions (N, E, S, W). The intended move happens with probability
/// `1 − slip`, each perpendicular move with `slip / 2`; moves into walls or
/// off the grid leave the agent in place. Non-wall cells are indexed
/// row-major. `d0` is uniform over the start cells.
pub fn make_gridworld(spec: &GridSpec, discount: f64) -> Result<Gridworld> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidArgument("grid needs positive width and height".into()));
    }
    if !(0.0..1.0).contains(&spec.slip_prob) {
        return Err(Error::InvalidArgument(format!("slip probability {} outside [0, 1)", spec.slip_prob)));
    }
    let mut cells = Vec::new();
    let mut index = BTreeMap::new();
    for r in 0..spec.height {
        for c in 0..spec.width {
            if !spec.walls.contains(&(r, c)) {
                index.insert((r, c), cells.len());
                cells.push((r, c));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument("grid has no free cells".into()));
    }
    if spec.start_cells.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one start cell".into()));
    }
    for cell in spec.start_cells.iter().chain(&spec.goal_cells) {
        if !index.contains_key(cell) {
            return Err(Error::InvalidArgument(format!("cell {cell:?} is a wall or off the grid")));
        }
    }
    let n = cells.len();
    let mut p = DMatrix::zeros(n * 4, n);
    for (s, &cell) in cells.iter().enumerate() {
        for a in 0..4 {
            let row = s * 4 + a;
            let perp = [(a + 1) % 4, (a + 3) % 4];
            p[(row, index[&step(spec, cell, a)])] += 1.0 - spec.slip_prob;
            for d in perp {
                p[(row, index[&step(spec, cell, d)])] += spec.slip_prob / 2.0;
            }
        }
    }
    let mut d0 = DVector::zeros(n);
    let unique: BTreeSet<Cell> = spec.start_cells.iter().copied().collect();
    for cell in &unique {
        d0[index[cell]] = 1.0 / unique.len() as f64;
    }
    let mdp = TabularMdp::new(n, 4, p, d0, discount)?;
    Ok(Gridworld { spec: spec.clone(), mdp, cells, index })
}

/// Each `(s, a)` moves to `branching` distinct uniformly chosen states with
/// Dirichlet(1) weights. `d0` is uniform.
pub fn make_random_mdp(n_states: usize, n_actions: usize, branching: usize, seed: u64, discount: f64) -> Result<TabularMdp> {
    if branching == 0 || branching > n_states {
        return Err(Error::InvalidArgument(format!("branching {branching} must be in 1..={n_states}")));
    }
    let mut rng = rng::seeded(seed);
    let mut p = DMatrix::zeros(n_states * n_actions, n_states);
    for row in 0..n_states * n_actions {
        let targets = index::sample(&mut rng, n_states, branching);
        // Dirichlet(1, ..., 1) as normalized unit exponentials.
        let w: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        for (k, t) in targets.iter().enumerate() {
            let v = if k + 1 == branching { 1.0 - acc } else { w[k] / total };
            acc += v;
            p[(row, t)] = v.max(0.0);
        }
    }
    TabularMdp::new(n_states, n_actions, p, DVector::from_element(n_states, 1.0 / n_states as f64), discount)
}

/// Two states, one action: `s0 → s1 → s1 → …`, starting in `s0`.
pub fn chain2(discount: f64) -> Result<TabularMdp> {
    let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
    TabularMdp::new(2, 1, p, DVector::from_vec(vec![1.0, 0.0]), discount)
}

/// Three states, two actions: from `s0`, `a0` leads to the absorbing `s1` and
/// `a1` to the absorbing `s2`. Starts in `s0`.
pub fn two_action_fork(discount: f64) -> Result<TabularMdp> {
    #[rustfmt::skip]
    let p = DMatrix::from_row_slice(6, 3, &[
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 1.0, 0.0,
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 0.0, 1.0,
    ]);
    TabularMdp::new(3, 2, p, DVector::from_vec(vec![1.0, 0.0, 0.0]), discount)
}

pub const DEFAULT_HORIZON: usize = 60;

/// 11×11 four-room layout with slip 0.1.
pub fn fourrooms11_spec() -> GridSpec {
    let mut walls = BTreeSet::new();
    for r in 0..11 {
        if r != 2 && r != 9 {
            walls.insert((r, 5));
        }
    }
    for c in 0..5 {
        if c != 1 {
            walls.insert((5, c));
        }
    }
    for c in 6..11 {
        if c != 8 {
            walls.insert((6, c));
        }
    }
    let start_cells = (0..5).flat_map(|r| (0..5).map(move |c| (r, c))).collect();
    GridSpec { width: 11, height: 11, walls, slip_prob: 0.1, goal_cells: vec![], start_cells }
}

pub fn fourrooms11(discount: f64) -> Result<Gridworld> {
    make_gridworld(&fourrooms11_spec(), discount)
}

/// A single 20-cell corridor with slip 0.1.
pub fn corridor20_spec() -> GridSpec {
    GridSpec {
        width: 20,
        height: 1,
        walls: BTreeSet::new(),
        slip_prob: 0.1,
        goal_cells: vec![],
        start_cells: (0..20).map(|c| (0, c)).collect(),
    }
}

pub fn corridor20(discount: f64) -> Result<Gridworld> {
    make_gridworld(&corridor20_spec(), discount)
}

pub const RANDOM50_SEED: u64 = 50;

/// 50 states, 4 actions, branching 5.
pub fn random50(discount: f64) -> Result<TabularMdp> {
    make_random_mdp(50, 4, 5, RANDOM50_SEED, discount)
}

/// Ways of building a task reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `r = φ w` with `w` on the sphere: a seeded codebook entry when a
    /// codebook is supplied, a fresh seeded draw otherwise.
    OnSpan { seed: u64 },
    /// `r = 1{goal} − Π_φ 1{goal}`: zero projection onto the features.
    OffSpanGoal { goal: usize },
    /// `α r_on + (1 − α) c r_off`, with `c` rescaling the orthogonal part to
    /// the ρ-norm of the on-span part.
    Mixed { alpha: f64, seed: u64, goal: usize },
    Dense { reward: Vec<f64> },
    Goals { goals: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Map<String, serde_json::Value>")]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl TryFrom<serde_json::Map<String, serde_json::Value>> for TaskSpec {
    type Error = String;

    fn try_from(mut map: serde_json::Map<String, serde_json::Value>) -> std::result::Result<Self, String> {
        let name = match map.remove("name") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err("task name must be a string".into()),
            None => return Err("missing field `name`".into()),
        };
        let kind = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(Self { name, kind })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteTask {
    pub task: RewardTask,
    pub kind: TaskKind,
    pub on_span: bool,
    /// Exact optimal discounted return from `d0`.
    pub optimal_value: f64,
}

#[derive(Clone, Debug)]
pub struct TaskSuite {
    pub tasks: Vec<SuiteTask>,
}

/// Tolerance on `‖(I − Π_φ) r‖_∞` for a task to count as on-span.
pub const ON_SPAN_TOL: f64 = 1e-9;

fn rho_norm(v: &DVector<f64>, rho: &DataDistribution) -> f64 {
    v.component_mul(v).dot(rho.rho()).sqrt()
}

fn on_span_weight(d: usize, seed: u64, codebook: Option<&Codebook>) -> DVector<f64> {
    let mut rng = rng::seeded(seed);
    match codebook {
        Some(cb) => cb.get(rng.random_range(0..cb.len())),
        None => sphere::sample(&mut rng, d),
    }
}

fn check_goal(goal: usize, n: usize) -> Result<()> {
    if goal >= n {
        return Err(Error::InvalidArgument(format!("goal state {goal} out of range ({n} states)")));
    }
    Ok(())
}

/// Reward vector for one task kind.
pub fn task_reward(
    features: &FeatureMap,
    rho: &DataDistribution,
    kind: &TaskKind,
    codebook: Option<&Codebook>,
) -> Result<DVector<f64>> {
    let n = features.n_states();
    let off_span = |goal: usize| -> Result<DVector<f64>> {
        check_goal(goal, n)?;
        let mut e = DVector::zeros(n);
        e[goal] = 1.0;
        let pi = projector(features, rho)?;
        Ok(&e - pi * &e)
    };
    match kind {
        TaskKind::OnSpan { seed } => Ok(features.reward(&on_span_weight(features.dim(), *seed, codebook))),
        TaskKind::OffSpanGoal { goal } => off_span(*goal),
        TaskKind::Mixed { alpha, seed, goal } => {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::InvalidArgument(format!("mixing weight {alpha} outside [0, 1]")));
            }
            let on = features.reward(&on_span_weight(features.dim(), *seed, codebook));
            let off = off_span(*goal)?;
            let off_norm = rho_norm(&off, rho);
            let scale = if off_norm > 0.0 { rho_norm(&on, rho) / off_norm } else { 0.0 };
            Ok(on * *alpha + off * ((1.0 - alpha) * scale))
        }
        TaskKind::Dense { reward } => {
            if reward.len() != n {
                return Err(Error::Dimension(format!("dense reward has {} entries, expected {n}", reward.len())));
            }
            Ok(DVector::from_vec(reward.clone()))
        }
        TaskKind::Goals { goals } => {
            let mut r = DVector::zeros(n);
            for &g in goals {
                check_goal(g, n)?;
                r[g] = 1.0;
            }
            Ok(r)
        }
    }
}

pub fn make_task_suite(
    mdp: &TabularMdp,
    features: &FeatureMap,
    rho: &DataDistribution,
    specs: &[TaskSpec],
    codebook: Option<&Codebook>,
    horizon: usize,
    eval_episodes: usize,
) -> Result<TaskSuite> {
    if features.n_states() != mdp.n_states() {
        return Err(Error::Dimension("features were built for a different MDP".into()));
    }
    let pi = projector(features, rho)?;
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        let reward = task_reward(features, rho, &spec.kind, codebook)?;
        let residual = &reward - &pi * &reward;
        let on_span = residual.amax() <= ON_SPAN_TOL * (1.0 + reward.amax());
        let optimal_value = mdp::optimal_return(mdp, &reward)?;
        tasks.push(SuiteTask {
            task: RewardTask::new(spec.name.clone(), reward, horizon, eval_episodes)?,
            kind: spec.kind.clone(),
            on_span,
            optimal_value,
        });
    }
    Ok(TaskSuite { tasks })
}
