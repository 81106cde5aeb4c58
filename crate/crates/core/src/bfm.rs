//! The behavioral foundation model: a codebook of latents on the `√d` sphere,
//! the exactly solved optimal policy and successor-feature table of each
//! entry, and a smooth universal successor feature `ψ(s, a, z)` obtained by
//! kernel interpolation over the codebook.
//!
//! For an arbitrary latent `z`:
//!
//! ```text
//! w_i(z)    = softmax_i(β_ψ · zᵀz_i / d)
//! ψ(s,a,z)  = Σ_i w_i(z) ψ_i(s,a)
//! π_z(a|s)  = softmax_a(β_π · ψ(s,a,z)ᵀ z)
//! ```
//!
//! Everything is differentiable in `z`; [`LatentPolicy`] exposes the
//! vector-Jacobian products needed by the latent actor updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{projector, DataDistribution, FeatureMap};
use crate::mdp::{self, PolicyTable, TabularMdp};
use crate::rng;
use crate::sphere;

pub const DEFAULT_INTERP_TEMPERATURE: f64 = 20.0;
pub const DEFAULT_POLICY_TEMPERATURE: f64 = 10.0;
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;

/// Latents on the `√d` sphere, stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    zs: DMatrix<f64>,
}

impl Codebook {
    pub fn new(zs: DMatrix<f64>) -> Result<Self> {
        if zs.nrows() == 0 || zs.ncols() == 0 {
            return Err(Error::InvalidArgument("codebook needs at least one latent of dimension >= 1".into()));
        }
        let r = sphere::radius(zs.ncols());
        for (i, row) in zs.row_iter().enumerate() {
            if (row.norm() - r).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("codebook entry {i} has norm {}, expected {r}", row.norm())));
            }
        }
        Ok(Self { zs })
    }

    /// `size` latents drawn uniformly on the sphere from a seeded stream.
    pub fn sample(size: usize, d: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("codebook size must be at least 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut zs = DMatrix::zeros(size, d);
        for i in 0..size {
            zs.set_row(i, &sphere::sample(&mut rng, d).transpose());
        }
        Self::new(zs)
    }

    pub fn len(&self) -> usize {
        self.zs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.zs.ncols()
    }

    pub fn get(&self, i: usize) -> DVector<f64> {
        self.zs.row(i).transpose()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.zs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Temperatures {
    /// `β_ψ`, sharpness of the codebook interpolation kernel.
    pub interp: f64,
    /// `β_π`, inverse temperature of the latent softmax policy.
    pub policy: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { interp: DEFAULT_INTERP_TEMPERATURE, policy: DEFAULT_POLICY_TEMPERATURE }
    }
}

/// Pre-trained model. Immutable once built.
#[derive(Clone, Debug)]
pub struct BfmModel {
    codebook: Codebook,
    psi_tables: Vec<DMatrix<f64>>,
    greedy_policies: Vec<Vec<usize>>,
    features: FeatureMap,
    rho: DataDistribution,
    temperatures: Temperatures,
    discount: f64,
    n_states: usize,
    n_actions: usize,
    // ψ packed as [(s·A + a)][i][j] so one (s, a) touches contiguous memory.
    packed: Vec<f64>,
}

/// Relative tolerance under which two action values count as tied.
const TIE_TOL: f64 = 1e-9;

fn tie_tolerance(q: &DMatrix<f64>) -> f64 {
    TIE_TOL * (1.0 + q.amax())
}

fn greedy_with_ties(q: &DMatrix<f64>) -> Vec<usize> {
    let tol = tie_tolerance(q);
    (0..q.nrows())
        .map(|s| {
            let best = q.row(s).max();
            (0..q.ncols()).find(|&a| q[(s, a)] >= best - tol).unwrap_or(0)
        })
        .collect()
}

/// Optimal deterministic policy for `reward`, refined by exact policy
/// iteration so it is greedy (lowest index on ties) for its own exact Q.
fn solve_skill(mdp: &TabularMdp, reward: &DVector<f64>) -> Result<Vec<usize>> {
    let mut actions = mdp::optimal_q(mdp, reward)?.actions;
    for _ in 0..100 {
        let pi = PolicyTable::deterministic(&actions, mdp.n_actions())?;
        let q = mdp::q_of_policy(mdp, &pi, reward)?;
        let improved = greedy_with_ties(&q);
        if improved == actions {
            return Ok(actions);
        }
        actions = improved;
    }
    Err(Error::Consistency("policy iteration did not stabilise".into()))
}

fn pack(psi_tables: &[DMatrix<f64>], n_sa: usize, d: usize) -> Vec<f64> {
    let k = psi_tables.len();
    let mut packed = vec![0.0; n_sa * k * d];
    for (i, t) in psi_tables.iter().enumerate() {
        for row in 0..n_sa {
            for j in 0..d {
                packed[(row * k + i) * d + j] = t[(row, j)];
            }
        }
    }
    packed
}

/// Pre-train a model: sample the codebook, solve each skill exactly and
/// tabulate its successor features `ψ_i = M^{π_i} φ`.
pub fn pretrain(
    mdp: &TabularMdp,
    features: &FeatureMap,
    rho: &DataDistribution,
    codebook_size: usize,
    seed: u64,
    temperatures: Temperatures,
) -> Result<BfmModel> {
    let codebook = Codebook::sample(codebook_size, features.dim(), seed)?;
    pretrain_with_codebook(mdp, features, rho, codebook, temperatures)
}

pub fn pretrain_with_codebook(
    mdp: &TabularMdp,
    features: &FeatureMap,
    rho: &DataDistribution,
    codebook: Codebook,
    temperatures: Temperatures,
) -> Result<BfmModel> {
    if features.n_states() != mdp.n_states() || rho.len() != mdp.n_states() {
        return Err(Error::Dimension("features, ρ and MDP disagree on the number of states".into()));
    }
    if codebook.dim() != features.dim() {
        return Err(Error::Dimension(format!(
            "codebook dimension {} differs from feature dimension {}",
            codebook.dim(),
            features.dim()
        )));
    }
    if !(temperatures.interp > 0.0 && temperatures.policy > 0.0) {
        return Err(Error::InvalidArgument("temperatures must be positive".into()));
    }
    let mut psi_tables = Vec::with_capacity(codebook.len());
    let mut greedy_policies = Vec::with_capacity(codebook.len());
    for i in 0..codebook.len() {
        let z = codebook.get(i);
        let reward = features.reward(&z);
        let actions = solve_skill(mdp, &reward)?;
        let pi = PolicyTable::deterministic(&actions, mdp.n_actions())?;
        let m = mdp::successor_measure(mdp, &pi)?;
        psi_tables.push(&m.m * features.phi());
        greedy_policies.push(actions);
    }
    let n_sa = mdp.n_states() * mdp.n_actions();
    let packed = pack(&psi_tables, n_sa, features.dim());
    let model = BfmModel {
        codebook,
        psi_tables,
        greedy_policies,
        features: features.clone(),
        rho: rho.clone(),
        temperatures,
        discount: mdp.discount(),
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        packed,
    };
    model.check_consistency()?;
    model.check_bellman(mdp)?;
    Ok(model)
}

impl BfmModel {
    /// Assemble a model from stored parts (used by the file loader). The
    /// pretrain-consistency invariant is re-validated.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        codebook: Codebook,
        psi_tables: Vec<DMatrix<f64>>,
        greedy_policies: Vec<Vec<usize>>,
        features: FeatureMap,
        rho: DataDistribution,
        temperatures: Temperatures,
        discount: f64,
        n_actions: usize,
    ) -> Result<Self> {
        let n_states = features.n_states();
        let d = features.dim();
        let n_sa = n_states * n_actions;
        if psi_tables.len() != codebook.len() || greedy_policies.len() != codebook.len() {
            return Err(Error::Format("codebook, ψ tables and policies differ in length".into()));
        }
        if codebook.dim() != d || rho.len() != n_states {
            return Err(Error::Format("codebook, features and ρ dimensions disagree".into()));
        }
        for (t, p) in psi_tables.iter().zip(&greedy_policies) {
            if t.nrows() != n_sa || t.ncols() != d || p.len() != n_states || p.iter().any(|&a| a >= n_actions) {
                return Err(Error::Format("ψ table or policy has the wrong shape".into()));
            }
        }
        let packed = pack(&psi_tables, n_sa, d);
        let model = Self {
            codebook,
            psi_tables,
            greedy_policies,
            features,
            rho,
            temperatures,
            discount,
            n_states,
            n_actions,
            packed,
        };
        model.check_consistency()?;
        Ok(model)
    }

    /// `argmax_a ψ_i(s,a)ᵀ z_i` must be the stored greedy action for every
    /// skill and state, ties resolved to the lowest index.
    pub fn check_consistency(&self) -> Result<()> {
        for i in 0..self.codebook.len() {
            let z = self.codebook.get(i);
            let q = mdp::unflatten(&(&self.psi_tables[i] * &z), self.n_states, self.n_actions);
            let tol = tie_tolerance(&q);
            for s in 0..self.n_states {
                let best = q.row(s).max();
                let chosen = self.greedy_policies[i][s];
                let lowest = (0..self.n_actions).find(|&a| q[(s, a)] >= best - tol).unwrap_or(0);
                if chosen != lowest {
                    return Err(Error::Consistency(format!(
                        "skill {i}, state {s}: stored action {chosen} but argmax of ψᵀz is {lowest}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `ψ_i = P φ + γ P Π_i ψ_i` for every skill, within 1e-8.
    fn check_bellman(&self, mdp: &TabularMdp) -> Result<()> {
        let pphi = mdp.transition() * self.features.phi();
        for (i, psi) in self.psi_tables.iter().enumerate() {
            let mut next = DMatrix::zeros(self.n_states, self.features.dim());
            for s in 0..self.n_states {
                let a = self.greedy_policies[i][s];
                next.set_row(s, &psi.row(s * self.n_actions + a));
            }
            let rhs = &pphi + mdp.transition() * next * self.discount;
            let err = (psi - rhs).amax();
            if err > 1e-8 * (1.0 + psi.amax()) {
                return Err(Error::Consistency(format!("skill {i}: ψ Bellman residual {err:e}")));
            }
        }
        Ok(())
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn psi_tables(&self) -> &[DMatrix<f64>] {
        &self.psi_tables
    }

    pub fn greedy_policies(&self) -> &[Vec<usize>] {
        &self.greedy_policies
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn rho(&self) -> &DataDistribution {
        &self.rho
    }

    pub fn temperatures(&self) -> Temperatures {
        self.temperatures
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Same skills served with different temperatures.
    pub fn with_temperatures(&self, temperatures: Temperatures) -> Result<Self> {
        if !(temperatures.interp > 0.0 && temperatures.policy > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        Ok(Self { temperatures, ..self.clone() })
    }

    pub fn skill_policy(&self, i: usize) -> PolicyTable {
        PolicyTable::deterministic(&self.greedy_policies[i], self.n_actions).expect("stored actions are in range")
    }

    /// Conditioned view of the model at latent `z`.
    pub fn at(&self, z: &DVector<f64>) -> LatentPolicy<'_> {
        LatentPolicy::new(self, z)
    }

    fn packed_block(&self, s: usize, a: usize) -> &[f64] {
        let k = self.codebook.len();
        let d = self.dim();
        let start = (s * self.n_actions + a) * k * d;
        &self.packed[start..start + k * d]
    }
}

/// Interpolated successor features `ψ(s, a, z)`.
pub fn usf_query(model: &BfmModel, s: usize, a: usize, z: &DVector<f64>) -> DVector<f64> {
    model.at(z).psi(s, a)
}

/// Jacobian `∂ψ(s,a,z)/∂z` (`d × d`, row `j` is the gradient of `ψ_j`).
pub fn usf_jacobian(model: &BfmModel, s: usize, a: usize, z: &DVector<f64>) -> DMatrix<f64> {
    model.at(z).psi_jacobian(s, a)
}

/// `softmax_a(β_π ψ(s,a,z)ᵀ z)`.
pub fn latent_action_probs(model: &BfmModel, s: usize, z: &DVector<f64>) -> Vec<f64> {
    model.at(z).probs(s)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// A model conditioned on one latent: interpolation weights are computed once
/// and reused by every query.
pub struct LatentPolicy<'m> {
    model: &'m BfmModel,
    z: DVector<f64>,
    weights: Vec<f64>,
    // Σ_i w_i z_i
    zbar: DVector<f64>,
}

impl<'m> LatentPolicy<'m> {
    pub fn new(model: &'m BfmModel, z: &DVector<f64>) -> Self {
        let d = model.dim();
        assert_eq!(z.len(), d, "latent dimension mismatch");
        let beta = model.temperatures.interp / d as f64;
        let logits: Vec<f64> = model.codebook.zs.row_iter().map(|zi| beta * zi.transpose().dot(z)).collect();
        let weights = softmax(&logits);
        let zbar = model.codebook.zs.transpose() * DVector::from_column_slice(&weights);
        Self { model, z: z.clone(), weights, zbar }
    }

    pub fn model(&self) -> &'m BfmModel {
        self.model
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `ψ(s, a, z)`.
    pub fn psi(&self, s: usize, a: usize) -> DVector<f64> {
        let d = self.model.dim();
        let block = self.model.packed_block(s, a);
        let mut out = DVector::zeros(d);
        for (i, w) in self.weights.iter().enumerate() {
            let row = &block[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] += w * row[j];
            }
        }
        out
    }

    /// `ψ(s, a, z)ᵀ u`.
    pub fn psi_dot(&self, s: usize, a: usize, u: &DVector<f64>) -> f64 {
        let d = self.model.dim();
        let block = self.model.packed_block(s, a);
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let row = &block[i * d..(i + 1) * d];
            let dot: f64 = row.iter().zip(u.iter()).map(|(x, y)| x * y).sum();
            acc += w * dot;
        }
        acc
    }

    /// Vector-Jacobian product `(∂ψ(s,a,z)/∂z)ᵀ u`, accumulated into `out`
    /// with weight `scale`.
    pub fn add_psi_vjp(&self, s: usize, a: usize, u: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        let d = self.model.dim();
        let beta = self.model.temperatures.interp / d as f64;
        let block = self.model.packed_block(s, a);
        for (i, w) in self.weights.iter().enumerate() {
            let row = &block[i * d..(i + 1) * d];
            let dot: f64 = row.iter().zip(u.iter()).map(|(x, y)| x * y).sum();
            let c = scale * beta * w * dot;
            if c == 0.0 {
                continue;
            }
            let zi = self.model.codebook.zs.row(i);
            for j in 0..d {
                out[j] += c * (zi[j] - self.zbar[j]);
            }
        }
    }

    /// Full Jacobian `∂ψ(s,a,z)/∂z`, `(β_ψ/d) Σ_i w_i ψ_i (z_i − z̄)ᵀ`.
    pub fn psi_jacobian(&self, s: usize, a: usize) -> DMatrix<f64> {
        let d = self.model.dim();
        let beta = self.model.temperatures.interp / d as f64;
        let block = self.model.packed_block(s, a);
        let mut jac = DMatrix::zeros(d, d);
        for (i, w) in self.weights.iter().enumerate() {
            let psi_i = DVector::from_column_slice(&block[i * d..(i + 1) * d]);
            let dz = self.model.codebook.zs.row(i).transpose() - &self.zbar;
            jac += psi_i * dz.transpose() * (beta * w);
        }
        jac
    }

    /// Policy logits `β_π ψ(s,a,z)ᵀ z` for every action.
    pub fn logits(&self, s: usize) -> Vec<f64> {
        let beta = self.model.temperatures.policy;
        (0..self.model.n_actions).map(|a| beta * self.psi_dot(s, a, &self.z)).collect()
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        softmax(&self.logits(s))
    }

    /// `π_z` tabulated over all states.
    pub fn table(&self) -> PolicyTable {
        let n = self.model.n_states;
        let na = self.model.n_actions;
        let mut probs = DMatrix::zeros(n, na);
        for s in 0..n {
            for (a, p) in self.probs(s).into_iter().enumerate() {
                probs[(s, a)] = p;
            }
        }
        PolicyTable::new(probs).expect("softmax rows are distributions")
    }

    /// Gradient of the logit `β_π ψ(s,a,z)ᵀ z` with respect to `z`:
    /// `β_π (ψ(s,a,z) + (∂ψ/∂z)ᵀ z)`.
    pub fn logit_grad(&self, s: usize, a: usize) -> DVector<f64> {
        let beta = self.model.temperatures.policy;
        let mut g = self.psi(s, a);
        self.add_psi_vjp(s, a, &self.z, 1.0, &mut g);
        g * beta
    }
}

/// Forward-backward fit at the stationary point of the FB loss.
#[derive(Clone, Debug)]
pub struct FbFit {
    /// `F_i` as `(S·A) × d` tables, i.e. `F_iᵀ` in column-operator form.
    pub f_tables: Vec<DMatrix<f64>>,
    /// Backward embedding, `n_states × d`.
    pub b: DMatrix<f64>,
    pub ridge: f64,
    /// Largest entry of `F_iᵀ B D_ρ − M^{π_i} Π_B` over all skills.
    pub stationarity_residual: f64,
}

impl FbFit {
    /// `z_r = E_ρ[B(s) r(s)]`.
    pub fn infer(&self, rho: &DataDistribution, reward: &DVector<f64>) -> DVector<f64> {
        self.b.transpose() * reward.component_mul(rho.rho())
    }
}

/// `(G + λI)^{-1}` restricted to the range of `G`. Null directions of `G`
/// are directions `v` with `Bv = 0`, so they never reach `F`; they are
/// dropped rather than inverted at `1/λ`.
fn ridge_inverse(g: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(g.clone());
    let scale = eig.eigenvalues.amax();
    let tol = scale * 1e-12 * g.nrows() as f64;
    let mut inv = DMatrix::zeros(g.nrows(), g.ncols());
    for k in 0..g.nrows() {
        let lam = eig.eigenvalues[k];
        if lam > tol {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / (lam + ridge);
        } else if ridge == 0.0 {
            return Err(Error::Singular("B D_ρ Bᵀ is singular; use a full-rank B or a positive ridge".into()));
        }
    }
    Ok(inv)
}

/// Tolerance on the stationarity identity checked by [`fb_fit`].
pub const FB_STATIONARITY_TOL: f64 = 1e-8;

/// `F_iᵀ = M^{π_i} B (Bᵀ D_ρ B + λI)^{-1}` for every codebook skill. Fails if
/// the backward Gram matrix is singular, or if the stationarity identity
/// `F_iᵀ B D_ρ = M^{π_i} Π_B` is off by more than [`FB_STATIONARITY_TOL`]
/// (relative to `max |M^{π_i}|`).
pub fn fb_fit(model: &BfmModel, mdp: &TabularMdp, b: &DMatrix<f64>, ridge: f64) -> Result<FbFit> {
    let n = model.n_states();
    if b.nrows() != n || mdp.n_states() != n || mdp.n_actions() != model.n_actions() {
        return Err(Error::Dimension("B, model and MDP disagree on dimensions".into()));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be non-negative".into()));
    }
    let backward = FeatureMap::new(b.clone())?;
    let rho = model.rho();
    let g_inv = ridge_inverse(&crate::features::gram(&backward, rho)?, ridge)?;
    let pi_b = projector(&backward, rho)?;
    let bd = DMatrix::from_fn(b.ncols(), n, |j, s| b[(s, j)] * rho.rho()[s]);
    let mut f_tables = Vec::with_capacity(model.codebook().len());
    let mut worst = 0.0f64;
    for i in 0..model.codebook().len() {
        let m = mdp::successor_measure(mdp, &model.skill_policy(i))?.m;
        let f = &m * b * &g_inv;
        let err = (&f * &bd - &m * &pi_b).amax() / m.amax().max(1.0);
        worst = worst.max(err);
        f_tables.push(f);
    }
    if worst > FB_STATIONARITY_TOL {
        return Err(Error::Consistency(format!("FB stationarity identity off by {worst:e}")));
    }
    Ok(FbFit { f_tables, b: b.clone(), ridge, stationarity_residual: worst })
}
