//! State features `φ`, the data distribution `ρ`, and the `L²(ρ)` projection
//! algebra used by reward inference.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{PolicyTable, Start, TabularMdp};
use crate::rng;

/// Default ridge added to the Gram matrix during reward regression.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Feature matrix `φ`, one row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(Error::InvalidArgument("feature map needs d >= 1 and at least one state".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("feature map has non-finite entries".into()));
        }
        Ok(Self { phi })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    /// `φ(s)` as a column vector.
    pub fn row(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }

    /// Linear reward `φ z`.
    pub fn reward(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.phi * z
    }

    /// Rows rescaled to unit ℓ2 norm; all-zero rows are left untouched.
    pub fn row_normalized(&self) -> Self {
        let mut phi = self.phi.clone();
        for mut row in phi.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self { phi }
    }
}

/// Probability vector `ρ` over states.
#[derive(Clone, Debug, PartialEq)]
pub struct DataDistribution {
    rho: DVector<f64>,
}

impl DataDistribution {
    pub fn new(rho: DVector<f64>) -> Result<Self> {
        if rho.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("ρ has a negative or non-finite entry".into()));
        }
        let sum = rho.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!("ρ sums to {sum}")));
        }
        Ok(Self { rho })
    }

    pub fn uniform(n_states: usize) -> Self {
        Self { rho: DVector::from_element(n_states, 1.0 / n_states as f64) }
    }

    /// Empirical state distribution of an exploratory dataset collected with
    /// the uniform random policy.
    pub fn exploratory(mdp: &TabularMdp, episodes: usize, horizon: usize, seed: u64) -> Result<Self> {
        if episodes == 0 || horizon == 0 {
            return Err(Error::InvalidArgument("exploratory dataset needs episodes and horizon >= 1".into()));
        }
        let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
        let zero = DVector::zeros(mdp.n_states());
        let mut counts = DVector::<f64>::zeros(mdp.n_states());
        for ep in 0..episodes {
            let mut rng = rng::derived(seed, &[ep as u64]);
            let roll = crate::mdp::rollout(mdp, |s, r| uniform.sample(s, r), Start::Initial, horizon, &zero, &mut rng)?;
            for &s in &roll.states {
                counts[s] += 1.0;
            }
        }
        let total = counts.sum();
        Self::new(counts / total)
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Stand-in feature constructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureKind {
    OneHotSubset { indices: Vec<usize> },
    RandomOrthonormal { d: usize, seed: u64 },
    LaplacianEigs { d: usize },
    GoalIndicators { goals: Vec<usize> },
}

fn indicator_columns(n: usize, indices: &[usize]) -> Result<DMatrix<f64>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("indicator features need at least one index".into()));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("state index {bad} out of range ({n} states)")));
    }
    let mut phi = DMatrix::zeros(n, indices.len());
    for (j, &i) in indices.iter().enumerate() {
        phi[(i, j)] = 1.0;
    }
    Ok(phi)
}

fn check_dim(d: usize, n: usize) -> Result<()> {
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!("feature dimension {d} must be in 1..={n}")));
    }
    Ok(())
}

/// Flip signs so that each column's largest-magnitude entry is positive.
fn canonical_signs(phi: &mut DMatrix<f64>) {
    for mut col in phi.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() + 1e-12 { x } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetrized random-walk Laplacian `I − (P_u + P_uᵀ)/2` of the uniform policy.
pub fn uniform_walk_laplacian(mdp: &TabularMdp) -> DMatrix<f64> {
    let n = mdp.n_states();
    let k = mdp.state_kernel(&PolicyTable::uniform(n, mdp.n_actions()));
    DMatrix::identity(n, n) - (&k + k.transpose()) * 0.5
}

pub fn make_features(mdp: &TabularMdp, kind: &FeatureKind) -> Result<FeatureMap> {
    let n = mdp.n_states();
    let phi = match kind {
        FeatureKind::OneHotSubset { indices } => indicator_columns(n, indices)?,
        FeatureKind::GoalIndicators { goals } => indicator_columns(n, goals)?,
        FeatureKind::RandomOrthonormal { d, seed } => {
            check_dim(*d, n)?;
            let mut rng = rng::seeded(*seed);
            let g = DMatrix::from_fn(n, *d, |_, _| StandardNormal.sample(&mut rng));
            let q = g.qr().q();
            let mut phi = q.columns(0, *d) * (n as f64).sqrt();
            canonical_signs(&mut phi);
            phi
        }
        FeatureKind::LaplacianEigs { d } => {
            check_dim(*d, n)?;
            let eig = SymmetricEigen::new(uniform_walk_laplacian(mdp));
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let mut phi = DMatrix::from_fn(n, *d, |s, j| eig.eigenvectors[(s, order[j])]);
            phi *= (n as f64).sqrt();
            canonical_signs(&mut phi);
            phi
        }
    };
    FeatureMap::new(phi)
}

fn check_pair(features: &FeatureMap, rho: &DataDistribution) -> Result<()> {
    if features.n_states() != rho.len() {
        return Err(Error::Dimension(format!(
            "features cover {} states, ρ covers {}",
            features.n_states(),
            rho.len()
        )));
    }
    Ok(())
}

/// `φᵀ D_ρ φ`.
pub fn gram(features: &FeatureMap, rho: &DataDistribution) -> Result<DMatrix<f64>> {
    check_pair(features, rho)?;
    let weighted = DMatrix::from_fn(features.n_states(), features.dim(), |s, j| rho.rho()[s] * features.phi()[(s, j)]);
    let g = features.phi().transpose() * weighted;
    // Exact symmetry keeps downstream Cholesky factorizations happy.
    Ok((&g + g.transpose()) * 0.5)
}

/// Result of regressing a reward onto the features.
#[derive(Clone, Debug)]
pub struct Projection {
    pub z_r: DVector<f64>,
    pub projected: DVector<f64>,
    pub residual: DVector<f64>,
}

/// `z_r = (φᵀD_ρφ + λI)^{-1} φᵀ D_ρ r`, with the projected reward `φ z_r` and
/// the residual `r − φ z_r`.
pub fn project_reward(
    features: &FeatureMap,
    rho: &DataDistribution,
    reward: &DVector<f64>,
    ridge: f64,
) -> Result<Projection> {
    check_pair(features, rho)?;
    if reward.len() != features.n_states() {
        return Err(Error::Dimension(format!(
            "reward has {} entries, features cover {} states",
            reward.len(),
            features.n_states()
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be a finite non-negative number")));
    }
    let d = features.dim();
    let mut g = gram(features, rho)?;
    for i in 0..d {
        g[(i, i)] += ridge;
    }
    let weighted_r = reward.component_mul(rho.rho());
    let b = features.phi().transpose() * weighted_r;
    let chol = g.cholesky().ok_or_else(|| {
        Error::Singular("feature Gram matrix is singular under ρ; use a positive ridge".into())
    })?;
    let z_r = chol.solve(&b);
    let projected = features.phi() * &z_r;
    let residual = reward - &projected;
    Ok(Projection { z_r, projected, residual })
}

/// Exact `L²(ρ)` orthogonal projector onto the span of `φ`'s columns,
/// `Π = φ (φᵀD_ρφ)^+ φᵀ D_ρ`, using a pseudo-inverse so rank-deficient
/// feature sets are allowed.
pub fn projector(features: &FeatureMap, rho: &DataDistribution) -> Result<DMatrix<f64>> {
    let g = gram(features, rho)?;
    let eig = SymmetricEigen::new(g);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = scale * 1e-12 * features.dim() as f64;
    let d = features.dim();
    let mut pinv = DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k];
        if lam > tol {
            let v = eig.eigenvectors.column(k);
            pinv += v * v.transpose() / lam;
        }
    }
    let n = features.n_states();
    let right = DMatrix::from_fn(d, n, |j, s| features.phi()[(s, j)] * rho.rho()[s]);
    Ok(features.phi() * pinv * right)
}

/// `E_ρ[φ(s) v(s)]`, the quantity that vanishes for ρ-orthogonal `v`.
pub fn rho_inner(features: &FeatureMap, rho: &DataDistribution, v: &DVector<f64>) -> DVector<f64> {
    features.phi().transpose() * v.component_mul(rho.rho())
}
