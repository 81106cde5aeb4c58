//! Helpers for latents living on the sphere of radius `√d`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn radius(d: usize) -> f64 {
    (d as f64).sqrt()
}

/// Rescale `v` to norm `√d`. Returns `None` for the zero vector.
pub fn normalize(v: &DVector<f64>) -> Option<DVector<f64>> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v * (radius(v.len()) / n))
}

/// Remove the radial component of `g` at the sphere point `z`.
pub fn tangent(z: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let zz = z.norm_squared();
    if zz == 0.0 {
        return g.clone();
    }
    g - z * (z.dot(g) / zz)
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let den = a.norm() * b.norm();
    if den == 0.0 {
        0.0
    } else {
        a.dot(b) / den
    }
}

/// Uniform draw on the `√d` sphere via a normalized Gaussian.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(z) = normalize(&g) {
            return z;
        }
    }
}
