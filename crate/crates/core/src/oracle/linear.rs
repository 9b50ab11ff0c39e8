use super::mixture::Gaussian;
use crate::bcm::{total_effects, LinearGaussianScm};
use crate::error::{Error, Result};

/// `p(X_i | do(X_j = x))` in a linear-Gaussian SCM: cut the edges into `j`,
/// then propagate `x` and the remaining noises through `(I − W̃)^{-1}`.
pub fn linear_scm_do(scm: &LinearGaussianScm, j: usize, x: f64, i: usize) -> Result<Gaussian> {
    let d = scm.num_nodes();
    if i >= d || j >= d || i == j {
        return Err(Error::Invalid(format!("invalid query i={i}, j={j} for {d} nodes")));
    }
    let mut cut = scm.weights.clone();
    for row in cut.iter_mut() {
        row[j] = 0.0;
    }
    let m = total_effects(&cut);
    let mean = m[j][i] * x;
    let var = (0..d)
        .filter(|&k| k != j)
        .map(|k| m[k][i] * m[k][i] * scm.noise_std[k] * scm.noise_std[k])
        .sum();
    Ok(Gaussian { mean, var })
}
