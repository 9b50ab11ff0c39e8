use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dag::Dag;
use crate::error::{Error, Result};

/// Linear mechanisms `X_c = Σ_p W[p][c]·X_p + noise_std[c]·ε_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianScm {
    pub dag: Dag,
    pub weights: Vec<Vec<f64>>,
    pub noise_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl LinearGaussianScm {
    /// Checks that weights vanish off the graph and noise scales are positive.
    pub fn new(dag: Dag, weights: Vec<Vec<f64>>, noise_std: Vec<f64>) -> Result<Self> {
        let d = dag.num_nodes();
        if weights.len() != d || weights.iter().any(|r| r.len() != d) || noise_std.len() != d {
            return Err(Error::Invalid("SCM dimensions do not match the graph".into()));
        }
        for p in 0..d {
            for c in 0..d {
                if !dag.has_edge(p, c) && weights[p][c] != 0.0 {
                    return Err(Error::Invalid(format!("weight on non-edge {p}->{c}")));
                }
            }
        }
        if noise_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Invalid("noise scales must be finite and nonnegative".into()));
        }
        Ok(Self {
            dag,
            weights,
            noise_std,
            sigma_w: None,
            sigma: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.dag.num_nodes()
    }

    /// Analytic observational covariance `(I−W)^{-T} Σ (I−W)^{-1}`.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.num_nodes();
        let m = total_effects(&self.weights);
        let mut cov = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                cov[a][b] = (0..d)
                    .map(|k| m[k][a] * m[k][b] * self.noise_std[k] * self.noise_std[k])
                    .sum();
            }
        }
        cov
    }
}

/// `(I − W)^{-1}` for a DAG-supported weight matrix; entry `[k][i]` is the total
/// effect of node `k`'s noise on node `i`.
pub fn total_effects(weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = weights.len();
    let mut inv = nalgebra::DMatrix::<f64>::identity(d, d);
    for p in 0..d {
        for c in 0..d {
            inv[(p, c)] -= weights[p][c];
        }
    }
    let inv = inv.try_inverse().expect("I − W is unit-triangular up to permutation for a DAG");
    (0..d).map(|r| (0..d).map(|c| inv[(r, c)]).collect()).collect()
}

/// Edge weights i.i.d. `N(0, σ_w²)`, all noise scales `σ`.
pub fn sample_linear_scm<R: Rng + ?Sized>(dag: &Dag, sigma_w: f64, sigma: f64, rng: &mut R) -> Result<LinearGaussianScm> {
    if !(sigma_w > 0.0) || !(sigma > 0.0) {
        return Err(Error::Invalid("σ_w and σ must be positive".into()));
    }
    let d = dag.num_nodes();
    let normal = Normal::new(0.0, sigma_w).expect("positive scale");
    let mut weights = vec![vec![0.0; d]; d];
    for (p, c) in dag.edges() {
        weights[p][c] = normal.sample(rng);
    }
    let mut scm = LinearGaussianScm::new(dag.clone(), weights, vec![sigma; d])?;
    scm.sigma_w = Some(sigma_w);
    scm.sigma = Some(sigma);
    Ok(scm)
}
