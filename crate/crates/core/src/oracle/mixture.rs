use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::diffengine::kernels::log_sum_exp;
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A univariate density that can be evaluated in log space.
pub trait LogDensity {
    fn log_pdf(&self, y: f64) -> f64;
}

/// A univariate distribution that can be sampled.
pub trait Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Invalid("mixture needs at least one component".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("mixture weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

impl LogDensity for Gaussian {
    fn log_pdf(&self, y: f64) -> f64 {
        let z = y - self.mean;
        -HALF_LN_2PI - 0.5 * self.var.ln() - 0.5 * z * z / self.var
    }
}

impl Sampler for Gaussian {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mean + self.std() * rng.sample::<f64, _>(StandardNormal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        if means.len() != weights.len() || stds.len() != weights.len() {
            return Err(Error::Invalid("mixture parameter lengths differ".into()));
        }
        if stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid("mixture needs finite means and positive scales".into()));
        }
        Ok(Self { weights, means, stds })
    }

    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![g.mean],
            stds: vec![g.std()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }
}

/// `log Σ_k w_k N(y | μ_k, σ_k²)`.
pub fn mog_logpdf(mix: &GaussianMixture, y: f64) -> f64 {
    let terms: Vec<f64> = (0..mix.len())
        .map(|k| {
            let z = (y - mix.means[k]) / mix.stds[k];
            mix.weights[k].ln() - HALF_LN_2PI - mix.stds[k].ln() - 0.5 * z * z
        })
        .collect();
    log_sum_exp(&terms)
}

impl LogDensity for GaussianMixture {
    fn log_pdf(&self, y: f64) -> f64 {
        mog_logpdf(self, y)
    }
}

impl Sampler for GaussianMixture {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = pick(&self.weights, rng);
        self.means[k] + self.stds[k] * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Mixture of shifted and scaled Student-t densities; each component carries
/// its own degrees of freedom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTMixture {
    pub dofs: Vec<f64>,
    pub weights: Vec<f64>,
    pub locs: Vec<f64>,
    pub scales: Vec<f64>,
}

impl StudentTMixture {
    pub fn new(dofs: Vec<f64>, weights: Vec<f64>, locs: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        let k = weights.len();
        if dofs.len() != k || locs.len() != k || scales.len() != k {
            return Err(Error::Invalid("mixture parameter lengths differ".into()));
        }
        if dofs.iter().any(|v| !(*v > 0.0)) || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid("Student-t mixture needs positive dof and scales".into()));
        }
        Ok(Self {
            dofs,
            weights,
            locs,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Log-density of a location-scale Student-t.
pub fn student_t_logpdf(dof: f64, loc: f64, scale: f64, y: f64) -> f64 {
    let z = (y - loc) / scale;
    libm::lgamma(0.5 * (dof + 1.0)) - libm::lgamma(0.5 * dof) - 0.5 * (dof * PI).ln() - scale.ln()
        - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p()
}

pub fn tmix_logpdf(mix: &StudentTMixture, y: f64) -> f64 {
    let terms: Vec<f64> = (0..mix.len())
        .map(|k| mix.weights[k].ln() + student_t_logpdf(mix.dofs[k], mix.locs[k], mix.scales[k], y))
        .collect();
    log_sum_exp(&terms)
}

impl LogDensity for StudentTMixture {
    fn log_pdf(&self, y: f64) -> f64 {
        tmix_logpdf(self, y)
    }
}

impl Sampler for StudentTMixture {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = pick(&self.weights, rng);
        let t = StudentT::new(self.dofs[k]).expect("positive dof").sample(rng);
        self.locs[k] + self.scales[k] * t
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub sem: f64,
}

/// `(1/n) Σ_s [log p(y_s) − log q(y_s)]` with `y_s ~ p`.
pub fn mc_kl<P, Q>(p: &P, q: &Q, n: usize, seed: u64) -> Result<KlEstimate>
where
    P: LogDensity + Sampler + ?Sized,
    Q: LogDensity + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mc_kl_with(p, q, n, &mut rng)
}

pub fn mc_kl_with<P, Q, R>(p: &P, q: &Q, n: usize, rng: &mut R) -> Result<KlEstimate>
where
    P: LogDensity + Sampler + ?Sized,
    Q: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    if n < 2 {
        return Err(Error::Invalid("mc_kl needs at least two samples".into()));
    }
    let mut terms = Vec::with_capacity(n);
    for _ in 0..n {
        let y = p.sample(rng);
        let lq = q.log_pdf(y);
        if lq == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!("support mismatch: q(y) = 0 at y = {y}")));
        }
        let term = p.log_pdf(y) - lq;
        if !term.is_finite() {
            return Err(Error::NonFinite(format!("log-density ratio at y = {y}")));
        }
        terms.push(term);
    }
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(KlEstimate {
        value: mean,
        sem: (var / n as f64).sqrt(),
    })
}
