use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dag::Dag;
use super::scm::LinearGaussianScm;
use crate::diffengine::kernels::gelu;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    LinearGaussian,
    GpDraw,
    ResnetNn,
    GpLatent,
    NnLatent,
}

/// A concrete, sampled mechanism for one node.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeMechanism {
    /// `Σ_p w_p x_p + noise_std·ε`, weights in parent order.
    Linear { weights: Vec<f64>, noise_std: f64 },
    /// Function drawn from a zero-mean GP with squared-exponential kernel, plus noise.
    Gp {
        lengthscales: Vec<f64>,
        noise_var: f64,
        latent: bool,
    },
    /// Random network `w_out · gelu(h)`, `h` from an input projection and residual blocks.
    Net {
        input_dim: usize,
        hidden: usize,
        w_in: Vec<f64>,
        blocks: Vec<(Vec<f64>, Vec<f64>)>,
        w_out: Vec<f64>,
        noise_std: f64,
        latent: bool,
    },
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi).exp()
}

/// Gamma(shape, rate) draw.
fn gamma_rate<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng)
}

fn scaled_normals<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl NodeMechanism {
    /// Draws hyperparameters and weights for a node with `num_parents` parents.
    pub fn sample<R: Rng + ?Sized>(kind: MechanismKind, num_parents: usize, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            MechanismKind::LinearGaussian => {
                return Err(Error::Config(
                    "linear mechanisms come from a LinearGaussianScm, not per-node sampling".into(),
                ))
            }
            MechanismKind::GpDraw => NodeMechanism::Gp {
                lengthscales: (0..num_parents)
                    .map(|_| log_uniform(rng, -1.0, 1.0).clamp(0.1, 5.0))
                    .collect(),
                noise_var: gamma_rate(rng, 1.0, 5.0),
                latent: false,
            },
            MechanismKind::GpLatent => NodeMechanism::Gp {
                lengthscales: (0..num_parents + 1).map(|_| log_uniform(rng, -0.5, 1.0)).collect(),
                noise_var: gamma_rate(rng, 1.0, 5.0),
                latent: true,
            },
            MechanismKind::ResnetNn => {
                let num_blocks = rng.random_range(1..=8);
                let hidden = [32, 64, 128, 256][rng.random_range(0..4)];
                Self::sample_net(num_parents + 1, hidden, num_blocks, gamma_rate(rng, 1.0, 10.0), rng)
            }
            MechanismKind::NnLatent => Self::sample_net(num_parents + 1, 128, 0, gamma_rate(rng, 1.0, 10.0), rng),
        })
    }

    fn sample_net<R: Rng + ?Sized>(input_dim: usize, hidden: usize, num_blocks: usize, noise_var: f64, rng: &mut R) -> Self {
        let w_in = scaled_normals(rng, input_dim * hidden, input_dim);
        let blocks = (0..num_blocks)
            .map(|_| (scaled_normals(rng, hidden * hidden, hidden), scaled_normals(rng, hidden * hidden, hidden)))
            .collect();
        let w_out = scaled_normals(rng, hidden, hidden);
        NodeMechanism::Net {
            input_dim,
            hidden,
            w_in,
            blocks,
            w_out,
            noise_std: noise_var.sqrt(),
            latent: true,
        }
    }

    pub fn kind(&self) -> MechanismKind {
        match self {
            NodeMechanism::Linear { .. } => MechanismKind::LinearGaussian,
            NodeMechanism::Gp { latent: false, .. } => MechanismKind::GpDraw,
            NodeMechanism::Gp { latent: true, .. } => MechanismKind::GpLatent,
            NodeMechanism::Net { blocks, .. } if !blocks.is_empty() => MechanismKind::ResnetNn,
            NodeMechanism::Net { .. } => MechanismKind::NnLatent,
        }
    }

    fn uses_latent(&self) -> bool {
        matches!(
            self,
            NodeMechanism::Gp { latent: true, .. } | NodeMechanism::Net { latent: true, .. }
        )
    }

    /// Generates the node's values for rows whose parent values are `inputs`
    /// (row-major, `rows × num_parents`).
    fn generate<R: Rng + ?Sized>(&self, inputs: &[f64], rows: usize, num_parents: usize, rng: &mut R) -> Result<Vec<f64>> {
        let (inputs, width) = if self.uses_latent() {
            let mut with_latent = Vec::with_capacity(rows * (num_parents + 1));
            for r in 0..rows {
                with_latent.extend_from_slice(&inputs[r * num_parents..(r + 1) * num_parents]);
                with_latent.push(rng.sample::<f64, _>(StandardNormal));
            }
            (with_latent, num_parents + 1)
        } else {
            (inputs.to_vec(), num_parents)
        };
        match self {
            NodeMechanism::Linear { weights, noise_std } => Ok((0..rows)
                .map(|r| {
                    let mean: f64 = weights.iter().zip(&inputs[r * width..(r + 1) * width]).map(|(w, x)| w * x).sum();
                    mean + noise_std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()),
            NodeMechanism::Gp {
                lengthscales,
                noise_var,
                ..
            } => sample_gp(&inputs, rows, width, lengthscales, *noise_var, rng),
            NodeMechanism::Net {
                input_dim,
                hidden,
                w_in,
                blocks,
                w_out,
                noise_std,
                ..
            } => {
                debug_assert_eq!(*input_dim, width);
                let h = *hidden;
                let mut out = Vec::with_capacity(rows);
                let mut state = vec![0.0; h];
                let mut tmp = vec![0.0; h];
                for r in 0..rows {
                    let x = &inputs[r * width..(r + 1) * width];
                    for (k, s) in state.iter_mut().enumerate() {
                        *s = (0..width).map(|m| x[m] * w_in[m * h + k]).sum();
                    }
                    for (w1, w2) in blocks {
                        for k in 0..h {
                            tmp[k] = gelu((0..h).map(|m| state[m] * w1[m * h + k]).sum());
                        }
                        for k in 0..h {
                            state[k] += (0..h).map(|m| tmp[m] * w2[m * h + k]).sum::<f64>();
                        }
                    }
                    let y: f64 = state.iter().zip(w_out).map(|(s, w)| gelu(*s) * w).sum();
                    out.push(y + noise_std * rng.sample::<f64, _>(StandardNormal));
                }
                Ok(out)
            }
        }
    }
}

/// `exp(−Σ_p (a_p − b_p)² / λ_p)`.
pub fn se_kernel(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    let q: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| (x - y) * (x - y) / l)
        .sum();
    (-q).exp()
}

const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// One joint draw `N(0, K + σ²I)` over all rows.
fn sample_gp<R: Rng + ?Sized>(
    inputs: &[f64],
    rows: usize,
    width: usize,
    lengthscales: &[f64],
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let gram = DMatrix::from_fn(rows, rows, |a, b| {
        se_kernel(&inputs[a * width..(a + 1) * width], &inputs[b * width..(b + 1) * width], lengthscales)
    });
    let mut factor = None;
    for jitter in JITTERS {
        let mut k = gram.clone();
        for d in 0..rows {
            k[(d, d)] += noise_var + jitter;
        }
        if let Some(chol) = k.cholesky() {
            factor = Some(chol);
            break;
        }
    }
    let chol = factor.ok_or_else(|| {
        let diag: Vec<f64> = (0..rows).map(|d| gram[(d, d)] + noise_var).collect();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Error::Numeric(format!(
            "GP Gram matrix ({rows}×{rows}, diagonal range [{lo:.3e}, {hi:.3e}], noise variance {noise_var:.3e}) \
             not positive definite after jitter {:.0e}",
            JITTERS[JITTERS.len() - 1]
        ))
    })?;
    let z: Vec<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let l = chol.l();
    Ok((0..rows).map(|a| (0..=a).map(|b| l[(a, b)] * z[b]).sum()).collect())
}

/// How intervention values are given.
#[derive(Clone, Copy, Debug)]
pub enum InterventionValues<'a> {
    /// Used as-is.
    Raw(&'a [f64]),
    /// Expressed in units of the node's observational mean and standard deviation.
    Standardized(&'a [f64]),
}

#[derive(Clone, Copy, Debug)]
pub struct Intervention<'a> {
    pub node: usize,
    pub values: InterventionValues<'a>,
}

impl Intervention<'_> {
    fn len(&self) -> usize {
        match self.values {
            InterventionValues::Raw(v) | InterventionValues::Standardized(v) => v.len(),
        }
    }
}

/// Observational and interventional rows drawn from one realization of the mechanisms.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub obs: Tensor,
    pub int: Tensor,
}

/// A graph with one sampled mechanism per node.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalModel {
    pub dag: Dag,
    pub mechanisms: Vec<NodeMechanism>,
}

impl CausalModel {
    pub fn sample_mechanisms<R: Rng + ?Sized>(dag: Dag, kinds: &[MechanismKind], rng: &mut R) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("no mechanism kinds configured".into()));
        }
        let mechanisms = (0..dag.num_nodes())
            .map(|c| {
                let kind = kinds[rng.random_range(0..kinds.len())];
                NodeMechanism::sample(kind, dag.parents(c).len(), rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { dag, mechanisms })
    }

    pub fn from_linear(scm: &LinearGaussianScm) -> Self {
        let dag = scm.dag.clone();
        let mechanisms = (0..dag.num_nodes())
            .map(|c| NodeMechanism::Linear {
                weights: dag.parents(c).iter().map(|&p| scm.weights[p][c]).collect(),
                noise_std: scm.noise_std[c],
            })
            .collect();
        Self { dag, mechanisms }
    }

    pub fn num_nodes(&self) -> usize {
        self.dag.num_nodes()
    }

    /// Draws `n_obs` observational rows and, optionally, interventional rows
    /// under a hard intervention, sharing every mechanism (and every GP function
    /// draw) between the two.
    pub fn sample<R: Rng + ?Sized>(&self, n_obs: usize, intervention: Option<Intervention<'_>>, rng: &mut R) -> Result<JointSample> {
        let d = self.num_nodes();
        let n_int = intervention.map_or(0, |iv| iv.len());
        if let Some(iv) = intervention {
            if iv.node >= d {
                return Err(Error::Invalid(format!("intervention node {} out of range for {d} nodes", iv.node)));
            }
            let values = match iv.values {
                InterventionValues::Raw(v) | InterventionValues::Standardized(v) => v,
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("intervention values".into()));
            }
        }
        let total = n_obs + n_int;
        let mut data = vec![0.0; total * d];
        for node in self.dag.topological_order()? {
            let parents = self.dag.parents(node);
            let intervened = intervention.filter(|iv| iv.node == node);
            let rows = if intervened.is_some() { n_obs } else { total };
            let mut inputs = Vec::with_capacity(rows * parents.len());
            for r in 0..rows {
                inputs.extend(parents.iter().map(|&p| data[r * d + p]));
            }
            let values = self.mechanisms[node].generate(&inputs, rows, parents.len(), rng)?;
            for (r, v) in values.into_iter().enumerate() {
                data[r * d + node] = v;
            }
            if let Some(iv) = intervened {
                let forced: Vec<f64> = match iv.values {
                    InterventionValues::Raw(v) => v.to_vec(),
                    InterventionValues::Standardized(v) => {
                        let col: Vec<f64> = (0..n_obs).map(|r| data[r * d + node]).collect();
                        let (mean, std) = mean_std(&col);
                        if !(std > 1e-10) {
                            return Err(Error::Numeric(format!(
                                "node {node} is degenerate in the observational data; cannot place standardized interventions"
                            )));
                        }
                        v.iter().map(|x| mean + std * x).collect()
                    }
                };
                for (k, v) in forced.into_iter().enumerate() {
                    data[(n_obs + k) * d + node] = v;
                }
            }
        }
        let int = data.split_off(n_obs * d);
        Ok(JointSample {
            obs: Tensor::new(vec![n_obs, d], data)?,
            int: Tensor::new(vec![n_int, d], int)?,
        })
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn generate_observational<R: Rng + ?Sized>(model: &CausalModel, n: usize, rng: &mut R) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Invalid("observational sample count must be positive".into()));
    }
    Ok(model.sample(n, None, rng)?.obs)
}

/// Interventional rows under `do(X_j = values)`. For GP mechanisms this is a
/// fresh function draw; use [`CausalModel::sample`] to couple with observations.
pub fn generate_interventional<R: Rng + ?Sized>(model: &CausalModel, j: usize, values: &[f64], rng: &mut R) -> Result<Tensor> {
    Ok(model
        .sample(
            0,
            Some(Intervention {
                node: j,
                values: InterventionValues::Raw(values),
            }),
            rng,
        )?
        .int)
}
