use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dag::{Dag, Density, GraphFamily, GraphPrior};
use super::mechanism::{mean_std, CausalModel, Intervention, InterventionValues, MechanismKind};
use super::scm::LinearGaussianScm;
use super::{sample_dag, sample_linear_scm};
use crate::diffengine::Tensor;
use crate::digest::json_digest;
use crate::error::{Error, Result};

/// Prior over causal models from which tasks are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Two nodes, uniform over {X2→X1, X1→X2, no edge}, `w ~ N(0, σ_w²)`, equal known noise `σ`.
    TwoNodeIdent { sigma: f64, sigma_w: f64 },
    /// Two nodes with inverse-gamma noise variances and a normal-inverse-gamma weight.
    TwoNodeNonident { alpha: f64, beta: f64, eta: f64 },
    /// Fully connected DAG over a random order; weights `±U[weight_min, weight_max]`, equal noise.
    LinearFull {
        nodes: usize,
        weight_min: f64,
        weight_max: f64,
        noise_std: f64,
    },
    /// Random graph with a nonlinear mechanism per node.
    Nonlinear {
        min_nodes: usize,
        max_nodes: usize,
        graph: GraphPrior,
        mechanisms: Vec<MechanismKind>,
    },
}

impl Default for Family {
    fn default() -> Self {
        Family::TwoNodeIdent { sigma: 1.0, sigma_w: 1.0 }
    }
}

impl Family {
    pub fn two_node_nonident() -> Self {
        Family::TwoNodeNonident {
            alpha: 3.0,
            beta: 0.5,
            eta: 1.0,
        }
    }

    pub fn three_node_linear() -> Self {
        Family::LinearFull {
            nodes: 3,
            weight_min: 0.5,
            weight_max: 1.5,
            noise_std: 1.0,
        }
    }

    pub fn three_node(kind: MechanismKind) -> Self {
        Family::Nonlinear {
            min_nodes: 3,
            max_nodes: 3,
            graph: GraphPrior::erdos_renyi(Density::ExpectedDegree(vec![1.0, 2.0, 3.0])),
            mechanisms: vec![kind],
        }
    }

    pub fn high_dim() -> Self {
        Family::Nonlinear {
            min_nodes: 5,
            max_nodes: 40,
            graph: GraphPrior {
                families: vec![GraphFamily::ErdosRenyi, GraphFamily::ScaleFree],
                density: Density::EdgesPerNodeRange { lo: 0.5, hi: 6.0 },
            },
            mechanisms: vec![MechanismKind::GpLatent, MechanismKind::NnLatent],
        }
    }

    pub fn min_nodes(&self) -> usize {
        match self {
            Family::TwoNodeIdent { .. } | Family::TwoNodeNonident { .. } => 2,
            Family::LinearFull { nodes, .. } => *nodes,
            Family::Nonlinear { min_nodes, .. } => *min_nodes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::TwoNodeIdent { .. } => "two_node_ident",
            Family::TwoNodeNonident { .. } => "two_node_nonident",
            Family::LinearFull { .. } => "linear_full",
            Family::Nonlinear { .. } => "nonlinear",
        }
    }

    /// Linear families keep raw scale so that closed-form oracles apply directly.
    pub fn standardizes_by_default(&self) -> bool {
        matches!(self, Family::Nonlinear { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            Family::TwoNodeIdent { sigma, sigma_w } => {
                if !(*sigma > 0.0 && *sigma_w > 0.0) {
                    return bad("two_node_ident needs sigma, sigma_w > 0");
                }
            }
            Family::TwoNodeNonident { alpha, beta, eta } => {
                if !(*alpha > 0.5 && *beta > 0.0 && *eta > 0.0) {
                    return bad("two_node_nonident needs alpha > 1/2 and beta, eta > 0");
                }
            }
            Family::LinearFull {
                nodes,
                weight_min,
                weight_max,
                noise_std,
            } => {
                if *nodes < 2 || !(0.0 <= *weight_min && weight_min <= weight_max) || !(*noise_std > 0.0) {
                    return bad("linear_full needs nodes ≥ 2, 0 ≤ weight_min ≤ weight_max, noise_std > 0");
                }
            }
            Family::Nonlinear {
                min_nodes,
                max_nodes,
                mechanisms,
                graph,
            } => {
                if *min_nodes < 2 || max_nodes < min_nodes {
                    return bad("nonlinear needs 2 ≤ min_nodes ≤ max_nodes");
                }
                if mechanisms.is_empty() || mechanisms.contains(&MechanismKind::LinearGaussian) {
                    return bad("nonlinear needs at least one nonlinear mechanism kind");
                }
                if graph.families.is_empty() {
                    return bad("graph prior lists no families");
                }
            }
        }
        Ok(())
    }

    /// Draws a causal model; returns it with the metadata recorded in bundles.
    pub fn sample_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(CausalModel, GeneratorMetadata)> {
        let (model, scm) = match self {
            Family::TwoNodeIdent { sigma, sigma_w } => {
                let dag = two_node_graph(rng.random_range(0..3));
                let scm = sample_linear_scm(&dag, *sigma_w, *sigma, rng)?;
                (CausalModel::from_linear(&scm), Some(scm))
            }
            Family::TwoNodeNonident { alpha, beta, eta } => {
                let g = rng.random_range(0..3);
                let ig = |shape: f64, rng: &mut R| 1.0 / Gamma::new(shape, 1.0 / beta).expect("valid").sample(rng);
                // Nodes are (X1, X2); the child of the edge gets IG(α, β), the other IG(α−½, β).
                let (t1, t2) = match g {
                    0 => (ig(*alpha, rng), ig(alpha - 0.5, rng)),
                    _ => (ig(alpha - 0.5, rng), ig(*alpha, rng)),
                };
                let mut weights = vec![vec![0.0; 2]; 2];
                match g {
                    0 => weights[1][0] = (eta * t1).sqrt() * rng.sample::<f64, _>(StandardNormal),
                    1 => weights[0][1] = (eta * t2).sqrt() * rng.sample::<f64, _>(StandardNormal),
                    _ => {}
                }
                let scm = LinearGaussianScm::new(two_node_graph(g), weights, vec![t1.sqrt(), t2.sqrt()])?;
                (CausalModel::from_linear(&scm), Some(scm))
            }
            Family::LinearFull {
                nodes,
                weight_min,
                weight_max,
                noise_std,
            } => {
                let mut order: Vec<usize> = (0..*nodes).collect();
                order.shuffle(rng);
                let mut weights = vec![vec![0.0; *nodes]; *nodes];
                let mut edges = Vec::new();
                for a in 0..*nodes {
                    for b in a + 1..*nodes {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let mag = if weight_max > weight_min {
                            rng.random_range(*weight_min..*weight_max)
                        } else {
                            *weight_min
                        };
                        weights[order[a]][order[b]] = sign * mag;
                        edges.push((order[a], order[b]));
                    }
                }
                let dag = Dag::from_edges(*nodes, &edges)?;
                let scm = LinearGaussianScm::new(dag, weights, vec![*noise_std; *nodes])?;
                (CausalModel::from_linear(&scm), Some(scm))
            }
            Family::Nonlinear {
                min_nodes,
                max_nodes,
                graph,
                mechanisms,
            } => {
                let d = rng.random_range(*min_nodes..=*max_nodes);
                let dag = sample_dag(graph, d, rng)?;
                (CausalModel::sample_mechanisms(dag, mechanisms, rng)?, None)
            }
        };
        let metadata = GeneratorMetadata {
            family: self.name().to_string(),
            dag: model.dag.clone(),
            mechanisms: model.mechanisms.iter().map(|m| m.kind()).collect(),
            scm,
            external: false,
            columns: None,
        };
        Ok((model, metadata))
    }
}

/// Graph index 0: X2→X1, 1: X1→X2, 2: no edge.
pub fn two_node_graph(index: usize) -> Dag {
    match index {
        0 => Dag::from_edges(2, &[(1, 0)]),
        1 => Dag::from_edges(2, &[(0, 1)]),
        _ => Dag::from_edges(2, &[]),
    }
    .expect("two-node graphs are acyclic")
}

/// Task-distribution settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub family: Family,
    pub n_obs_min: usize,
    pub n_obs_max: usize,
    /// When set, `N_int = n_total − N_obs`; otherwise `n_int` is used.
    pub n_total: Option<usize>,
    pub n_int: usize,
    /// Extra fully observed interventional rows given as context.
    pub m_int: usize,
    /// Overrides the family's standardization default.
    pub standardize: Option<bool>,
    /// Nodes other than `i` and `j` removed from every matrix after sampling,
    /// e.g. to train on tasks with an unobserved confounder.
    pub hidden_nodes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            family: Family::default(),
            n_obs_min: 50,
            n_obs_max: 750,
            n_total: Some(1000),
            n_int: 500,
            m_int: 0,
            standardize: None,
            hidden_nodes: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn standardizes(&self) -> bool {
        self.standardize.unwrap_or_else(|| self.family.standardizes_by_default())
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n_obs_min == 0 || self.n_obs_max < self.n_obs_min {
            return Err(Error::Config("need 1 ≤ n_obs_min ≤ n_obs_max".into()));
        }
        match self.n_total {
            Some(total) if total <= self.n_obs_max => {
                return Err(Error::Config(format!("n_total {total} leaves no interventional rows at N_obs = {}", self.n_obs_max)))
            }
            None if self.n_int == 0 => return Err(Error::Config("n_int must be positive".into())),
            _ => {}
        }
        if self.hidden_nodes + 2 > self.family.min_nodes() {
            return Err(Error::Config(format!(
                "cannot hide {} nodes when tasks may have only {}",
                self.hidden_nodes,
                self.family.min_nodes()
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Digest of the prior over causal models alone: family, hidden nodes and
    /// standardization, but not the sample-size settings. Tasks that share it
    /// are in-distribution for one another.
    pub fn prior_digest(&self) -> String {
        json_digest(&(&self.family, self.hidden_nodes, self.standardizes()))
    }

    /// Same distribution with a fixed observational count.
    pub fn with_n_obs(&self, n_obs: usize) -> Self {
        Self {
            n_obs_min: n_obs,
            n_obs_max: n_obs,
            ..self.clone()
        }
    }

    fn interventional_count(&self, n_obs: usize) -> usize {
        self.n_total.map_or(self.n_int, |t| t - n_obs)
    }
}

/// What produced a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetadata {
    pub family: String,
    pub dag: Dag,
    pub mechanisms: Vec<MechanismKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scm: Option<LinearGaussianScm>,
    /// True for imported data whose generating process is unknown.
    #[serde(default)]
    pub external: bool,
    /// Column names of imported tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
}

/// Per-node affine map `(x − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations of `obs` (`N × D`).
    pub fn fit(obs: &Tensor) -> Result<Self> {
        let (n, d) = dims(obs)?;
        let mut shift = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|r| obs.data()[r * d + c]).collect();
            let (mean, std) = mean_std(&col);
            if !(std > 1e-10) {
                return Err(Error::Numeric(format!("node {c} is (near-)constant in the observational data")));
            }
            shift.push(mean);
            scale.push(std);
        }
        Ok(Self { shift, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn forward_value(&self, node: usize, x: f64) -> f64 {
        (x - self.shift[node]) / self.scale[node]
    }

    pub fn inverse_value(&self, node: usize, z: f64) -> f64 {
        z * self.scale[node] + self.shift[node]
    }

    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        self.map(t, |s, c, x| s.forward_value(c, x))
    }

    pub fn inverse(&self, t: &Tensor) -> Result<Tensor> {
        self.map(t, |s, c, x| s.inverse_value(c, x))
    }

    /// Composes two maps: `other` first, then `self`.
    pub fn after(&self, other: &Standardizer) -> Standardizer {
        Standardizer {
            shift: (0..self.shift.len())
                .map(|c| other.shift[c] + other.scale[c] * self.shift[c])
                .collect(),
            scale: (0..self.scale.len()).map(|c| other.scale[c] * self.scale[c]).collect(),
        }
    }

    fn map(&self, t: &Tensor, f: impl Fn(&Self, usize, f64) -> f64) -> Result<Tensor> {
        let (_, d) = dims(t)?;
        if d != self.shift.len() {
            return Err(Error::shape("standardizer", t.shape(), &[self.shift.len()]));
        }
        let data = t.data().iter().enumerate().map(|(k, &x)| f(self, k % d, x)).collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}

pub(crate) fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::shape("expected a 2-D matrix", s, &[])),
    }
}

/// One generated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    /// Observational rows, `N_obs × D`.
    pub obs: Tensor,
    /// Intervened node `j`.
    pub int_node: usize,
    /// Outcome node `i`.
    pub outcome_node: usize,
    /// Intervention values `x_j`, one per query.
    pub int_values: Vec<f64>,
    /// All nodes under `do(x_j)`, `N_int × D`.
    pub int_full: Tensor,
    /// Fully observed interventional context rows, `M_int × D`.
    pub context: Tensor,
    pub metadata: Option<GeneratorMetadata>,
    pub seed: u64,
    /// Map that was applied to raw generated values, if any.
    pub standardizer: Option<Standardizer>,
}

impl TaskBundle {
    pub fn num_nodes(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn n_obs(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn n_int(&self) -> usize {
        self.int_values.len()
    }

    pub fn m_int(&self) -> usize {
        self.context.shape()[0]
    }

    /// True outcomes `x_i` for each query.
    pub fn outcomes(&self) -> Vec<f64> {
        let d = self.num_nodes();
        (0..self.n_int()).map(|r| self.int_full.data()[r * d + self.outcome_node]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_obs, d) = dims(&self.obs)?;
        let (n_int, d_int) = dims(&self.int_full)?;
        let (_, d_ctx) = dims(&self.context)?;
        if d < 2 || d_int != d || d_ctx != d {
            return Err(Error::Invalid("bundle matrices disagree on node count".into()));
        }
        if n_obs == 0 {
            return Err(Error::Invalid("bundle has no observational rows".into()));
        }
        if self.int_node >= d || self.outcome_node >= d || self.int_node == self.outcome_node {
            return Err(Error::Invalid(format!(
                "invalid roles i={} j={} for {d} nodes",
                self.outcome_node, self.int_node
            )));
        }
        if self.int_values.len() != n_int {
            return Err(Error::Invalid("int_values length differs from int_full rows".into()));
        }
        if (0..n_int).any(|r| self.int_full.data()[r * d + self.int_node].to_bits() != self.int_values[r].to_bits()) {
            return Err(Error::Invariant("int_full[:, j] differs from int_values".into()));
        }
        if !(self.obs.all_finite() && self.int_full.all_finite() && self.context.all_finite()) {
            return Err(Error::NonFinite("bundle data".into()));
        }
        Ok(())
    }

    /// Drops node `node` from every matrix (e.g. to hide a confounder).
    pub fn without_node(&self, node: usize) -> Result<TaskBundle> {
        let d = self.num_nodes();
        if node >= d || node == self.int_node || node == self.outcome_node {
            return Err(Error::Invalid(format!("cannot drop node {node}")));
        }
        let drop = |t: &Tensor| -> Result<Tensor> {
            let (n, _) = dims(t)?;
            let data = t
                .data()
                .iter()
                .enumerate()
                .filter(|(k, _)| k % d != node)
                .map(|(_, v)| *v)
                .collect();
            Tensor::new(vec![n, d - 1], data)
        };
        let shift = |k: usize| if k > node { k - 1 } else { k };
        Ok(TaskBundle {
            obs: drop(&self.obs)?,
            int_node: shift(self.int_node),
            outcome_node: shift(self.outcome_node),
            int_values: self.int_values.clone(),
            int_full: drop(&self.int_full)?,
            context: drop(&self.context)?,
            metadata: None,
            seed: self.seed,
            standardizer: self.standardizer.as_ref().map(|s| Standardizer {
                shift: s.shift.iter().enumerate().filter(|(k, _)| *k != node).map(|(_, v)| *v).collect(),
                scale: s.scale.iter().enumerate().filter(|(k, _)| *k != node).map(|(_, v)| *v).collect(),
            }),
        })
    }
}

/// Standardizes a bundle with statistics of its observational rows only.
pub fn standardize(bundle: &TaskBundle) -> Result<(TaskBundle, Standardizer)> {
    let st = Standardizer::fit(&bundle.obs)?;
    let j = bundle.int_node;
    let mut out = bundle.clone();
    out.obs = st.forward(&bundle.obs)?;
    out.int_full = st.forward(&bundle.int_full)?;
    out.context = st.forward(&bundle.context)?;
    out.int_values = bundle.int_values.iter().map(|&x| st.forward_value(j, x)).collect();
    out.standardizer = Some(match &bundle.standardizer {
        Some(prev) => st.after(prev),
        None => st.clone(),
    });
    Ok((out, st))
}

/// Independent per-task seed from a master seed and a task index (ChaCha stream).
pub fn task_seed(master_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Graph → mechanisms → observations → intervention → outcome choice →
/// standardization; a pure function of `(config, seed)`.
pub fn make_task(config: &GeneratorConfig, seed: u64) -> Result<TaskBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obs = rng.random_range(config.n_obs_min..=config.n_obs_max);
    let n_int = config.interventional_count(n_obs);
    let (model, metadata) = config.family.sample_model(&mut rng)?;
    let d = model.num_nodes();
    let j = rng.random_range(0..d);
    let i = {
        let k = rng.random_range(0..d - 1);
        if k >= j { k + 1 } else { k }
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let values: Vec<f64> = (0..n_int + config.m_int).map(|_| normal.sample(&mut rng)).collect();
    let standardize_data = config.standardizes();
    let sample = model.sample(
        n_obs,
        Some(Intervention {
            node: j,
            values: if standardize_data {
                InterventionValues::Standardized(&values)
            } else {
                InterventionValues::Raw(&values)
            },
        }),
        &mut rng,
    )?;
    let int_rows = sample.int.data();
    let int_full = Tensor::new(vec![n_int, d], int_rows[..n_int * d].to_vec())?;
    let context = Tensor::new(vec![config.m_int, d], int_rows[n_int * d..].to_vec())?;
    let raw = TaskBundle {
        obs: sample.obs,
        int_node: j,
        outcome_node: i,
        int_values: (0..n_int).map(|r| int_full.data()[r * d + j]).collect(),
        int_full,
        context,
        metadata: Some(metadata),
        seed,
        standardizer: None,
    };
    let mut bundle = if standardize_data { standardize(&raw)?.0 } else { raw };
    for _ in 0..config.hidden_nodes {
        let candidates: Vec<usize> = (0..bundle.num_nodes())
            .filter(|&k| k != bundle.int_node && k != bundle.outcome_node)
            .collect();
        let node = candidates[rng.random_range(0..candidates.len())];
        bundle = bundle.without_node(node)?;
    }
    bundle.validate()?;
    Ok(bundle)
}
