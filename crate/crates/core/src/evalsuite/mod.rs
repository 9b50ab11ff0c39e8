//! Evaluation: NLPID, Monte-Carlo KL to reference interventional
//! distributions, curve experiments, and CSV reports.

mod report;
#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, quantile, read_report, Aggregate, EvalReport, ReportRow, AGGREGATE_FILE, REPORT_FILE};

use crate::bcm::{
    make_task, task_seed, CausalModel, Dag, Family, GeneratorConfig, GeneratorMetadata, Intervention,
    InterventionValues, LinearGaussianScm, TaskBundle,
};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::oracle::{
    ident_posterior_interventional, linear_scm_do, mc_kl, nonident_posterior_interventional, suff_stats, Direction,
    GaussianMixture, IdentPriors, KlEstimate, LogDensity, NonIdentPriors, Sampler, StudentTMixture,
};

/// Context rows appended in the `nonident+m_int` arm.
pub const M_INT_ARM: usize = 5;

/// Interventional predictive distribution for one query.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictive {
    Gaussian(GaussianMixture),
    StudentT(StudentTMixture),
}

impl Predictive {
    pub fn mean(&self) -> f64 {
        match self {
            Predictive::Gaussian(m) => m.mean(),
            Predictive::StudentT(m) => m.weights.iter().zip(&m.locs).map(|(w, l)| w * l).sum(),
        }
    }
}

impl LogDensity for Predictive {
    fn log_pdf(&self, y: f64) -> f64 {
        match self {
            Predictive::Gaussian(m) => m.log_pdf(y),
            Predictive::StudentT(m) => m.log_pdf(y),
        }
    }
}

impl Sampler for Predictive {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Predictive::Gaussian(m) => m.sample(rng),
            Predictive::StudentT(m) => m.sample(rng),
        }
    }
}

/// Anything that maps a task's context and intervention values to
/// predictive distributions for the outcome node.
pub trait Predictor: Sync {
    fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>>;
}

impl Predictor for Model {
    fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        Ok(self
            .predict_at(bundle, xs)?
            .mixtures()?
            .into_iter()
            .map(Predictive::Gaussian)
            .collect())
    }
}

/// Closed-form posterior interventional distribution of a two-node BCM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BcmPrior {
    Ident(IdentPriors),
    Nonident(NonIdentPriors),
}

impl BcmPrior {
    pub fn from_family(family: &Family) -> Result<Self> {
        match *family {
            Family::TwoNodeIdent { sigma, sigma_w } => Ok(BcmPrior::Ident(IdentPriors { sigma, sigma_w })),
            Family::TwoNodeNonident { alpha, beta, eta } => Ok(BcmPrior::Nonident(NonIdentPriors { alpha, beta, eta })),
            _ => Err(Error::Config(format!("no closed-form posterior for family {}", family.name()))),
        }
    }
}

impl Predictor for BcmPrior {
    fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        if bundle.num_nodes() != 2 {
            return Err(Error::Invalid("the posterior oracle needs two-node data".into()));
        }
        if bundle.m_int() > 0 {
            return Err(Error::Invalid("the posterior oracle conditions on observational rows only".into()));
        }
        if bundle.standardizer.is_some() {
            return Err(Error::Invalid("the posterior oracle needs raw-scale data".into()));
        }
        let st = suff_stats(&bundle.obs)?;
        let direction = Direction::from_int_node(bundle.int_node)?;
        xs.iter()
            .map(|&x| {
                Ok(match self {
                    BcmPrior::Ident(p) => Predictive::Gaussian(ident_posterior_interventional(&st, p, direction, x)?),
                    BcmPrior::Nonident(p) => {
                        Predictive::StudentT(nonident_posterior_interventional(&st, p, direction, x)?)
                    }
                })
            })
            .collect()
    }
}

/// `p(x_i | do(x_j))` under the linear SCM that generated the bundle.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrueMechanism;

impl TrueMechanism {
    fn scm(bundle: &TaskBundle) -> Result<&LinearGaussianScm> {
        if bundle.standardizer.is_some() {
            return Err(Error::Invalid("the true-mechanism reference needs raw-scale data".into()));
        }
        bundle
            .metadata
            .as_ref()
            .and_then(|m| m.scm.as_ref())
            .filter(|s| s.num_nodes() == bundle.num_nodes())
            .ok_or_else(|| Error::Invalid("bundle carries no linear SCM for its nodes".into()))
    }
}

impl Predictor for TrueMechanism {
    fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        let scm = Self::scm(bundle)?;
        xs.iter()
            .map(|&x| {
                let g = linear_scm_do(scm, bundle.int_node, x, bundle.outcome_node)?;
                Ok(Predictive::Gaussian(GaussianMixture::single(g)))
            })
            .collect()
    }
}

/// Which reference distribution a KL is measured against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    PosteriorBcm(BcmPrior),
    TrueMechanism,
}

impl Reference {
    pub fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        match self {
            Reference::PosteriorBcm(p) => p.predictive(bundle, xs),
            Reference::TrueMechanism => TrueMechanism.predictive(bundle, xs),
        }
    }
}

/// Negative summed log predictive density of the bundle's true outcomes.
pub fn nlpid<P: Predictor + ?Sized>(model: &P, bundle: &TaskBundle) -> Result<f64> {
    let preds = model.predictive(bundle, &bundle.int_values)?;
    let mut total = 0.0;
    let mut bad = Vec::new();
    for (n, (p, y)) in preds.iter().zip(bundle.outcomes()).enumerate() {
        let l = p.log_pdf(y);
        if l.is_finite() {
            total -= l;
        } else {
            bad.push(n);
        }
    }
    if !bad.is_empty() {
        return Err(Error::NonFinite(format!("predictive log-density at queries {bad:?}")));
    }
    Ok(total)
}

/// Query-averaged `KL(reference ‖ model)`; one MC estimate of `samples` draws per query.
pub fn mean_kl(reference: &[Predictive], model: &[Predictive], samples: usize, seed: u64) -> Result<KlEstimate> {
    if reference.len() != model.len() || reference.is_empty() {
        return Err(Error::Invalid("KL needs matching, non-empty query lists".into()));
    }
    let q = reference.len() as f64;
    let mut value = 0.0;
    let mut var = 0.0;
    for (k, (p, m)) in reference.iter().zip(model).enumerate() {
        let est = mc_kl(p, m, samples, task_seed(seed, k as u64))?;
        value += est.value;
        var += est.sem * est.sem;
    }
    Ok(KlEstimate {
        value: value / q,
        sem: var.sqrt() / q,
    })
}

/// `KL(reference ‖ model)` averaged over the intervention values `xs`.
pub fn kl_to_reference<P: Predictor + ?Sized>(
    model: &P,
    bundle: &TaskBundle,
    reference: &Reference,
    xs: &[f64],
    samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    let r = reference.predictive(bundle, xs)?;
    let m = model.predictive(bundle, xs)?;
    mean_kl(&r, &m, samples, seed)
}

/// Intervention values `x ~ N(0, 1)`.
pub fn query_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub n_obs_grid: Vec<usize>,
    /// Observational rows per NLPID test task.
    pub nlpid_n_obs: usize,
    /// Interventional queries per NLPID test task.
    pub nlpid_n_int: usize,
    pub datasets: usize,
    pub seed: u64,
    /// MC samples per KL estimate.
    pub kl_samples: usize,
    /// Intervention values averaged over in each KL.
    pub kl_queries: usize,
    /// Grid size on [-2, 2] for mean-slope estimates.
    pub slope_points: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_obs_grid: vec![50, 200, 500],
            nlpid_n_obs: 500,
            nlpid_n_int: 500,
            datasets: 50,
            seed: 0,
            kl_samples: 1000,
            kl_queries: 10,
            slope_points: 21,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_obs_grid.is_empty() || self.n_obs_grid.contains(&0) {
            return Err(Error::Config("n_obs_grid must be non-empty and positive".into()));
        }
        if [self.nlpid_n_obs, self.nlpid_n_int, self.datasets, self.kl_queries].contains(&0)
            || self.kl_samples < 2
            || self.slope_points < 2
        {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        Ok(())
    }

    fn slope_grid(&self) -> Vec<f64> {
        let n = self.slope_points;
        (0..n).map(|k| -2.0 + 4.0 * k as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    #[serde(rename = "ident")]
    Ident,
    #[serde(rename = "nonident")]
    Nonident,
    #[serde(rename = "nonident+m_int")]
    NonidentMint,
    #[serde(rename = "confounder")]
    Confounder,
    #[serde(rename = "mediator")]
    Mediator,
    #[serde(rename = "hidden_confounder")]
    HiddenConfounder,
}

impl CurveKind {
    pub const ALL: [CurveKind; 6] = [
        CurveKind::Ident,
        CurveKind::Nonident,
        CurveKind::NonidentMint,
        CurveKind::Confounder,
        CurveKind::Mediator,
        CurveKind::HiddenConfounder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Ident => "ident",
            CurveKind::Nonident => "nonident",
            CurveKind::NonidentMint => "nonident+m_int",
            CurveKind::Confounder => "confounder",
            CurveKind::Mediator => "mediator",
            CurveKind::HiddenConfounder => "hidden_confounder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind `{s}`")))
    }

    /// Checks that a model trained on `trained` suits this experiment.
    fn check_generator(self, trained: &GeneratorConfig) -> Result<()> {
        let ok = match (&trained.family, self) {
            (Family::TwoNodeIdent { .. }, CurveKind::Ident) => trained.hidden_nodes == 0,
            (Family::TwoNodeNonident { .. }, CurveKind::Nonident | CurveKind::NonidentMint) => true,
            (Family::LinearFull { nodes: 3, .. }, CurveKind::Confounder | CurveKind::Mediator) => trained.hidden_nodes == 0,
            (Family::LinearFull { nodes: 3, .. }, CurveKind::HiddenConfounder) => trained.hidden_nodes == 1,
            _ => false,
        };
        if !ok || trained.standardizes() {
            return Err(Error::Config(format!(
                "a model trained on {} tasks (hidden_nodes = {}, standardized = {}) does not match the {} experiment",
                trained.family.name(),
                trained.hidden_nodes,
                trained.standardizes(),
                self.name()
            )));
        }
        Ok(())
    }
}

/// Three-node linear task with fixed structure: X = node 0 (intervened),
/// Y = node 1 (outcome), Z = node 2. The confounder graph is Z→X, Z→Y, X→Y;
/// the mediator graph is X→Z, Z→Y, X→Y. Weights follow the `LinearFull` family.
pub fn adjustment_task(kind: CurveKind, family: &Family, n_obs: usize, n_int: usize, seed: u64) -> Result<TaskBundle> {
    let Family::LinearFull {
        weight_min,
        weight_max,
        noise_std,
        ..
    } = *family
    else {
        return Err(Error::Config("adjustment tasks need a linear_full family".into()));
    };
    let edges: [(usize, usize); 3] = match kind {
        CurveKind::Confounder | CurveKind::HiddenConfounder => [(2, 0), (2, 1), (0, 1)],
        CurveKind::Mediator => [(0, 2), (2, 1), (0, 1)],
        _ => return Err(Error::Invalid(format!("{} is not an adjustment experiment", kind.name()))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![vec![0.0; 3]; 3];
    for &(p, c) in &edges {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mag = if weight_max > weight_min {
            rng.random_range(weight_min..weight_max)
        } else {
            weight_min
        };
        weights[p][c] = sign * mag;
    }
    let dag = Dag::from_edges(3, &edges)?;
    let scm = LinearGaussianScm::new(dag, weights, vec![noise_std; 3])?;
    let model = CausalModel::from_linear(&scm);
    let values: Vec<f64> = (0..n_int).map(|_| rng.sample(StandardNormal)).collect();
    let sample = model.sample(
        n_obs,
        Some(Intervention {
            node: 0,
            values: InterventionValues::Raw(&values),
        }),
        &mut rng,
    )?;
    let bundle = TaskBundle {
        obs: sample.obs,
        int_node: 0,
        outcome_node: 1,
        int_values: values,
        int_full: sample.int,
        context: Tensor::zeros(&[0, 3]),
        metadata: Some(GeneratorMetadata {
            family: family.name().to_string(),
            dag: model.dag.clone(),
            mechanisms: model.mechanisms.iter().map(|m| m.kind()).collect(),
            scm: Some(scm),
            external: false,
            columns: None,
        }),
        seed,
        standardizer: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn row(dataset_id: usize, seed: u64, kind: &str, n_obs: usize, metric: &str, value: f64) -> ReportRow {
    ReportRow {
        dataset_id,
        seed,
        kind: kind.to_string(),
        n_obs,
        metric: metric.to_string(),
        value,
    }
}

/// KL curves (and, for adjustment kinds, mean slopes) over the protocol's
/// `N_obs` grid. `trained` is the generator the model was trained on; the
/// evaluation tasks share its family parameters.
pub fn run_curve_experiment(
    kind: CurveKind,
    model: &Model,
    trained: &GeneratorConfig,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    kind.check_generator(trained)?;
    let jobs: Vec<(usize, usize)> = protocol
        .n_obs_grid
        .iter()
        .flat_map(|&n| (0..protocol.datasets).map(move |d| (n, d)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(n_obs, d)| curve_rows(kind, model, trained, protocol, n_obs, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows: rows.into_iter().flatten().collect(),
    })
}

fn curve_rows(
    kind: CurveKind,
    model: &Model,
    trained: &GeneratorConfig,
    protocol: &EvalProtocol,
    n_obs: usize,
    dataset: usize,
) -> Result<Vec<ReportRow>> {
    let seed = task_seed(protocol.seed, dataset as u64);
    let kl_seed = task_seed(seed, n_obs as u64);
    let name = kind.name();
    let mut out = Vec::new();
    match kind {
        CurveKind::Ident | CurveKind::Nonident | CurveKind::NonidentMint => {
            let config = GeneratorConfig {
                family: trained.family.clone(),
                n_obs_min: n_obs,
                n_obs_max: n_obs,
                n_total: None,
                n_int: protocol.kl_queries,
                m_int: if kind == CurveKind::NonidentMint { M_INT_ARM } else { 0 },
                standardize: Some(false),
                hidden_nodes: 0,
            };
            let bundle = make_task(&config, seed)?;
            let xs = bundle.int_values.clone();
            let preds = model.predictive(&bundle, &xs)?;
            if kind != CurveKind::NonidentMint {
                let prior = BcmPrior::from_family(&trained.family)?;
                let kl = mean_kl(&prior.predictive(&bundle, &xs)?, &preds, protocol.kl_samples, kl_seed)?;
                out.push(row(dataset, seed, name, n_obs, "kl_bcm", kl.value));
                out.push(row(dataset, seed, name, n_obs, "kl_bcm_sem", kl.sem));
            }
            if kind != CurveKind::Ident {
                let kl = mean_kl(&TrueMechanism.predictive(&bundle, &xs)?, &preds, protocol.kl_samples, kl_seed)?;
                out.push(row(dataset, seed, name, n_obs, "kl_true", kl.value));
                out.push(row(dataset, seed, name, n_obs, "kl_true_sem", kl.sem));
            }
        }
        CurveKind::Confounder | CurveKind::Mediator | CurveKind::HiddenConfounder => {
            let full = adjustment_task(kind, &trained.family, n_obs, protocol.kl_queries, seed)?;
            let visible = if kind == CurveKind::HiddenConfounder {
                full.without_node(2)?
            } else {
                full.clone()
            };
            let xs = full.int_values.clone();
            let kl = mean_kl(
                &TrueMechanism.predictive(&full, &xs)?,
                &model.predictive(&visible, &xs)?,
                protocol.kl_samples,
                kl_seed,
            )?;
            out.push(row(dataset, seed, name, n_obs, "kl_true", kl.value));
            out.push(row(dataset, seed, name, n_obs, "kl_true_sem", kl.sem));
            let grid = protocol.slope_grid();
            let means: Vec<f64> = model.predictive(&visible, &grid)?.iter().map(Predictive::mean).collect();
            let slope = ols_slope(&grid, &means);
            let truth = TrueMechanism.predictive(&full, &[1.0])?[0].mean();
            out.push(row(dataset, seed, name, n_obs, "slope", slope));
            out.push(row(dataset, seed, name, n_obs, "slope_true", truth));
            out.push(row(dataset, seed, name, n_obs, "slope_rel_err", (slope - truth).abs() / truth.abs()));
        }
    }
    Ok(out)
}

/// NLPID of every bundle in a corpus; `kind` labels the rows.
pub fn nlpid_report<P: Predictor + ?Sized>(model: &P, corpus: &[TaskBundle], kind: &str) -> Result<EvalReport> {
    let rows = corpus
        .par_iter()
        .enumerate()
        .map(|(k, b)| Ok(row(k, b.seed, kind, b.n_obs(), "nlpid", nlpid(model, b)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

/// KL of a model to every applicable reference on each corpus bundle:
/// `kl_true` when the bundle carries its linear SCM, `kl_bcm` when a two-node
/// prior is given and the bundle is purely observational.
pub fn kl_report<P: Predictor + ?Sized>(
    model: &P,
    corpus: &[TaskBundle],
    prior: Option<BcmPrior>,
    kind: &str,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    let rows = corpus
        .par_iter()
        .enumerate()
        .map(|(k, b)| {
            let seed = task_seed(protocol.seed, k as u64);
            let xs = query_values(protocol.kl_queries, seed);
            let preds = model.predictive(b, &xs)?;
            let mut out = Vec::new();
            if TrueMechanism::scm(b).is_ok() {
                let kl = mean_kl(&TrueMechanism.predictive(b, &xs)?, &preds, protocol.kl_samples, seed)?;
                out.push(row(k, b.seed, kind, b.n_obs(), "kl_true", kl.value));
            }
            if let Some(p) = prior.filter(|_| b.num_nodes() == 2 && b.m_int() == 0 && b.standardizer.is_none()) {
                let kl = mean_kl(&p.predictive(b, &xs)?, &preds, protocol.kl_samples, seed)?;
                out.push(row(k, b.seed, kind, b.n_obs(), "kl_bcm", kl.value));
            }
            if out.is_empty() {
                return Err(Error::Invalid(format!("bundle {k} has no KL reference")));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows: rows.into_iter().flatten().collect(),
    })
}
