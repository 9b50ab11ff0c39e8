use serde::{Deserialize, Serialize};

use super::mixture::{GaussianMixture, StudentTMixture};
use crate::diffengine::kernels::log_sum_exp;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Sums of squares and cross-products of two-node data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub s1: f64,
    pub s2: f64,
    pub s12: f64,
    pub n: usize,
}

impl SufficientStats {
    pub fn from_rows(rows: &[[f64; 2]]) -> Result<Self> {
        let mut st = SufficientStats::default();
        for (r, [x1, x2]) in rows.iter().enumerate() {
            if !(x1.is_finite() && x2.is_finite()) {
                return Err(Error::NonFinite(format!("data row {r}")));
            }
            st.s1 += x1 * x1;
            st.s2 += x2 * x2;
            st.s12 += x1 * x2;
        }
        st.n = rows.len();
        Ok(st)
    }

    /// Statistics of the data with its two columns exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            s1: self.s2,
            s2: self.s1,
            ..*self
        }
    }
}

/// Statistics of an `N × 2` matrix.
pub fn suff_stats(data: &Tensor) -> Result<SufficientStats> {
    match data.shape() {
        [_, 2] => SufficientStats::from_rows(
            &data
                .data()
                .chunks(2)
                .map(|r| [r[0], r[1]])
                .collect::<Vec<_>>(),
        ),
        s => Err(Error::shape("suff_stats expects N×2 data", s, &[])),
    }
}

/// Which node is intervened and which is the outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `p(X1 | do(X2 = x))`.
    DoX2OnX1,
    /// `p(X2 | do(X1 = x))`.
    DoX1OnX2,
}

impl Direction {
    /// Direction for intervention node `j` (0 ↔ X1, 1 ↔ X2).
    pub fn from_int_node(j: usize) -> Result<Self> {
        match j {
            0 => Ok(Direction::DoX1OnX2),
            1 => Ok(Direction::DoX2OnX1),
            _ => Err(Error::Invalid(format!("two-node intervention node must be 0 or 1, got {j}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentPriors {
    pub sigma: f64,
    pub sigma_w: f64,
}

impl IdentPriors {
    fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma_w > 0.0) {
            return Err(Error::Invalid("σ and σ_w must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonIdentPriors {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl NonIdentPriors {
    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.5 && self.beta > 0.0 && self.eta > 0.0) {
            return Err(Error::Invalid("need α > 1/2 and β, η > 0".into()));
        }
        Ok(())
    }
}

fn normalize(logw: [f64; 3]) -> [f64; 3] {
    let z = log_sum_exp(&logw);
    logw.map(|l| (l - z).exp())
}

/// Log of the unnormalized identifiable weight for the graph whose child has
/// squared-sum `s_parent` on the parent side.
fn ident_log_weight(st: &SufficientStats, s_parent: f64, pr: &IdentPriors) -> f64 {
    let (s2, w2) = (pr.sigma * pr.sigma, pr.sigma_w * pr.sigma_w);
    let denom = w2 * s_parent + s2;
    pr.sigma.ln() - 0.5 * denom.ln() + w2 * st.s12 * st.s12 / (2.0 * s2 * denom)
}

/// Posterior over (X2→X1, X1→X2, no edge) for equal known noise variances.
pub fn ident_graph_posterior(st: &SufficientStats, pr: &IdentPriors) -> Result<[f64; 3]> {
    pr.check()?;
    Ok(normalize([
        ident_log_weight(st, st.s2, pr),
        ident_log_weight(st, st.s1, pr),
        0.0,
    ]))
}

/// Two-component Gaussian mixture for the intervened outcome.
pub fn ident_posterior_interventional(
    st: &SufficientStats,
    pr: &IdentPriors,
    direction: Direction,
    x: f64,
) -> Result<GaussianMixture> {
    let post = ident_graph_posterior(st, pr)?;
    let (p_edge, s_parent) = match direction {
        Direction::DoX2OnX1 => (post[0], st.s2),
        Direction::DoX1OnX2 => (post[1], st.s1),
    };
    let (s2, w2) = (pr.sigma * pr.sigma, pr.sigma_w * pr.sigma_w);
    let denom = w2 * s_parent + s2;
    let mean = w2 * st.s12 * x / denom;
    let var = s2 * (1.0 + w2 * x * x / denom);
    GaussianMixture::new(vec![p_edge, 1.0 - p_edge], vec![mean, 0.0], vec![var.sqrt(), pr.sigma])
}

/// Shifted statistics `(S^β, S^η)` for one node.
fn shifted(s: f64, pr: &NonIdentPriors) -> (f64, f64) {
    (s + 2.0 * pr.beta, s + 1.0 / pr.eta)
}

/// Log unnormalized weight of the graph `parent → child` (statistics of the child `sc`, parent `sp`).
fn nonident_edge_log_weight(sc: f64, sp: f64, s12: f64, nu: f64, pr: &NonIdentPriors) -> Result<f64> {
    let (c_beta, _) = shifted(sc, pr);
    let (p_beta, p_eta) = shifted(sp, pr);
    let det = c_beta * p_eta - s12 * s12;
    if !(det > 0.0) {
        return Err(Error::Invariant(format!("S^β S^η − S12² = {det} is not positive")));
    }
    Ok(-0.5 * pr.eta.ln() + 0.5 * (nu - 1.0) * (p_eta.ln() - p_beta.ln()) - 0.5 * nu * det.ln())
}

/// Posterior over (X2→X1, X1→X2, no edge) under the inverse-gamma noise priors.
pub fn nonident_graph_posterior(st: &SufficientStats, pr: &NonIdentPriors) -> Result<[f64; 3]> {
    pr.check()?;
    let nu = 2.0 * pr.alpha + st.n as f64;
    let (s1b, _) = shifted(st.s1, pr);
    let (s2b, _) = shifted(st.s2, pr);
    let g1 = nonident_edge_log_weight(st.s1, st.s2, st.s12, nu, pr)?;
    let g2 = nonident_edge_log_weight(st.s2, st.s1, st.s12, nu, pr)?;
    let g3 = -0.5 * (nu - 1.0) * s1b.ln() - 0.5 * nu * s2b.ln();
    Ok(normalize([g1, g2, g3]))
}

/// Student-t mixture for the intervened outcome, with components ordered
/// (edge into the outcome, edge out of it, no edge). The edge component has
/// `ν = 2α + n` degrees of freedom. Otherwise the outcome is a root: X1 always
/// carries the `IG(α − ½, β)` noise prior, while X2 carries it only under
/// X2→X1 and has `IG(α, β)` in the empty graph, so the dofs are `ν − 1` or `ν`.
pub fn nonident_posterior_interventional(
    st: &SufficientStats,
    pr: &NonIdentPriors,
    direction: Direction,
    x: f64,
) -> Result<StudentTMixture> {
    let post = nonident_graph_posterior(st, pr)?;
    let nu = 2.0 * pr.alpha + st.n as f64;
    let (p_edge, p_reverse, s_child, s_parent, empty_dof) = match direction {
        Direction::DoX2OnX1 => (post[0], post[1], st.s1, st.s2, nu - 1.0),
        Direction::DoX1OnX2 => (post[1], post[0], st.s2, st.s1, nu),
    };
    let (c_beta, _) = shifted(s_child, pr);
    let (_, p_eta) = shifted(s_parent, pr);
    let det = c_beta * p_eta - st.s12 * st.s12;
    if !(det > 0.0) {
        return Err(Error::Invariant(format!("S^β S^η − S12² = {det} is not positive")));
    }
    let loc = x * st.s12 / p_eta;
    let scale = (det * (p_eta + x * x) / (p_eta * p_eta * nu)).sqrt();
    StudentTMixture::new(
        vec![nu, nu - 1.0, empty_dof],
        vec![p_edge, p_reverse, post[2]],
        vec![loc, 0.0, 0.0],
        vec![
            scale,
            (c_beta / (nu - 1.0)).sqrt(),
            (c_beta / empty_dof).sqrt(),
        ],
    )
}
