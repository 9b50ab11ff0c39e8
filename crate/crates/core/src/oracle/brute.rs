//! Brute-force two-node posteriors by direct numerical integration of the raw
//! data likelihood against the priors. Independent of the closed forms.

use super::quadrature::log_integrate_unimodal;
use super::two_node::{Direction, IdentPriors, NonIdentPriors};
use crate::diffengine::kernels::log_sum_exp;
use crate::error::Result;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const TOL: f64 = 1e-12;

fn ln_normal(y: f64, mean: f64, var: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * (y - mean) * (y - mean) / var
}

fn ln_inv_gamma(t: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - libm::lgamma(shape) - (shape + 1.0) * t.ln() - rate / t
}

fn swap(rows: &[[f64; 2]]) -> Vec<[f64; 2]> {
    rows.iter().map(|[a, b]| [*b, *a]).collect()
}

/// Optional extra observation `(x, y)` folded into an integrand: the predictive
/// density of `y` at intervention value `x` under the same parameters.
type Query = Option<(f64, f64)>;

// ---- identifiable model: U ~ N(0, σ²), w ~ N(0, σ_w²) ----

/// `ln ∫ Π_r N(c_r | w p_r, σ²) N(w | 0, σ_w²) [N(y | w x, σ²)] dw`.
fn ident_regression(child: &[f64], parent: &[f64], pr: &IdentPriors, query: Query) -> Result<f64> {
    let s2 = pr.sigma * pr.sigma;
    let span = 60.0 * pr.sigma_w + 60.0;
    log_integrate_unimodal(
        |w| {
            let mut acc = ln_normal(w, 0.0, pr.sigma_w * pr.sigma_w);
            for (c, p) in child.iter().zip(parent) {
                acc += ln_normal(*c, w * p, s2);
            }
            if let Some((x, y)) = query {
                acc += ln_normal(y, w * x, s2);
            }
            acc
        },
        -span,
        span,
        TOL,
    )
}

fn ident_root(xs: &[f64], pr: &IdentPriors) -> f64 {
    xs.iter().map(|x| ln_normal(*x, 0.0, pr.sigma * pr.sigma)).sum()
}

/// Log marginal likelihoods of (X2→X1, X1→X2, no edge).
pub fn ident_log_evidence(rows: &[[f64; 2]], pr: &IdentPriors) -> Result<[f64; 3]> {
    let x1: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let x2: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    Ok([
        ident_regression(&x1, &x2, pr, None)? + ident_root(&x2, pr),
        ident_regression(&x2, &x1, pr, None)? + ident_root(&x1, pr),
        ident_root(&x1, pr) + ident_root(&x2, pr),
    ])
}

pub fn ident_posterior_brute(rows: &[[f64; 2]], pr: &IdentPriors) -> Result<[f64; 3]> {
    Ok(normalize(ident_log_evidence(rows, pr)?))
}

/// Posterior interventional density at `y`.
pub fn ident_predictive_brute(rows: &[[f64; 2]], pr: &IdentPriors, direction: Direction, x: f64, y: f64) -> Result<f64> {
    if direction == Direction::DoX1OnX2 {
        return ident_predictive_brute(&swap(rows), pr, Direction::DoX2OnX1, x, y);
    }
    let x1: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let x2: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let evidence = ident_log_evidence(rows, pr)?;
    let s2 = pr.sigma * pr.sigma;
    let joint = [
        ident_regression(&x1, &x2, pr, Some((x, y)))? + ident_root(&x2, pr),
        evidence[1] + ln_normal(y, 0.0, s2),
        evidence[2] + ln_normal(y, 0.0, s2),
    ];
    Ok((log_sum_exp(&joint) - log_sum_exp(&evidence)).exp())
}

// ---- non-identifiable model: inverse-gamma noise variances ----

const U_RANGE: (f64, f64) = (-40.0, 40.0);

/// `ln ∫∫ IG(τ² | a, b) N(w | 0, η τ²) Π_r N(c_r | w p_r, τ²) [N(y | w x, τ²)] dw dτ²`,
/// integrating over `u = ln τ²`.
fn nonident_regression(child: &[f64], parent: &[f64], shape: f64, rate: f64, eta: f64, query: Query) -> Result<f64> {
    let mut failure = None;
    let value = log_integrate_unimodal(
        |u| {
            let t = u.exp();
            let span = 60.0 * (eta * t).sqrt() + 60.0;
            let inner = log_integrate_unimodal(
                |w| {
                    let mut acc = ln_normal(w, 0.0, eta * t);
                    for (c, p) in child.iter().zip(parent) {
                        acc += ln_normal(*c, w * p, t);
                    }
                    if let Some((x, y)) = query {
                        acc += ln_normal(y, w * x, t);
                    }
                    acc
                },
                -span,
                span,
                TOL,
            );
            match inner {
                Ok(v) => v + ln_inv_gamma(t, shape, rate) + u,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NEG_INFINITY
                }
            }
        },
        U_RANGE.0,
        U_RANGE.1,
        TOL,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    value
}

/// `ln ∫ IG(τ² | a, b) Π_r N(x_r | 0, τ²) [N(y | 0, τ²)] dτ²`.
fn nonident_root(xs: &[f64], shape: f64, rate: f64, y: Option<f64>) -> Result<f64> {
    log_integrate_unimodal(
        |u| {
            let t = u.exp();
            let mut acc = ln_inv_gamma(t, shape, rate) + u;
            for x in xs {
                acc += ln_normal(*x, 0.0, t);
            }
            if let Some(y) = y {
                acc += ln_normal(y, 0.0, t);
            }
            acc
        },
        U_RANGE.0,
        U_RANGE.1,
        TOL,
    )
}

/// Log marginal likelihoods of (X2→X1, X1→X2, no edge). The three-dimensional
/// integral over `(w, τ1², τ2²)` factorizes into a two-dimensional integral for
/// the child and a one-dimensional one for the root.
pub fn nonident_log_evidence(rows: &[[f64; 2]], pr: &NonIdentPriors) -> Result<[f64; 3]> {
    let x1: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let x2: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let (a, b, e) = (pr.alpha, pr.beta, pr.eta);
    Ok([
        nonident_regression(&x1, &x2, a, b, e, None)? + nonident_root(&x2, a - 0.5, b, None)?,
        nonident_regression(&x2, &x1, a, b, e, None)? + nonident_root(&x1, a - 0.5, b, None)?,
        nonident_root(&x1, a - 0.5, b, None)? + nonident_root(&x2, a, b, None)?,
    ])
}

pub fn nonident_posterior_brute(rows: &[[f64; 2]], pr: &NonIdentPriors) -> Result<[f64; 3]> {
    Ok(normalize(nonident_log_evidence(rows, pr)?))
}

pub fn nonident_predictive_brute(
    rows: &[[f64; 2]],
    pr: &NonIdentPriors,
    direction: Direction,
    x: f64,
    y: f64,
) -> Result<f64> {
    let x1: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let x2: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let (a, b, e) = (pr.alpha, pr.beta, pr.eta);
    let evidence = nonident_log_evidence(rows, pr)?;
    // The priors are not symmetric in the two nodes, so each direction is written out.
    let joint = match direction {
        Direction::DoX2OnX1 => [
            nonident_regression(&x1, &x2, a, b, e, Some((x, y)))? + nonident_root(&x2, a - 0.5, b, None)?,
            nonident_regression(&x2, &x1, a, b, e, None)? + nonident_root(&x1, a - 0.5, b, Some(y))?,
            nonident_root(&x1, a - 0.5, b, Some(y))? + nonident_root(&x2, a, b, None)?,
        ],
        Direction::DoX1OnX2 => [
            nonident_regression(&x1, &x2, a, b, e, None)? + nonident_root(&x2, a - 0.5, b, Some(y))?,
            nonident_regression(&x2, &x1, a, b, e, Some((x, y)))? + nonident_root(&x1, a - 0.5, b, None)?,
            nonident_root(&x1, a - 0.5, b, None)? + nonident_root(&x2, a, b, Some(y))?,
        ],
    };
    Ok((log_sum_exp(&joint) - log_sum_exp(&evidence)).exp())
}

fn normalize(logw: [f64; 3]) -> [f64; 3] {
    let z = log_sum_exp(&logw);
    logw.map(|l| (l - z).exp())
}
