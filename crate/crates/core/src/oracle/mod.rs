//! Reference computations: closed-form two-node posteriors, linear do-calculus,
//! mixture densities, quadrature validators, and Monte-Carlo KL.

pub mod brute;
mod linear;
mod mixture;
pub mod quadrature;
mod two_node;

#[cfg(test)]
mod tests;

pub use linear::linear_scm_do;
pub use mixture::{
    mc_kl, mc_kl_with, mog_logpdf, student_t_logpdf, tmix_logpdf, Gaussian, GaussianMixture, KlEstimate, LogDensity,
    Sampler, StudentTMixture,
};
pub use two_node::{
    ident_graph_posterior, ident_posterior_interventional, nonident_graph_posterior, nonident_posterior_interventional,
    suff_stats, Direction, IdentPriors, NonIdentPriors, SufficientStats,
};
