//! Task generation from Bayesian causal models: graphs, mechanisms, datasets.

mod dag;
mod mechanism;
mod scm;
mod task;


pub use dag::{max_edges, sample_dag, Dag, Density, GraphFamily, GraphPrior};
pub use mechanism::{
    generate_interventional, generate_observational, se_kernel, CausalModel, Intervention, InterventionValues,
    JointSample, MechanismKind, NodeMechanism,
};
pub use scm::{sample_linear_scm, total_effects, LinearGaussianScm};
pub use task::{
    make_task, standardize, task_seed, two_node_graph, Family, GeneratorConfig, GeneratorMetadata, Standardizer,
    TaskBundle,
};
