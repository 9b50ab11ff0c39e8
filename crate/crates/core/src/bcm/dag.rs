use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed acyclic graph stored as a dense adjacency matrix; `adj[p][c]` means `p → c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    adj: Vec<Vec<bool>>,
}

impl Dag {
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            adj: vec![vec![false; num_nodes]; num_nodes],
        }
    }

    /// Validates squareness, absence of self-edges, and acyclicity.
    pub fn from_adjacency(adj: Vec<Vec<bool>>) -> Result<Self> {
        let d = adj.len();
        if adj.iter().any(|row| row.len() != d) {
            return Err(Error::Invalid("adjacency matrix is not square".into()));
        }
        if (0..d).any(|k| adj[k][k]) {
            return Err(Error::Invalid("self-edge in adjacency matrix".into()));
        }
        let dag = Self { adj };
        dag.topological_order()?;
        Ok(dag)
    }

    /// Builds a graph from an edge list, rejecting cycles.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; num_nodes]; num_nodes];
        for &(p, c) in edges {
            if p >= num_nodes || c >= num_nodes {
                return Err(Error::Invalid(format!("edge {p}->{c} out of range")));
            }
            adj[p][c] = true;
        }
        Self::from_adjacency(adj)
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.adj[parent][child]
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adj
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().flatten().filter(|&&e| e).count()
    }

    pub fn parents(&self, child: usize) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&p| self.adj[p][child]).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.num_nodes();
        (0..d)
            .flat_map(|p| (0..d).map(move |c| (p, c)))
            .filter(|&(p, c)| self.adj[p][c])
            .collect()
    }

    /// Kahn peel; fails if a cycle remains.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let d = self.num_nodes();
        let mut indegree: Vec<usize> = (0..d).map(|c| self.parents(c).len()).collect();
        let mut ready: Vec<usize> = (0..d).rev().filter(|&c| indegree[c] == 0).collect();
        let mut order = Vec::with_capacity(d);
        while let Some(node) = ready.pop() {
            order.push(node);
            for c in (0..d).rev() {
                if self.adj[node][c] {
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        ready.push(c);
                    }
                }
            }
        }
        if order.len() != d {
            return Err(Error::Invariant("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Relabels nodes: node `k` of `self` becomes node `perm[k]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let d = self.num_nodes();
        let mut adj = vec![vec![false; d]; d];
        for (p, c) in self.edges() {
            adj[perm[p]][perm[c]] = true;
        }
        Self { adj }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    ErdosRenyi,
    ScaleFree,
}

/// How many edges a sampled graph should have.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Expected node degree, drawn uniformly from the listed choices; edge probability `deg/(D−1)`.
    ExpectedDegree(Vec<f64>),
    /// Exact edge count.
    EdgeCount(usize),
    /// Edge count `c·D`.
    EdgesPerNode(f64),
    /// Edge count drawn uniformly from `[lo·D, hi·D]`, clamped to the DAG maximum.
    EdgesPerNodeRange { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphPrior {
    /// Each draw picks one family uniformly.
    pub families: Vec<GraphFamily>,
    pub density: Density,
}

impl GraphPrior {
    pub fn erdos_renyi(density: Density) -> Self {
        Self {
            families: vec![GraphFamily::ErdosRenyi],
            density,
        }
    }
}

pub fn max_edges(num_nodes: usize) -> usize {
    num_nodes * num_nodes.saturating_sub(1) / 2
}

/// Samples a DAG: edges live on the strict upper triangle of a uniformly random
/// node order, so acyclicity holds by construction.
pub fn sample_dag<R: Rng + ?Sized>(prior: &GraphPrior, num_nodes: usize, rng: &mut R) -> Result<Dag> {
    if num_nodes == 0 {
        return Err(Error::Invalid("graph needs at least one node".into()));
    }
    if prior.families.is_empty() {
        return Err(Error::Config("graph prior lists no families".into()));
    }
    let family = prior.families[rng.random_range(0..prior.families.len())];
    let max = max_edges(num_nodes);

    enum Target {
        Probability(f64),
        Count(usize),
    }
    let target = match &prior.density {
        Density::ExpectedDegree(choices) => {
            if choices.is_empty() || choices.iter().any(|d| !(*d >= 0.0)) {
                return Err(Error::Config("expected-degree choices must be nonnegative".into()));
            }
            let deg = choices[rng.random_range(0..choices.len())];
            if num_nodes == 1 {
                Target::Count(0)
            } else {
                Target::Probability((deg / (num_nodes - 1) as f64).min(1.0))
            }
        }
        Density::EdgeCount(m) => {
            if *m > max {
                return Err(Error::Config(format!("{m} edges requested but a {num_nodes}-node DAG holds at most {max}")));
            }
            Target::Count(*m)
        }
        Density::EdgesPerNode(c) => {
            let m = (c * num_nodes as f64).round() as usize;
            if m > max {
                return Err(Error::Config(format!("{m} edges requested but a {num_nodes}-node DAG holds at most {max}")));
            }
            Target::Count(m)
        }
        Density::EdgesPerNodeRange { lo, hi } => {
            let lo_n = (lo * num_nodes as f64).ceil() as usize;
            let hi_n = ((hi * num_nodes as f64).floor() as usize).max(lo_n);
            let m = rng.random_range(lo_n..=hi_n);
            Target::Count(m.min(max))
        }
    };

    let mut order: Vec<usize> = (0..num_nodes).collect();
    order.shuffle(rng);
    let mut adj = vec![vec![false; num_nodes]; num_nodes];
    // Pairs (a, b) with a < b in permutation order; edge runs order[a] → order[b].
    match family {
        GraphFamily::ErdosRenyi => match target {
            Target::Probability(p) => {
                for a in 0..num_nodes {
                    for b in a + 1..num_nodes {
                        if rng.random::<f64>() < p {
                            adj[order[a]][order[b]] = true;
                        }
                    }
                }
            }
            Target::Count(m) => {
                let pairs: Vec<(usize, usize)> = (0..num_nodes)
                    .flat_map(|a| (a + 1..num_nodes).map(move |b| (a, b)))
                    .collect();
                for k in index::sample(rng, pairs.len(), m) {
                    let (a, b) = pairs[k];
                    adj[order[a]][order[b]] = true;
                }
            }
        },
        GraphFamily::ScaleFree => {
            let m_total = match target {
                Target::Probability(p) => (p * max as f64).round() as usize,
                Target::Count(m) => m,
            };
            let per_node = if num_nodes > 1 {
                ((m_total as f64 / (num_nodes - 1) as f64).round() as usize).max(usize::from(m_total > 0))
            } else {
                0
            };
            let mut degree = vec![0usize; num_nodes];
            for b in 1..num_nodes {
                let k = per_node.min(b);
                let mut chosen: Vec<usize> = Vec::with_capacity(k);
                while chosen.len() < k {
                    // Preferential attachment with +1 smoothing so isolated nodes can be picked.
                    let weights = (0..b).map(|a| if chosen.contains(&a) { 0.0 } else { (degree[a] + 1) as f64 });
                    let dist = WeightedIndex::new(weights).expect("at least one unchosen node");
                    chosen.push(dist.sample(rng));
                }
                for a in chosen {
                    degree[a] += 1;
                    degree[b] += 1;
                    adj[order[a]][order[b]] = true;
                }
            }
        }
    }
    Ok(Dag { adj })
}
