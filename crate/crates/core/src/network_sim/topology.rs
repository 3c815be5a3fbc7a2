use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the communication graph is formed from node positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    #[default]
    FullyConnected,
    /// Each node links to its `k` nearest peers; links are then symmetrised.
    KNearest {
        k: usize,
    },
}

/// Undirected communication graph with its diffusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: Vec<Vec<bool>>,
    neighborhoods: Vec<BTreeSet<usize>>,
    c: DMatrix<f64>,
    l: DMatrix<f64>,
}

impl Topology {
    /// Validates a symmetric, zero-diagonal, connected adjacency and attaches
    /// Metropolis diffusion weights.
    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::Topology("empty network".into()));
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology(format!(
                    "adjacency row {i} has length {}",
                    row.len()
                )));
            }
            if row[i] {
                return Err(Error::Topology(format!("self-loop at node {i}")));
            }
            for (j, &linked) in row.iter().enumerate() {
                if linked != adjacency[j][i] {
                    return Err(Error::Topology(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if !is_connected(&adjacency) {
            return Err(Error::Topology(
                "communication graph is disconnected".into(),
            ));
        }
        let neighborhoods = (0..n)
            .map(|k| {
                let mut set: BTreeSet<usize> = (0..n).filter(|&j| adjacency[k][j]).collect();
                set.insert(k);
                set
            })
            .collect();
        let c = metropolis_weights(&adjacency);
        let l = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j || adjacency[i][j] { 1.0 } else { 0.0 },
        );
        Ok(Self {
            adjacency,
            neighborhoods,
            c,
            l,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn is_linked(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    /// `𝒩_k`, including `k`.
    pub fn neighborhood(&self, k: usize) -> &BTreeSet<usize> {
        &self.neighborhoods[k]
    }

    /// `𝒩_k \ {k}` in ascending order.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighborhoods[k]
            .iter()
            .copied()
            .filter(move |&j| j != k)
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighborhoods[k].len() - 1
    }

    /// Row-stochastic diffusion matrix `C`.
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Adjacency with self-loops, used to stack neighbourhood sums.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Row `k` of `C` restricted to `𝒩_k`.
    pub fn weights_row(&self, k: usize) -> BTreeMap<usize, f64> {
        self.neighborhoods[k]
            .iter()
            .map(|&j| (j, self.c[(k, j)]))
            .collect()
    }
}

fn is_connected(adjacency: &[Vec<bool>]) -> bool {
    let n = adjacency.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if adjacency[i][j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Build the graph for `spec` over nodes at `positions`.
pub fn build_topology(spec: &TopologySpec, positions: &[Vector3<f64>]) -> Result<Topology> {
    let n = positions.len();
    let mut adjacency = vec![vec![false; n]; n];
    match *spec {
        TopologySpec::FullyConnected => {
            for (i, row) in adjacency.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = i != j;
                }
            }
        }
        TopologySpec::KNearest { k } => {
            if k == 0 || k >= n {
                return Err(Error::scenario(
                    "topology.k",
                    format!("k must satisfy 0 < k < {n} (number of nodes)"),
                ));
            }
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| {
                    let da = (positions[a] - positions[i]).norm();
                    let db = (positions[b] - positions[i]).norm();
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                for &j in others.iter().take(k) {
                    adjacency[i][j] = true;
                    adjacency[j][i] = true;
                }
            }
        }
    }
    Topology::from_adjacency(adjacency).map_err(|e| match e {
        Error::Topology(reason) => Error::scenario("topology", reason),
        other => other,
    })
}

/// `C_kj = 1 / (1 + max(deg_k, deg_j))` on edges, diagonal takes the rest.
pub fn metropolis_weights(adjacency: &[Vec<bool>]) -> DMatrix<f64> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency
        .iter()
        .map(|row| row.iter().filter(|&&b| b).count())
        .collect();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if adjacency[i][j] {
                let w = 1.0 / (1.0 + degree[i].max(degree[j]) as f64);
                c[(i, j)] = w;
                off += w;
            }
        }
        c[(i, i)] = 1.0 - off;
    }
    c
}
