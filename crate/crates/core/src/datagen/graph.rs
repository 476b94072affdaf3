//! Weighted undirected device graphs and the topologies used to build them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::rng::{global_stream, StreamKind};

/// Weighted undirected device-interaction graph. Edges are stored once with
/// `i < j` unless explicitly provided otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "topology", rename_all = "snake_case")]
pub enum GraphTopology {
    Ring,
    Grid,
    KNearest { k: usize },
    Explicit { edges: Vec<(usize, usize, f64)> },
}

impl DeviceGraph {
    pub fn validate(&self) -> Result<(), DatagenError> {
        for &(i, j, w) in &self.edges {
            if i >= self.n_nodes || j >= self.n_nodes {
                return Err(DatagenError::InvalidConfig(format!(
                    "edge ({i}, {j}) out of range for {} nodes",
                    self.n_nodes
                )));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(DatagenError::InvalidConfig(format!(
                    "edge weight must be in (0, 1], got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Neighbor lists in both directions, sorted by neighbor id so
    /// aggregation order is canonical.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            if i != j {
                adj[j].push((i, w));
            }
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
            list.dedup_by_key(|&mut (n, _)| n);
        }
        adj
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors()[node].len()
    }

    pub fn is_connected(&self) -> bool {
        if self.n_nodes <= 1 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.n_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(u, _) in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Induced subgraph over `nodes`, relabeled to 0..len in the given order.
    pub fn subgraph(&self, nodes: &[usize]) -> DeviceGraph {
        let mut relabel = vec![usize::MAX; self.n_nodes];
        for (new, &old) in nodes.iter().enumerate() {
            relabel[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(i, j, w)| {
                let (a, b) = (relabel[i], relabel[j]);
                (a != usize::MAX && b != usize::MAX).then_some((a, b, w))
            })
            .collect();
        DeviceGraph {
            n_nodes: nodes.len(),
            edges,
            symmetric: self.symmetric,
        }
    }

    /// Relabel node ids through a permutation: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DeviceGraph {
        DeviceGraph {
            n_nodes: self.n_nodes,
            edges: self
                .edges
                .iter()
                .map(|&(i, j, w)| (perm[i], perm[j], w))
                .collect(),
            symmetric: self.symmetric,
        }
    }
}

/// Build a connected weighted undirected graph over `n_devices` nodes.
pub fn build_graph(
    n_devices: usize,
    topology: &GraphTopology,
    seed: u64,
) -> Result<DeviceGraph, DatagenError> {
    if n_devices == 0 {
        return Err(DatagenError::InvalidConfig("graph needs at least one node".into()));
    }
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    match topology {
        GraphTopology::Ring => {
            if n_devices == 2 {
                edges.push((0, 1, 1.0));
            } else if n_devices > 2 {
                for i in 0..n_devices {
                    edges.push((i, (i + 1) % n_devices, 1.0));
                }
            }
        }
        GraphTopology::Grid => {
            let cols = (n_devices as f64).sqrt().ceil() as usize;
            for i in 0..n_devices {
                let (r, c) = (i / cols, i % cols);
                if c + 1 < cols && i + 1 < n_devices {
                    edges.push((i, i + 1, 1.0));
                }
                if (r + 1) * cols + c < n_devices {
                    edges.push((i, (r + 1) * cols + c, 1.0));
                }
            }
        }
        GraphTopology::KNearest { k } => {
            if *k >= n_devices {
                return Err(DatagenError::InvalidConfig(format!(
                    "k_nearest needs k < n_devices, got k={k} with {n_devices} devices"
                )));
            }
            if *k == 0 {
                return Err(DatagenError::InvalidConfig("k_nearest needs k >= 1".into()));
            }
            let mut rng = global_stream(seed, StreamKind::Graph);
            let pos: Vec<(f64, f64)> = (0..n_devices)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            let dist = |a: usize, b: usize| -> f64 {
                let dx = pos[a].0 - pos[b].0;
                let dy = pos[a].1 - pos[b].1;
                (dx * dx + dy * dy).sqrt()
            };
            let mut all: Vec<f64> = Vec::new();
            for i in 0..n_devices {
                for j in (i + 1)..n_devices {
                    all.push(dist(i, j));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = all[all.len() / 2].max(1e-9);
            let weight = |d: f64| ((-(d / median) * (d / median)).exp()).clamp(1e-9, 1.0);

            let mut seen = std::collections::BTreeSet::new();
            for i in 0..n_devices {
                let mut others: Vec<usize> = (0..n_devices).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| dist(i, a).partial_cmp(&dist(i, b)).unwrap());
                for &j in others.iter().take(*k) {
                    let key = (i.min(j), i.max(j));
                    if seen.insert(key) {
                        edges.push((key.0, key.1, weight(dist(i, j))));
                    }
                }
            }
            // Patch connectivity: link nearest pairs across components.
            let mut uf = UnionFind::new(n_devices);
            for &(i, j, _) in &edges {
                uf.union(i, j);
            }
            loop {
                let roots: std::collections::BTreeSet<usize> =
                    (0..n_devices).map(|v| uf.find(v)).collect();
                if roots.len() <= 1 {
                    break;
                }
                let mut best: Option<(usize, usize, f64)> = None;
                for i in 0..n_devices {
                    for j in (i + 1)..n_devices {
                        if uf.find(i) != uf.find(j) {
                            let d = dist(i, j);
                            if best.map_or(true, |(_, _, bd)| d < bd) {
                                best = Some((i, j, d));
                            }
                        }
                    }
                }
                let (i, j, d) = best.expect("components remain");
                edges.push((i, j, weight(d)));
                uf.union(i, j);
            }
        }
        GraphTopology::Explicit { edges: given } => {
            edges = given.clone();
        }
    }
    let graph = DeviceGraph {
        n_nodes: n_devices,
        edges,
        symmetric: true,
    };
    graph.validate()?;
    if !matches!(topology, GraphTopology::Explicit { .. }) && !graph.is_connected() {
        return Err(DatagenError::InvalidConfig(
            "constructed graph is not connected".into(),
        ));
    }
    Ok(graph)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}
