//! Skeleton graphs and the distance-based spatial partitioning.
//!
//! Every node's 1-hop sampling area is split into three subsets relative to
//! a root joint: the node itself, neighbours closer to the root, and
//! neighbours farther from it. Neighbours at the same hop distance join the
//! closer subset. Each subset becomes one 0/1 matrix that is then
//! degree-normalized.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRESET_NAMES: [&str; 5] = ["pku-mmd", "hugadb", "lara", "fog-gait", "tug"];

const PRESET_FILES: [(&str, &str); 5] = [
    ("pku-mmd", include_str!("../layouts/pku-mmd.toml")),
    ("hugadb", include_str!("../layouts/hugadb.toml")),
    ("lara", include_str!("../layouts/lara.toml")),
    ("fog-gait", include_str!("../layouts/fog-gait.toml")),
    ("tug", include_str!("../layouts/tug.toml")),
];

/// Undirected skeleton layout. Self-connections are implied, never listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphLayout {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub root: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub node_names: Vec<String>,
}

impl GraphLayout {
    pub fn new(num_nodes: usize, edges: Vec<[usize; 2]>, root: usize) -> Result<Self> {
        let layout = GraphLayout {
            name: None,
            num_nodes,
            edges,
            root,
            node_names: Vec::new(),
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Path graph `0 - 1 - ... - (n-1)` rooted at node 0.
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| [i - 1, i]).collect(), 0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if n == 0 {
            return Err(Error::Graph("layout needs at least one node".into()));
        }
        if self.root >= n {
            return Err(Error::Graph(format!("root {} out of range for {n} nodes", self.root)));
        }
        if !self.node_names.is_empty() && self.node_names.len() != n {
            return Err(Error::Graph(format!(
                "{} node names for {n} nodes",
                self.node_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for &[a, b] in &self.edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop ({a}, {a}) in edge list")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
        }
        hop_distances(self).map(|_| ())
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &[a, b] in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Symmetric 0/1 adjacency plus identity.
    pub fn adjacency_with_self_loops(&self) -> Tensor {
        let n = self.num_nodes;
        let mut a = Tensor::eye(n);
        for &[i, j] in &self.edges {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
        }
        a
    }
}

/// Unweighted hop count from the root to every node (breadth-first).
pub fn hop_distances(layout: &GraphLayout) -> Result<Vec<usize>> {
    let adj = layout.neighbours();
    let mut dist = vec![usize::MAX; layout.num_nodes];
    let mut queue = VecDeque::from([layout.root]);
    dist[layout.root] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let unreachable: Vec<usize> = (0..layout.num_nodes).filter(|&i| dist[i] == usize::MAX).collect();
    if !unreachable.is_empty() {
        return Err(Error::Graph(format!(
            "graph is disconnected; unreachable from root {}: {unreachable:?}",
            layout.root
        )));
    }
    Ok(dist)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    SelfLoop = 0,
    Closer = 1,
    Farther = 2,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::SelfLoop, Partition::Closer, Partition::Farther];

    pub fn name(self) -> &'static str {
        match self {
            Partition::SelfLoop => "self",
            Partition::Closer => "closer",
            Partition::Farther => "farther",
        }
    }
}

/// Subset of node `j` in the sampling area of node `i`.
pub fn assign(i: usize, j: usize, hops: &[usize]) -> Partition {
    if i == j {
        Partition::SelfLoop
    } else if hops[j] <= hops[i] {
        Partition::Closer
    } else {
        Partition::Farther
    }
}

/// The three unnormalized 0/1 matrices `[self, closer, farther]`.
pub fn partition(layout: &GraphLayout, hops: &[usize]) -> [Tensor; 3] {
    let n = layout.num_nodes;
    let mut mats = [Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n])];
    let adj = layout.neighbours();
    for i in 0..n {
        for &j in adj[i].iter().chain(std::iter::once(&i)) {
            mats[assign(i, j, hops) as usize].set(&[i, j], 1.0);
        }
    }
    mats
}

/// `D_row^{-1/2} A D_col^{-1/2}`: rows are scaled by their out-degree and
/// columns by their in-degree within the same matrix. For symmetric input
/// both degrees coincide and this is the usual symmetric normalization.
/// Zero-degree rows and columns stay zero.
pub fn normalize(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut row_deg = vec![0.0; n];
    let mut col_deg = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let v = a.at(&[i, j]);
            row_deg[i] += v;
            col_deg[j] += v;
        }
    }
    let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let v = a.at(&[i, j]);
        if v == 0.0 {
            0.0
        } else {
            inv_sqrt(row_deg[i]) * v * inv_sqrt(col_deg[j])
        }
    })
}

/// Normalized per-partition adjacency consumed by the graph convolution.
#[derive(Clone, Debug)]
pub struct PartitionedAdjacency {
    /// `[self, closer, farther]`, each `N × N`
    pub matrices: [Tensor; 3],
    pub hops: Vec<usize>,
}

impl PartitionedAdjacency {
    pub fn from_layout(layout: &GraphLayout) -> Result<Self> {
        layout.validate()?;
        let hops = hop_distances(layout)?;
        let raw = partition(layout, &hops);
        let matrices = [normalize(&raw[0]), normalize(&raw[1]), normalize(&raw[2])];
        Ok(PartitionedAdjacency { matrices, hops })
    }

    pub fn num_nodes(&self) -> usize {
        self.hops.len()
    }
}

pub fn parse_layout(text: &str) -> Result<GraphLayout> {
    let layout: GraphLayout =
        toml::from_str(text).map_err(|e| Error::Graph(format!("invalid layout file: {e}")))?;
    layout.validate()?;
    Ok(layout)
}

pub fn load_layout(path: &Path) -> Result<GraphLayout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_layout(&text)
}

pub fn layout_preset(name: &str) -> Result<GraphLayout> {
    PRESET_FILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_layout(text))
        .unwrap_or_else(|| {
            Err(Error::Config(format!(
                "unknown layout preset '{name}'; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        })
}

/// A preset name or a path to a layout file.
pub fn resolve_layout(spec: &str) -> Result<GraphLayout> {
    if PRESET_NAMES.contains(&spec) {
        layout_preset(spec)
    } else if Path::new(spec).exists() {
        load_layout(Path::new(spec))
    } else {
        layout_preset(spec)
    }
}

pub fn layout_to_toml(layout: &GraphLayout) -> String {
    toml::to_string(layout).expect("layout serializes")
}
