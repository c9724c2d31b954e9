//! Proximity communication network.
//!
//! Agents within `comm_range` (inclusive) of each other are linked. The deployed
//! channel is narrow: each agent sees only the one-bit signal of its nearest
//! neighbour, and only while that neighbour is linked. [`message_pass`] is the
//! general one-round update `x_v' = f(x_v, Σ_{u∈N(v)} m_u)`; the signal channel is
//! the special case where `N(v)` is the linked nearest neighbour and `m_u` the bit.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Communication mode of a run: `Silent` is the no-communication baseline (MA),
/// `Signal` enables the nearest-neighbour bit (MAC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommMode {
    #[serde(rename = "ma")]
    Silent,
    #[serde(rename = "mac")]
    Signal,
}

impl CommMode {
    pub fn enabled(self) -> bool {
        matches!(self, CommMode::Signal)
    }

    pub fn label(self) -> &'static str {
        match self {
            CommMode::Silent => "ma",
            CommMode::Signal => "mac",
        }
    }
}

impl std::str::FromStr for CommMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ma" | "0" | "false" | "silent" => Ok(CommMode::Silent),
            "mac" | "1" | "true" | "signal" => Ok(CommMode::Signal),
            other => Err(Error::Config(format!("unknown communication mode `{other}`"))),
        }
    }
}

/// Something with a neighbourhood per node.
pub trait Neighborhood {
    fn node_count(&self) -> usize;
    fn neighbors(&self, v: usize) -> Vec<usize>;
}

/// Undirected distance graph over agents, rebuilt every step.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    adjacent: Vec<bool>,
    nearest: Vec<usize>,
}

impl CommGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn connected(&self, u: usize, v: usize) -> bool {
        self.adjacent[u * self.n + v]
    }

    pub fn nearest(&self, v: usize) -> usize {
        self.nearest[v]
    }

    /// Unordered edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.connected(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// The directed nearest-neighbour links that carry signals: `v` hears `nearest(v)`
    /// only when the two are connected.
    pub fn signal_links(&self) -> SignalLinks<'_> {
        SignalLinks(self)
    }
}

impl Neighborhood for CommGraph {
    fn node_count(&self) -> usize {
        self.n
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.n).filter(|&u| self.connected(v, u)).collect()
    }
}

pub struct SignalLinks<'a>(&'a CommGraph);

impl Neighborhood for SignalLinks<'_> {
    fn node_count(&self) -> usize {
        self.0.n
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        if self.0.n < 2 {
            return Vec::new();
        }
        let nn = self.0.nearest(v);
        if self.0.connected(v, nn) {
            vec![nn]
        } else {
            Vec::new()
        }
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn build_graph(positions: &[[f64; 2]], comm_range: f64) -> CommGraph {
    let n = positions.len();
    let mut adjacent = vec![false; n * n];
    for u in 0..n {
        for v in u + 1..n {
            if distance(positions[u], positions[v]) <= comm_range {
                adjacent[u * n + v] = true;
                adjacent[v * n + u] = true;
            }
        }
    }
    let nearest = (0..n).map(|v| nearest_neighbor(positions, v)).collect();
    CommGraph {
        n,
        adjacent,
        nearest,
    }
}

/// Closest other agent; ties go to the lower index. With a single agent returns
/// the agent itself.
pub fn nearest_neighbor(positions: &[[f64; 2]], agent: usize) -> usize {
    let mut best = agent;
    let mut best_d = f64::INFINITY;
    for (i, &p) in positions.iter().enumerate() {
        if i == agent {
            continue;
        }
        let d = distance(positions[agent], p);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// The nearest neighbour's raised signal if it is linked, otherwise `false`.
pub fn visible_signal(graph: &CommGraph, signals: &[bool], agent: usize, mode: CommMode) -> bool {
    if !mode.enabled() {
        return false;
    }
    let bits: Vec<Vec<f64>> = signals.iter().map(|&s| vec![f64::from(u8::from(s))]).collect();
    // One round over the signal links with `f(x, s) = s` reads the neighbour's bit.
    match message_pass(&bits, &graph.signal_links(), |_, sum| sum.to_vec()) {
        Ok(out) => out[agent][0] > 0.5,
        Err(_) => false,
    }
}

/// All agents' visible signals at once.
pub fn visible_signals(graph: &CommGraph, signals: &[bool], mode: CommMode) -> Vec<bool> {
    (0..signals.len())
        .map(|a| visible_signal(graph, signals, a, mode))
        .collect()
}

/// One synchronous message-passing round with identity messages.
pub fn message_pass<G, F>(features: &[Vec<f64>], graph: &G, update: F) -> Result<Vec<Vec<f64>>>
where
    G: Neighborhood + ?Sized,
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if features.len() != graph.node_count() {
        return Err(Error::DimensionMismatch {
            expected: graph.node_count(),
            actual: features.len(),
        });
    }
    let dim = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let out = (0..features.len())
        .map(|v| {
            let mut sum = vec![0.0; dim];
            for u in graph.neighbors(v) {
                for (s, x) in sum.iter_mut().zip(&features[u]) {
                    *s += x;
                }
            }
            update(&features[v], &sum)
        })
        .collect();
    Ok(out)
}
