//! Third-order factor graph over `n` participants.
//!
//! Variable nodes are numbered from zero: action nodes `0..n`, followed by one
//! relation node per unordered pair in lexicographic pair order. Compatibility
//! factors join `(i, j, g(i, j))`; transitivity factors join
//! `(g(r, s), g(s, t), g(r, t))` for every `r < s < t`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Bijection between participant pairs `u < v` and relation nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairIndexMap {
    n: usize,
}

impl PairIndexMap {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn participants(&self) -> usize {
        self.n
    }

    pub fn pair_count(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }

    /// Position of the pair `(u, v)`, `u < v`, in lexicographic order.
    pub fn slot(&self, u: usize, v: usize) -> Result<usize> {
        if u >= v || v >= self.n {
            return Err(Error::InvalidArgument(format!(
                "pair ({u}, {v}) is not an ordered pair of distinct participants below {}",
                self.n
            )));
        }
        Ok(u * (2 * self.n - u - 1) / 2 + (v - u - 1))
    }

    /// Slot of an unordered pair; `(k, l)` and `(l, k)` map to the same slot.
    pub fn unordered_slot(&self, k: usize, l: usize) -> Result<usize> {
        self.slot(k.min(l), k.max(l))
    }

    /// Relation node id `g(u, v)`.
    pub fn node(&self, u: usize, v: usize) -> Result<usize> {
        Ok(self.n + self.slot(u, v)?)
    }

    pub fn pair_of_slot(&self, slot: usize) -> Result<(usize, usize)> {
        if slot >= self.pair_count() {
            return Err(Error::InvalidArgument(format!("pair slot {slot} out of range")));
        }
        let mut rest = slot;
        for u in 0..self.n {
            let row = self.n - u - 1;
            if rest < row {
                return Ok((u, u + 1 + rest));
            }
            rest -= row;
        }
        unreachable!("slot bound checked above")
    }

    pub fn pair_of_node(&self, node: usize) -> Result<(usize, usize)> {
        if node < self.n {
            return Err(Error::InvalidArgument(format!("node {node} is an action node")));
        }
        self.pair_of_slot(node - self.n)
    }

    /// All pairs in slot order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |u| (u + 1..self.n).map(move |v| (u, v)))
    }

    /// All triples `r < s < t` in lexicographic order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |r| {
            (r + 1..n).flat_map(move |s| (s + 1..n).map(move |t| (r, s, t)))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Compat,
    Trans,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Factor {
    pub kind: FactorKind,
    pub nodes: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub factor: usize,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InteractionGraph {
    pairs: PairIndexMap,
    factors: Vec<Factor>,
    edges: Vec<Edge>,
    #[serde(skip)]
    node_edges: Vec<Vec<usize>>,
    #[serde(skip)]
    factor_edges: Vec<[usize; 3]>,
}

impl InteractionGraph {
    pub fn build(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "a scene needs at least 2 participants, got {n}"
            )));
        }
        let pairs = PairIndexMap::new(n);
        let mut factors = Vec::with_capacity(pairs.pair_count() + n * (n - 1) * (n - 2) / 6);
        for (i, j) in pairs.pairs() {
            factors.push(Factor {
                kind: FactorKind::Compat,
                nodes: [i, j, pairs.node(i, j)?],
            });
        }
        for (r, s, t) in pairs.triples() {
            factors.push(Factor {
                kind: FactorKind::Trans,
                nodes: [pairs.node(r, s)?, pairs.node(s, t)?, pairs.node(r, t)?],
            });
        }

        let node_count = n + pairs.pair_count();
        let mut edges = Vec::with_capacity(3 * factors.len());
        let mut node_edges = vec![Vec::new(); node_count];
        let mut factor_edges = Vec::with_capacity(factors.len());
        for (c, f) in factors.iter().enumerate() {
            let mut members = f.nodes;
            members.sort_unstable();
            let mut ids = [0; 3];
            for (slot, &node) in members.iter().enumerate() {
                ids[slot] = edges.len();
                node_edges[node].push(edges.len());
                edges.push(Edge { factor: c, node });
            }
            factor_edges.push(ids);
        }
        Ok(Self {
            pairs,
            factors,
            edges,
            node_edges,
            factor_edges,
        })
    }

    pub fn participants(&self) -> usize {
        self.pairs.participants()
    }

    pub fn pairs(&self) -> &PairIndexMap {
        &self.pairs
    }

    pub fn node_count(&self) -> usize {
        self.participants() + self.pairs.pair_count()
    }

    pub fn action_nodes(&self) -> std::ops::Range<usize> {
        0..self.participants()
    }

    pub fn relation_nodes(&self) -> std::ops::Range<usize> {
        self.participants()..self.node_count()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn compat_factors(&self) -> impl Iterator<Item = &Factor> {
        self.factors.iter().filter(|f| f.kind == FactorKind::Compat)
    }

    pub fn trans_factors(&self) -> impl Iterator<Item = &Factor> {
        self.factors.iter().filter(|f| f.kind == FactorKind::Trans)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edge ids incident to a variable node.
    pub fn node_edges(&self, node: usize) -> &[usize] {
        &self.node_edges[node]
    }

    /// Edge ids of a factor, ordered by node id.
    pub fn factor_edges(&self, factor: usize) -> &[usize; 3] {
        &self.factor_edges[factor]
    }

    /// Structured-text dump of nodes, factors and edges.
    pub fn dump(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            participants: usize,
            action_nodes: Vec<usize>,
            relation_nodes: Vec<RelationNode>,
            factors: &'a [Factor],
            edges: &'a [Edge],
        }
        #[derive(Serialize)]
        struct RelationNode {
            node: usize,
            pair: (usize, usize),
        }
        let relation_nodes = self
            .pairs
            .pairs()
            .enumerate()
            .map(|(slot, pair)| RelationNode {
                node: self.participants() + slot,
                pair,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&Dump {
            participants: self.participants(),
            action_nodes: self.action_nodes().collect(),
            relation_nodes,
            factors: &self.factors,
            edges: &self.edges,
        })?)
    }
}
