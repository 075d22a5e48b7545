//! Network topologies: construction, random generators, centrality and
//! ranking of candidate observation subsets.
//!
//! Nodes are indexed from 0 in the library API. Entry `(j, k)` of the
//! adjacency matrix is the weight with which node `k` influences node `j`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    adjacency: DMatrix<f64>,
    directed: bool,
}

impl Network {
    /// Validates and wraps an adjacency matrix.
    ///
    /// The matrix must be square, non-empty, finite, have a zero diagonal and,
    /// when `directed` is false, be exactly symmetric.
    pub fn new(adjacency: DMatrix<f64>, directed: bool) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::InvalidNetwork("network has no nodes".into()));
        }
        if adjacency.ncols() != n {
            return Err(Error::InvalidNetwork(format!(
                "adjacency is {}x{}, expected square",
                n,
                adjacency.ncols()
            )));
        }
        for j in 0..n {
            if adjacency[(j, j)] != 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "nonzero diagonal entry at node {j}"
                )));
            }
            for k in 0..n {
                let w = adjacency[(j, k)];
                if !w.is_finite() {
                    return Err(Error::InvalidNetwork(format!(
                        "non-finite weight at ({j}, {k})"
                    )));
                }
                if !directed && w != adjacency[(k, j)] {
                    return Err(Error::InvalidNetwork(format!(
                        "undirected adjacency is not symmetric at ({j}, {k})"
                    )));
                }
            }
        }
        Ok(Self {
            adjacency,
            directed,
        })
    }

    /// Builds a 0/1 network from an edge list. For directed networks an edge
    /// `(from, to)` means `from` influences `to`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], directed: bool) -> Result<Self> {
        let mut a = DMatrix::zeros(n, n);
        for &(from, to) in edges {
            if from >= n {
                return Err(Error::UnknownNode(from));
            }
            if to >= n {
                return Err(Error::UnknownNode(to));
            }
            if from == to {
                return Err(Error::InvalidNetwork(format!("self-loop at node {from}")));
            }
            a[(to, from)] = 1.0;
            if !directed {
                a[(from, to)] = 1.0;
            }
        }
        Self::new(a, directed)
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(n, n), false)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
        Self::from_edges(n, &edges, false)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for j in 0..n {
            for k in (j + 1)..n {
                edges.push((j, k));
            }
        }
        Self::from_edges(n, &edges, false)
    }

    /// Star with node 0 at the center.
    pub fn star(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|k| (0, k)).collect();
        Self::from_edges(n, &edges, false)
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Number of nonzero couplings; undirected pairs count once.
    pub fn edge_count(&self) -> usize {
        let nnz = self.adjacency.iter().filter(|w| **w != 0.0).count();
        if self.directed {
            nnz
        } else {
            nnz / 2
        }
    }

    /// Nodes that `v` influences directly.
    fn out_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(move |&u| self.adjacency[(u, v)] != 0.0)
    }

    /// Hop distances from `source` along the direction of influence;
    /// `None` for unreachable nodes.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap();
            for u in self.out_neighbors(v) {
                if dist[u].is_none() {
                    dist[u] = Some(dv + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        (0..self.n()).all(|v| self.hop_distances(v).iter().all(Option::is_some))
    }

    /// Parses the plain-text matrix format: the first non-blank line holds
    /// the node count, followed by one whitespace-separated row per line.
    /// Lines starting with `#` are ignored.
    pub fn parse(text: &str, directed: bool) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty adjacency file".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| Error::Parse(format!("bad node count `{header}`")))?;
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing row {}", j + 1)))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad entry `{t}` in row {}", j + 1)))
                })
                .collect::<Result<_>>()?;
            if row.len() != n {
                return Err(Error::Parse(format!(
                    "row {} has {} entries, expected {n}",
                    j + 1,
                    row.len()
                )));
            }
            for (k, w) in row.into_iter().enumerate() {
                a[(j, k)] = w;
            }
        }
        if lines.next().is_some() {
            return Err(Error::Parse("trailing rows after adjacency matrix".into()));
        }
        Self::new(a, directed)
    }

    pub fn read_file(path: &Path, directed: bool) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, directed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n());
        for j in 0..self.n() {
            let row: Vec<String> = (0..self.n())
                .map(|k| format!("{}", self.adjacency[(j, k)]))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

/// G(n, p): every unordered pair is an edge independently with probability `p`.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Network> {
    erdos_renyi_draw(n, p, seed, 0)
}

/// Draw `index` of the G(n, p) sequence for `seed`; index 0 is [`erdos_renyi`].
fn erdos_renyi_draw(n: usize, p: f64, seed: u64, index: u64) -> Result<Network> {
    if n == 0 {
        return Err(Error::InvalidArgument("erdos_renyi needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "edge probability {p} outside [0, 1]"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Graph, index);
    let mut edges = Vec::new();
    for j in 0..n {
        for k in (j + 1)..n {
            if rng.random_bool(p) {
                edges.push((j, k));
            }
        }
    }
    Network::from_edges(n, &edges, false)
}

/// Redraws G(n, p) on successive sub-streams until the result is connected.
/// Returns the network and the number of rejected draws.
pub fn erdos_renyi_connected(
    n: usize,
    p: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<(Network, usize)> {
    for attempt in 0..max_attempts {
        let net = erdos_renyi_draw(n, p, seed, attempt as u64)?;
        if net.is_connected() {
            return Ok((net, attempt));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no connected G({n}, {p}) within {max_attempts} draws"
    )))
}

/// Edge probability giving G(n, p) the same expected edge count as a network
/// with `edges` edges.
pub fn density_matched_p(n: usize, edges: usize) -> f64 {
    let pairs = n * n.saturating_sub(1) / 2;
    if pairs == 0 {
        0.0
    } else {
        (edges as f64 / pairs as f64).min(1.0)
    }
}

/// Edge count of [`scale_free`] output: `C(m, 2) + m (n - m)`.
pub fn scale_free_edge_count(n: usize, m: usize) -> usize {
    m * m.saturating_sub(1) / 2 + m * (n - m)
}

/// Barabási–Albert preferential attachment starting from an `m`-node clique.
/// Each added node links to `m` distinct existing nodes chosen with
/// probability proportional to their current degree.
pub fn scale_free(n: usize, m: usize, seed: u64) -> Result<Network> {
    if m == 0 || m >= n {
        return Err(Error::InvalidArgument(format!(
            "scale_free needs n > m >= 1, got n = {n}, m = {m}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Graph, 0);
    let mut edges = Vec::with_capacity(scale_free_edge_count(n, m));
    // Each edge endpoint appears once here, so uniform sampling from it is
    // degree-proportional sampling.
    let mut endpoints: Vec<usize> = Vec::new();
    for j in 0..m {
        for k in (j + 1)..m {
            edges.push((j, k));
            endpoints.extend([j, k]);
        }
    }
    for v in m..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = if endpoints.is_empty() {
                rng.random_range(0..v)
            } else {
                endpoints[rng.random_range(0..endpoints.len())]
            };
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    Network::from_edges(n, &edges, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centrality {
    Degree,
    Closeness,
}

/// Per-node centrality scores.
///
/// Degree counts nonzero entries of the node's adjacency row. Closeness is
/// `(n - 1) / sum of hop distances to every other node`; it needs every node
/// reachable and reports the first unreachable pair otherwise.
pub fn centrality(net: &Network, metric: Centrality) -> Result<Vec<f64>> {
    let n = net.n();
    match metric {
        Centrality::Degree => Ok((0..n)
            .map(|j| {
                net.adjacency
                    .row(j)
                    .iter()
                    .filter(|w| **w != 0.0)
                    .count() as f64
            })
            .collect()),
        Centrality::Closeness => {
            if n == 1 {
                return Ok(vec![0.0]);
            }
            (0..n)
                .map(|v| {
                    let mut total = 0usize;
                    for (u, d) in net.hop_distances(v).into_iter().enumerate() {
                        total += d.ok_or(Error::Disconnected { from: v, to: u })?;
                    }
                    Ok((n - 1) as f64 / total as f64)
                })
                .collect()
        }
    }
}

/// Sorts nodes by descending score (ties by ascending index) and cuts the
/// order into consecutive groups of `group_size`; a shorter remainder group
/// comes last.
pub fn rank_subsets(net: &Network, metric: Centrality, group_size: usize) -> Result<Vec<Vec<usize>>> {
    if group_size == 0 || group_size > net.n() {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} must be in 1..={}",
            net.n()
        )));
    }
    let scores = centrality(net, metric)?;
    let mut order: Vec<usize> = (0..net.n()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order.chunks(group_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erdos_renyi_extremes() {
        assert_eq!(erdos_renyi(5, 0.0, 1).unwrap().edge_count(), 0);
        assert_eq!(erdos_renyi(5, 1.0, 1).unwrap().edge_count(), 10);
        assert!(erdos_renyi(5, 1.5, 1).is_err());
        assert!(erdos_renyi(5, -0.1, 1).is_err());
        assert!(erdos_renyi(0, 0.5, 1).is_err());
    }

    #[test]
    fn scale_free_edge_counts() {
        let tri = scale_free(3, 2, 9).unwrap();
        assert_eq!(tri.edge_count(), 3);
        assert_eq!(tri, Network::complete(3).unwrap());
        for seed in 0..20 {
            let net = scale_free(20, 2, seed).unwrap();
            assert_eq!(net.edge_count(), 37);
            assert!(net.is_connected());
        }
        assert_eq!(scale_free(10, 1, 3).unwrap().edge_count(), 9);
        assert!(scale_free(5, 0, 1).is_err());
        assert!(scale_free(5, 5, 1).is_err());
    }

    #[test]
    fn path_centralities() {
        let p = Network::path(3).unwrap();
        assert_eq!(centrality(&p, Centrality::Degree).unwrap(), vec![1.0, 2.0, 1.0]);
        let c = centrality(&p, Centrality::Closeness).unwrap();
        let expected = [2.0 / 3.0, 1.0, 2.0 / 3.0];
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let k4 = centrality(&Network::complete(4).unwrap(), Centrality::Closeness).unwrap();
        assert!(k4.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn closeness_reports_unreachable_pair() {
        let net = Network::from_edges(3, &[(0, 1)], false).unwrap();
        match centrality(&net, Centrality::Closeness) {
            Err(Error::Disconnected { from: 0, to: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ranking_ties_and_hubs() {
        let k4 = Network::complete(4).unwrap();
        assert_eq!(
            rank_subsets(&k4, Centrality::Degree, 2).unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
        let star = Network::star(5).unwrap();
        let groups = rank_subsets(&star, Centrality::Degree, 2).unwrap();
        assert!(groups[0].contains(&0));
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[2].len(), 1);
        assert!(rank_subsets(&star, Centrality::Degree, 0).is_err());
        assert!(rank_subsets(&star, Centrality::Degree, 6).is_err());
    }

    #[test]
    fn rejects_bad_matrices() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = 1.0;
        assert!(Network::new(a.clone(), false).is_err());
        assert!(Network::new(a, true).is_ok());
        let mut d = DMatrix::zeros(2, 2);
        d[(0, 0)] = 1.0;
        assert!(Network::new(d, true).is_err());
        assert!(Network::new(DMatrix::zeros(2, 3), true).is_err());
    }

    #[test]
    fn text_format_roundtrip() {
        let net = scale_free(8, 2, 4).unwrap();
        let back = Network::parse(&net.to_text(), false).unwrap();
        assert_eq!(net, back);
        assert!(Network::parse("2\n0 1\n", false).is_err());
        assert!(Network::parse("2\n0 1\n1 x\n", false).is_err());
    }

    #[test]
    fn directed_hops_follow_influence() {
        // 0 -> 1 -> 2
        let net = Network::from_edges(3, &[(0, 1), (1, 2)], true).unwrap();
        assert_eq!(net.hop_distances(0), vec![Some(0), Some(1), Some(2)]);
        assert_eq!(net.hop_distances(2), vec![None, None, Some(0)]);
        assert_eq!(net.adjacency()[(1, 0)], 1.0);
    }

    #[test]
    fn connected_draws_of_nearby_seeds_differ() {
        // Sparse enough that most draws are rejected.
        let p = density_matched_p(20, scale_free_edge_count(20, 2));
        let nets: Vec<Network> = (1..=4).map(|s| erdos_renyi_connected(20, p, s, 1000).unwrap().0).collect();
        for j in 0..nets.len() {
            for k in (j + 1)..nets.len() {
                assert_ne!(nets[j].adjacency(), nets[k].adjacency(), "seeds {} and {}", j + 1, k + 1);
            }
        }
    }
}
