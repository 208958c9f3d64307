//! Weighted undirected communication graph over the agents' dual copies.
//!
//! The graph carries the consensus dynamics of the local multipliers: every
//! iteration applies the weighted Laplacian blockwise to stacked per-node
//! vectors. Construction validates the structural requirements once
//! (no self-loops, positive weights, connectivity), so the apply path can
//! stay check-free.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("edge ({0}, {1}) references a node out of range (node count {2})")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) has non-positive weight {2}")]
    NonPositiveWeight(usize, usize, f64),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("edge list line {0} is malformed: {1}")]
    Parse(usize, String),
}

/// Undirected weighted graph with precomputed adjacency.
#[derive(Clone, Debug)]
pub struct DualGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
    neighbors: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
}

impl DualGraph {
    /// Builds and validates a graph from an undirected edge list.
    ///
    /// Edges are `(i, j, w)` with `i != j` and `w > 0`; each unordered pair
    /// may appear once. The graph must be connected over all `node_count`
    /// nodes. A single-node graph with no edges is allowed.
    pub fn from_edges(
        node_count: usize,
        edges: &[(usize, usize, f64)],
    ) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut neighbors = vec![Vec::new(); node_count];
        let mut stored = Vec::with_capacity(edges.len());
        for &(i, j, w) in edges {
            if i >= node_count || j >= node_count {
                return Err(GraphError::NodeOutOfRange(i, j, node_count));
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(GraphError::NonPositiveWeight(i, j, w));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
            neighbors[i].push((j, w));
            neighbors[j].push((i, w));
            stored.push((key.0, key.1, w));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(j, _)| j);
        }
        stored.sort_by_key(|&(i, j, _)| (i, j));
        let degrees: Vec<f64> = neighbors
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();
        let graph = Self {
            node_count,
            edges: stored,
            neighbors,
            degrees,
        };
        if !graph.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(graph)
    }

    /// Cycle over `0..n` plus extra chord edges, all with unit weights.
    pub fn cycle_with_chords(n: usize, chords: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        if n == 2 {
            edges.push((0, 1, 1.0));
        } else if n > 2 {
            for i in 0..n {
                edges.push((i, (i + 1) % n, 1.0));
            }
        }
        for &(i, j) in chords {
            edges.push((i, j, 1.0));
        }
        Self::from_edges(n, &edges)
    }

    fn is_connected(&self) -> bool {
        let mut visited = vec![false; self.node_count];
        let mut stack = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &(j, _) in &self.neighbors[i] {
                if !visited[j] {
                    visited[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.node_count
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Weighted degree of node `i`.
    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    /// Maximum weighted degree d* over all nodes.
    pub fn max_weighted_degree(&self) -> f64 {
        self.degrees.iter().fold(0.0, |acc, &d| acc.max(d))
    }

    /// Applies the blockwise Laplacian: `out_i = Σ_j w_ij (v_i - v_j)` where
    /// each node holds a contiguous block of `block` entries in `v`.
    pub fn laplacian_apply(&self, block: usize, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.node_count * block);
        assert_eq!(out.len(), v.len());
        for i in 0..self.node_count {
            let oi = i * block;
            let vi = &v[oi..oi + block];
            let slot = &mut out[oi..oi + block];
            for (s, &x) in slot.iter_mut().zip(vi) {
                *s = self.degrees[i] * x;
            }
            for &(j, w) in &self.neighbors[i] {
                let vj = &v[j * block..j * block + block];
                for (s, &y) in slot.iter_mut().zip(vj) {
                    *s -= w * y;
                }
            }
        }
    }

    /// Dense node-level Laplacian, for verification and eigen analysis.
    pub fn laplacian_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.node_count;
        let mut l = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] = self.degrees[i];
            for &(j, w) in &self.neighbors[i] {
                l[(i, j)] = -w;
            }
        }
        l
    }

    /// Parses a `i j weight` edge-list document (0-based node ids, one edge
    /// per line, `#` starts a comment). The node count is explicit so that
    /// isolated trailing nodes are representable (and rejected as
    /// disconnected).
    pub fn parse_edge_list(node_count: usize, text: &str) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            fn parse(part: Option<&str>, lineno: usize) -> Result<&str, GraphError> {
                part.ok_or_else(|| GraphError::Parse(lineno + 1, "expected `i j weight`".into()))
            }
            let i: usize = parse(parts.next(), lineno)?
                .parse()
                .map_err(|e| GraphError::Parse(lineno + 1, format!("bad node id: {e}")))?;
            let j: usize = parse(parts.next(), lineno)?
                .parse()
                .map_err(|e| GraphError::Parse(lineno + 1, format!("bad node id: {e}")))?;
            let w: f64 = parse(parts.next(), lineno)?
                .parse()
                .map_err(|e| GraphError::Parse(lineno + 1, format!("bad weight: {e}")))?;
            if parts.next().is_some() {
                return Err(GraphError::Parse(lineno + 1, "trailing tokens".into()));
            }
            edges.push((i, j, w));
        }
        Self::from_edges(node_count, &edges)
    }

    /// Serializes the edge list in the `i j weight` text format.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(i, j, w) in &self.edges {
            out.push_str(&format!("{i} {j} {w}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_laplacian_matches_hand_values() {
        let g = DualGraph::cycle_with_chords(3, &[]).unwrap();
        let l = g.laplacian_dense();
        for i in 0..3 {
            assert_abs_diff_eq!(l[(i, i)], 2.0);
            for j in 0..3 {
                if i != j {
                    assert_abs_diff_eq!(l[(i, j)], -1.0);
                }
            }
        }
        assert_abs_diff_eq!(g.max_weighted_degree(), 2.0);
    }

    #[test]
    fn two_node_path_has_eigenvalues_zero_and_two() {
        let g = DualGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let eig = g.laplacian_dense().symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(vals[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn twenty_cycle_with_chords_degree_profile() {
        let g = DualGraph::cycle_with_chords(20, &[(2, 15), (6, 13)]).unwrap();
        assert_abs_diff_eq!(g.max_weighted_degree(), 3.0);
        let mut deg3 = Vec::new();
        for i in 0..20 {
            if g.degree(i) == 3.0 {
                deg3.push(i);
            } else {
                assert_abs_diff_eq!(g.degree(i), 2.0);
            }
        }
        assert_eq!(deg3, vec![2, 6, 13, 15]);
    }

    #[test]
    fn star_graph_max_degree() {
        let edges: Vec<_> = (1..5).map(|j| (0usize, j, 1.0)).collect();
        let g = DualGraph::from_edges(5, &edges).unwrap();
        assert_abs_diff_eq!(g.max_weighted_degree(), 4.0);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let err = DualGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap_err();
        assert_eq!(err, GraphError::Disconnected);
    }

    #[test]
    fn self_loop_rejected() {
        let err = DualGraph::from_edges(2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap_err();
        assert_eq!(err, GraphError::SelfLoop(0));
    }

    #[test]
    fn duplicate_edge_rejected() {
        let err = DualGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 2.0)]).unwrap_err();
        assert_eq!(err, GraphError::DuplicateEdge(0, 1));
    }

    #[test]
    fn laplacian_kills_consensus_vectors() {
        let g = DualGraph::cycle_with_chords(20, &[(2, 15), (6, 13)]).unwrap();
        let v = vec![3.25; 20 * 4];
        let mut out = vec![1.0; 20 * 4];
        g.laplacian_apply(4, &v, &mut out);
        assert_abs_diff_eq!(crate::linalg::norm_inf(&out), 0.0);
    }

    #[test]
    fn laplacian_apply_matches_dense_kronecker() {
        let g = DualGraph::cycle_with_chords(3, &[]).unwrap();
        let block = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..3 * block)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let mut out = vec![0.0; v.len()];
        g.laplacian_apply(block, &v, &mut out);

        let l = g.laplacian_dense();
        let mut expected = vec![0.0; v.len()];
        for i in 0..3 {
            for b in 0..block {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += l[(i, j)] * v[j * block + b];
                }
                expected[i * block + b] = acc;
            }
        }
        for (a, e) in out.iter().zip(&expected) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn edge_list_roundtrip() {
        let g = DualGraph::cycle_with_chords(5, &[(0, 2)]).unwrap();
        let text = g.to_edge_list();
        let g2 = DualGraph::parse_edge_list(5, &text).unwrap();
        assert_eq!(g.edges(), g2.edges());
    }

    #[test]
    fn edge_list_parse_error_carries_line() {
        let err = DualGraph::parse_edge_list(3, "0 1 1.0\n1 2\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse(2, _)));
    }

    #[test]
    fn consensus_iff_laplacian_kernel() {
        // On a connected graph the Laplacian kernel is exactly the
        // consensus subspace, so any disagreement must show up in the norm.
        let g = DualGraph::cycle_with_chords(6, &[(1, 4)]).unwrap();
        let mut v = vec![2.0; 6];
        let mut out = vec![0.0; 6];
        g.laplacian_apply(1, &v, &mut out);
        assert_abs_diff_eq!(crate::linalg::norm2(&out), 0.0);
        v[3] += 1e-6;
        g.laplacian_apply(1, &v, &mut out);
        assert!(crate::linalg::norm2(&out) > 1e-7);
    }

    proptest! {
        #[test]
        fn laplacian_is_positive_semidefinite(values in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let g = DualGraph::cycle_with_chords(12, &[(3, 9)]).unwrap();
            let mut out = vec![0.0; 24];
            g.laplacian_apply(2, &values, &mut out);
            let quad = crate::linalg::dot(&out, &values);
            prop_assert!(quad >= -1e-9);
        }

        #[test]
        fn laplacian_rows_sum_to_zero(n in 3usize..12) {
            let g = DualGraph::cycle_with_chords(n, &[]).unwrap();
            let l = g.laplacian_dense();
            for i in 0..n {
                let sum: f64 = (0..n).map(|j| l[(i, j)]).sum();
                prop_assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn laplacian_cocoercive_with_inverse_double_degree() {
        // <Lv, v> >= ||Lv||^2 / (2 d*) holds because the spectrum lies in
        // [0, 2 d*]; exercised on random vectors over the benchmark topology.
        let g = DualGraph::cycle_with_chords(20, &[(2, 15), (6, 13)]).unwrap();
        let bound = 1.0 / (2.0 * g.max_weighted_degree());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut lv = vec![0.0; 20];
            g.laplacian_apply(1, &v, &mut lv);
            let lhs = crate::linalg::dot(&lv, &v);
            let rhs = bound * crate::linalg::dot(&lv, &lv);
            assert!(lhs >= rhs - 1e-9, "cocoercivity violated: {lhs} < {rhs}");
        }
    }
}
