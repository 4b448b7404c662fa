//! Spatial contiguity and temporal adjacency, and the graph-Laplacian
//! structure matrices behind the CAR and RW1 priors.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::HashMap;
use std::fmt::Write as _;

/// Undirected contiguity graph over labelled areas.
///
/// Immutable after construction; edges are stored as sorted neighbour
/// lists, so the relation is symmetric by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    labels: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    n_edges: usize,
}

impl AdjacencyGraph {
    /// Builds a graph from labels and an edge list. Edges are undirected;
    /// duplicates collapse. Self-loops and out-of-range endpoints are errors.
    pub fn new(labels: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Domain("graph needs at least one node".into()));
        }
        let mut seen = HashMap::new();
        for (id, label) in labels.iter().enumerate() {
            if seen.insert(label.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate node label `{label}`")));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Format(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Dimension(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let n_edges = neighbors.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Self {
            labels,
            neighbors,
            n_edges,
        })
    }

    /// Parses the labelled-line adjacency format:
    ///
    /// ```text
    /// # comment
    /// A: B, C
    /// B: A
    /// C:
    /// ```
    ///
    /// One node per line, neighbours after the colon. The edge set is
    /// symmetrized: if A lists B, the edge exists even when B does not
    /// list A. Node ids follow order of first appearance (the line order).
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut listed: Vec<(usize, String)> = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((head, tail)) = line.split_once(':') else {
                return Err(Error::Format(format!(
                    "line {}: expected `<label>: <neighbours>`",
                    line_no + 1
                )));
            };
            let label = head.trim();
            if label.is_empty() {
                return Err(Error::Format(format!("line {}: empty label", line_no + 1)));
            }
            if ids.contains_key(label) {
                return Err(Error::Format(format!(
                    "line {}: duplicate node line for `{label}`",
                    line_no + 1
                )));
            }
            let id = labels.len();
            ids.insert(label.to_string(), id);
            labels.push(label.to_string());
            for token in tail.split(',') {
                let nb = token.trim();
                if !nb.is_empty() {
                    listed.push((id, nb.to_string()));
                }
            }
        }
        let mut edges = Vec::with_capacity(listed.len());
        for (from, to_label) in listed {
            let Some(&to) = ids.get(&to_label) else {
                return Err(Error::UnknownLabel(to_label));
            };
            if from == to {
                return Err(Error::Format(format!(
                    "node `{}` lists itself as a neighbour",
                    labels[from]
                )));
            }
            edges.push((from, to));
        }
        Self::new(labels, &edges)
    }

    /// Canonical text form of the graph; `parse` inverts it.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, label) in self.labels.iter().enumerate() {
            let names: Vec<&str> = self.neighbors[i]
                .iter()
                .map(|&j| self.labels[j].as_str())
                .collect();
            let _ = writeln!(out, "{}: {}", label, names.join(", "));
        }
        out
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Undirected edge list with endpoints ordered `(low, high)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Partition of node ids into connected components. Blocks are sorted
    /// internally and ordered by their smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut blocks = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut block = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                block.push(v);
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            block.sort_unstable();
            blocks.push(block);
        }
        blocks
    }

    /// Graph Laplacian `Q = D - W` with binary contiguity weights.
    pub fn structure_matrix(&self) -> StructureMatrix {
        let rank = self.n_nodes() - self.connected_components().len();
        StructureMatrix {
            neighbors: self.neighbors.clone(),
            rank,
        }
    }
}

/// Sparse symmetric graph Laplacian used as the CAR / RW1 structure matrix.
///
/// Row sums are zero by construction and the matrix is positive
/// semi-definite with rank `dim - #components`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMatrix {
    neighbors: Vec<Vec<usize>>,
    rank: usize,
}

impl StructureMatrix {
    pub fn dim(&self) -> usize {
        self.neighbors.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Matrix entry: degree on the diagonal, -1 between neighbours.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.neighbors[i].len() as f64
        } else if self.neighbors[i].binary_search(&j).is_ok() {
            -1.0
        } else {
            0.0
        }
    }

    /// Quadratic form `x' Q x = sum over edges of (x_i - x_j)^2`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector length {} vs structure dim {}",
                x.len(),
                self.dim()
            )));
        }
        let mut q = 0.0;
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    let d = x[i] - x[j];
                    q += d * d;
                }
            }
        }
        Ok(q)
    }

    /// Change in `x' Q x` when coordinate `i` moves from `x[i]` to `new`.
    pub fn quad_form_delta(&self, x: &[f64], i: usize, new: f64) -> f64 {
        let old = x[i];
        let mut d = 0.0;
        for &j in &self.neighbors[i] {
            let a = new - x[j];
            let b = old - x[j];
            d += a * a - b * b;
        }
        d
    }

    /// Dense materialization, mainly for tests and small-matrix oracles.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.dim();
        let mut m = Array2::zeros((n, n));
        for (i, list) in self.neighbors.iter().enumerate() {
            m[[i, i]] = list.len() as f64;
            for &j in list {
                m[[i, j]] = -1.0;
            }
        }
        m
    }
}

/// Path-graph Laplacian for first-order random-walk smoothing over
/// `n_periods` ordered periods. Tridiagonal with diagonal `1, 2, ..., 2, 1`.
pub fn rw1_structure(n_periods: usize) -> Result<StructureMatrix> {
    if n_periods < 2 {
        return Err(Error::Domain(format!(
            "rw1 structure needs at least 2 periods, got {n_periods}"
        )));
    }
    let mut neighbors = vec![Vec::new(); n_periods];
    for j in 0..n_periods - 1 {
        neighbors[j].push(j + 1);
        neighbors[j + 1].push(j);
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    Ok(StructureMatrix {
        neighbors,
        rank: n_periods - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Eigenvalue-count rank oracle on the dense Laplacian.
    fn rank_by_eigenvalues(q: &StructureMatrix) -> usize {
        let n = q.dim();
        let dense = q.to_dense();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| dense[[i, j]]);
        let eig = m.symmetric_eigen();
        eig.eigenvalues.iter().filter(|&&e| e.abs() > 1e-9).count()
    }

    /// Brute-force transitive-closure component oracle.
    fn components_by_closure(g: &AdjacencyGraph) -> Vec<Vec<usize>> {
        let n = g.n_nodes();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
        }
        for (a, b) in g.edges() {
            reach[a][b] = true;
            reach[b][a] = true;
        }
        loop {
            let mut changed = false;
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if reach[i][k] && reach[k][j] && !reach[i][j] {
                            reach[i][j] = true;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut assigned = vec![false; n];
        let mut blocks = Vec::new();
        for i in 0..n {
            if assigned[i] {
                continue;
            }
            let block: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
            for &j in &block {
                assigned[j] = true;
            }
            blocks.push(block);
        }
        blocks
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> AdjacencyGraph {
        let labels: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        AdjacencyGraph::new(labels, &edges).unwrap()
    }

    #[test]
    fn parse_basic() {
        let g = AdjacencyGraph::parse("A: B\nB: A\nC:").unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert!(g.neighbors(2).is_empty());
    }

    #[test]
    fn parse_symmetrizes_one_directional_listings() {
        let g = AdjacencyGraph::parse("A: B\nB:\n").unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let g = AdjacencyGraph::parse("# contiguity\n\nA: B\nB:\n").unwrap();
        assert_eq!(g.n_nodes(), 2);
    }

    #[test]
    fn parse_rejects_duplicate_node_line() {
        let err = AdjacencyGraph::parse("A: B\nB:\nA:").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn parse_rejects_undefined_neighbor() {
        let err = AdjacencyGraph::parse("A: B\n").unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(l) if l == "B"));
    }

    #[test]
    fn parse_rejects_self_loop() {
        let err = AdjacencyGraph::parse("A: A\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn iran_example_file_has_connected_rank_29() {
        let text = include_str!("../data/iran_adjacency.txt");
        let g = AdjacencyGraph::parse(text).unwrap();
        assert_eq!(g.n_nodes(), 30);
        assert_eq!(g.connected_components().len(), 1);
        let q = g.structure_matrix();
        assert_eq!(q.rank(), 29);
        assert_eq!(rank_by_eigenvalues(&q), 29);
    }

    #[test]
    fn path_laplacian_matches_hand_value() {
        let g = AdjacencyGraph::parse("A: B\nB: A, C\nC: B").unwrap();
        let q = g.structure_matrix();
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.entry(i, j), expect[i][j]);
            }
        }
        assert_eq!(q.rank(), 2);
    }

    #[test]
    fn empty_graph_laplacian_is_zero_with_rank_zero() {
        let g = AdjacencyGraph::new(vec!["A".into(), "B".into()], &[]).unwrap();
        let q = g.structure_matrix();
        assert_eq!(q.to_dense(), Array2::<f64>::zeros((2, 2)));
        assert_eq!(q.rank(), 0);
    }

    #[test]
    fn laplacian_matches_dense_degree_minus_adjacency_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, 6, 0.5);
        let q = g.structure_matrix().to_dense();
        // independent dense construction: D - W
        let n = g.n_nodes();
        let mut oracle = Array2::zeros((n, n));
        for (a, b) in g.edges() {
            oracle[[a, b]] = -1.0;
            oracle[[b, a]] = -1.0;
            oracle[[a, a]] += 1.0;
            oracle[[b, b]] += 1.0;
        }
        assert_eq!(q, oracle);
    }

    #[test]
    fn rw1_small_cases() {
        let r = rw1_structure(2).unwrap();
        assert_eq!(r.to_dense(), ndarray::arr2(&[[1.0, -1.0], [-1.0, 1.0]]));

        let r = rw1_structure(5).unwrap();
        let diag: Vec<f64> = (0..5).map(|i| r.entry(i, i)).collect();
        assert_eq!(diag, vec![1.0, 2.0, 2.0, 2.0, 1.0]);
        assert_eq!(r.rank(), 4);

        assert!(matches!(rw1_structure(1), Err(Error::Domain(_))));
    }

    #[test]
    fn rw1_equals_explicit_path_graph() {
        for n in 2..8 {
            let labels: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
            let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            let g = AdjacencyGraph::new(labels, &edges).unwrap();
            assert_eq!(rw1_structure(n).unwrap(), g.structure_matrix());
        }
    }

    #[test]
    fn components_small_cases() {
        let path = AdjacencyGraph::parse("A: B\nB: C\nC:").unwrap();
        assert_eq!(path.connected_components(), vec![vec![0, 1, 2]]);

        let split = AdjacencyGraph::parse("A: B\nB:\nC:").unwrap();
        assert_eq!(split.connected_components(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn components_agree_with_transitive_closure_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 8, 0.2);
            assert_eq!(g.connected_components(), components_by_closure(&g));
        }
    }

    #[test]
    fn rank_plus_components_equals_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let n = rng.random_range(2..=12);
            let g = random_graph(&mut rng, n, 0.25);
            let q = g.structure_matrix();
            assert_eq!(q.rank() + g.connected_components().len(), n);
            assert_eq!(rank_by_eigenvalues(&q), q.rank());
        }
    }

    #[test]
    fn quad_form_delta_matches_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 7, 0.4);
        let q = g.structure_matrix();
        let x: Vec<f64> = (0..7).map(|_| rng.random::<f64>() - 0.5).collect();
        for i in 0..7 {
            let new = rng.random::<f64>() * 2.0 - 1.0;
            let mut y = x.clone();
            y[i] = new;
            let direct = q.quad_form(&y).unwrap() - q.quad_form(&x).unwrap();
            assert_abs_diff_eq!(q.quad_form_delta(&x, i, new), direct, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn row_sums_are_exactly_zero(n in 2usize..10, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 0.4);
            let dense = g.structure_matrix().to_dense();
            for i in 0..n {
                let row_sum: f64 = (0..n).map(|j| dense[[i, j]]).sum();
                prop_assert_eq!(row_sum, 0.0);
            }
        }

        #[test]
        fn parse_serialize_roundtrip(n in 1usize..9, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 0.4);
            let text = g.serialize();
            let back = AdjacencyGraph::parse(&text).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
