//! Network graphs, mixing matrices and communication strategies.
//!
//! A [`CommMatrix`] is a symmetric doubly stochastic matrix that respects a
//! graph's sparsity pattern; the identity is allowed. A [`MixingMatrix`] is a
//! communication matrix built on a connected graph, so its deflated spectral
//! norm `beta` is strictly below one. A [`CommunicationStrategy`] assigns one
//! communication matrix to each of the four slots of the gradient-tracking
//! update and fixes the number of communication rounds `n_c`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::ops::Deref;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::g17;

/// Row/column sum tolerance for doubly stochastic checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// `beta` values at or below this times `n` are reported as exactly zero.
pub const BETA_ZERO_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("{kind} graph needs at least {min} nodes, got {n}")]
    TooFewNodes { kind: &'static str, min: usize, n: usize },
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("laziness must lie in [0, 1), got {0}")]
    BadLaziness(f64),
    #[error("matrix is {rows}x{cols}, expected a square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is {got}x{got} but the graph has {expected} nodes")]
    SizeMismatch { got: usize, expected: usize },
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("row or column {0} does not sum to one")]
    NotStochastic(usize),
    #[error("negative entry at ({0}, {1})")]
    NegativeEntry(usize, usize),
    #[error("diagonal entry {0} is not positive")]
    NonPositiveDiagonal(usize),
    #[error("nonzero weight at ({0}, {1}) which is not an edge")]
    OffPattern(usize, usize),
    #[error("n_c must be at least 1")]
    ZeroRounds,
    #[error("custom strategy requires four matrices")]
    MissingCustom,
    #[error("communication matrices have different sizes")]
    InconsistentSizes,
    #[error("unknown graph kind '{0}'")]
    UnknownGraphKind(String),
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
}

/// An undirected simple graph on nodes `0..n`.
///
/// Edges are stored normalized as `(min, max)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Cycle,
    Star,
    Complete,
    EdgeList,
}

impl FromStr for GraphKind {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cycle" | "cyclic" | "ring" => Ok(GraphKind::Cycle),
            "star" => Ok(GraphKind::Star),
            "complete" | "full" => Ok(GraphKind::Complete),
            "edges" | "edge_list" | "edgelist" => Ok(GraphKind::EdgeList),
            other => Err(TopologyError::UnknownGraphKind(other.to_string())),
        }
    }
}

/// Builds a graph of the requested kind. `edges` is only read for
/// [`GraphKind::EdgeList`].
pub fn build_graph(kind: GraphKind, n: usize, edges: Option<&[(usize, usize)]>) -> Result<Graph, TopologyError> {
    match kind {
        GraphKind::Cycle => Graph::cycle(n),
        GraphKind::Star => Graph::star(n),
        GraphKind::Complete => Graph::complete(n),
        GraphKind::EdgeList => Graph::from_edges(n, edges.unwrap_or(&[])),
    }
}

impl Graph {
    pub fn cycle(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::TooFewNodes { kind: "cycle", min: 3, n });
        }
        let edges = (0..n).map(|i| normalize(i, (i + 1) % n)).collect();
        Ok(Graph { n, edges })
    }

    /// Star with node 0 as the hub.
    pub fn star(n: usize) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::TooFewNodes { kind: "star", min: 2, n });
        }
        let edges = (1..n).map(|i| (0, i)).collect();
        Ok(Graph { n, edges })
    }

    pub fn complete(n: usize) -> Result<Self, TopologyError> {
        if n < 1 {
            return Err(TopologyError::TooFewNodes {
                kind: "complete",
                min: 1,
                n,
            });
        }
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Ok(Graph { n, edges })
    }

    /// Graph from an explicit edge list. Rejects self-loops and duplicates
    /// (including the same pair given in both orientations).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n < 1 {
            return Err(TopologyError::TooFewNodes {
                kind: "edge-list",
                min: 1,
                n,
            });
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(TopologyError::NodeOutOfRange(i, j, n));
            }
            if i == j {
                return Err(TopologyError::SelfLoop(i));
            }
            if !set.insert(normalize(i, j)) {
                return Err(TopologyError::DuplicateEdge(i, j));
            }
        }
        Ok(Graph { n, edges: set })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&normalize(i, j))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        self.bfs_tree_edges().len() + 1 == self.n
    }

    /// A breadth-first spanning tree rooted at node 0 (a spanning forest of
    /// the component of node 0 when disconnected).
    pub fn spanning_tree(&self) -> Graph {
        Graph {
            n: self.n,
            edges: self.bfs_tree_edges().into_iter().collect(),
        }
    }

    fn bfs_tree_edges(&self) -> Vec<(usize, usize)> {
        if self.n == 0 {
            return Vec::new();
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut tree = Vec::new();
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    tree.push(normalize(u, v));
                    queue.push_back(v);
                }
            }
        }
        tree
    }
}

fn normalize(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// A validated communication matrix together with its deflated spectral norm
/// `beta = ||W - 11^T/n||_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommMatrix {
    w: DMatrix<f64>,
    beta: f64,
}

impl CommMatrix {
    /// Validates symmetry, double stochasticity, nonnegativity and a positive
    /// diagonal. When `graph` is given, off-diagonal weights must vanish on
    /// non-edges.
    pub fn new(w: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self, TopologyError> {
        validate(&w, graph)?;
        let beta = deflated_norm(&w);
        Ok(CommMatrix { w, beta })
    }

    pub fn identity(n: usize) -> Self {
        let w = DMatrix::identity(n, n);
        let beta = if n == 1 { 0.0 } else { 1.0 };
        CommMatrix { w, beta }
    }

    /// The exact averaging matrix `11^T/n` (beta = 0).
    pub fn averaging(n: usize) -> Self {
        CommMatrix {
            w: DMatrix::from_element(n, n, 1.0 / n as f64),
            beta: 0.0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_identity(&self) -> bool {
        self.w == DMatrix::identity(self.n(), self.n())
    }

    /// `||W^p - I||_2 = max_i |1 - lambda_i(W)^p|`.
    pub fn identity_deviation(&self, p: u32) -> f64 {
        let eig = self.w.clone().symmetric_eigenvalues();
        eig.iter().map(|&l| (1.0 - l.powi(p as i32)).abs()).fold(0.0, f64::max)
    }

    /// Writes the matrix as row-major CSV with `%.17g` formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        write_matrix_csv(&self.w, out)
    }
}

/// A communication matrix on a connected graph, with `beta < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    inner: CommMatrix,
    graph: Graph,
}

impl MixingMatrix {
    pub fn new(w: DMatrix<f64>, graph: &Graph) -> Result<Self, TopologyError> {
        if !graph.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        let inner = CommMatrix::new(w, Some(graph))?;
        Ok(MixingMatrix {
            inner,
            graph: graph.clone(),
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn as_comm(&self) -> &CommMatrix {
        &self.inner
    }
}

impl Deref for MixingMatrix {
    type Target = CommMatrix;

    fn deref(&self) -> &CommMatrix {
        &self.inner
    }
}

/// Lazy Metropolis-Hastings weights:
/// `w_ij = (1 - laziness) / (1 + max(deg_i, deg_j))` on edges and the
/// remaining mass on the diagonal.
pub fn metropolis_weights(g: &Graph, laziness: f64) -> Result<MixingMatrix, TopologyError> {
    if !(0.0..1.0).contains(&laziness) {
        return Err(TopologyError::BadLaziness(laziness));
    }
    if !g.is_connected() {
        return Err(TopologyError::Disconnected);
    }
    let n = g.n();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        let wij = (1.0 - laziness) / (1 + deg[i].max(deg[j])) as f64;
        w[(i, j)] = wij;
        w[(j, i)] = wij;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::new(w, g)
}

/// Spectral norm of `W - 11^T/n` for a symmetric doubly stochastic `W`.
pub fn compute_beta(w: &DMatrix<f64>) -> Result<f64, TopologyError> {
    check_square(w)?;
    check_symmetric(w)?;
    check_stochastic(w)?;
    Ok(deflated_norm(w))
}

fn deflated_norm(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let avg = 1.0 / n as f64;
    let deflated = w.map(|v| v - avg);
    let beta = deflated
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.abs())
        .fold(0.0, f64::max)
        .min(1.0);
    // Rounding noise of an exact averaging matrix.
    if beta <= BETA_ZERO_TOL * n as f64 {
        0.0
    } else {
        beta
    }
}

/// `W^p` by repeated multiplication; `W^0 = I`.
pub fn matrix_power(w: &DMatrix<f64>, p: u32) -> Result<DMatrix<f64>, TopologyError> {
    check_square(w)?;
    let n = w.nrows();
    let mut acc = DMatrix::identity(n, n);
    for _ in 0..p {
        acc = &acc * w;
    }
    Ok(acc)
}

fn check_square(w: &DMatrix<f64>) -> Result<(), TopologyError> {
    if w.nrows() != w.ncols() || w.nrows() == 0 {
        return Err(TopologyError::NotSquare {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    Ok(())
}

fn check_symmetric(w: &DMatrix<f64>) -> Result<(), TopologyError> {
    let n = w.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (w[(i, j)] - w[(j, i)]).abs() > STOCHASTIC_TOL {
                return Err(TopologyError::NotSymmetric(i, j));
            }
        }
    }
    Ok(())
}

fn check_stochastic(w: &DMatrix<f64>) -> Result<(), TopologyError> {
    for i in 0..w.nrows() {
        let row: f64 = w.row(i).sum();
        let col: f64 = w.column(i).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(TopologyError::NotStochastic(i));
        }
    }
    Ok(())
}

fn validate(w: &DMatrix<f64>, graph: Option<&Graph>) -> Result<(), TopologyError> {
    check_square(w)?;
    let n = w.nrows();
    if let Some(g) = graph {
        if g.n() != n {
            return Err(TopologyError::SizeMismatch { got: n, expected: g.n() });
        }
    }
    check_symmetric(w)?;
    check_stochastic(w)?;
    for i in 0..n {
        if w[(i, i)] <= 0.0 {
            return Err(TopologyError::NonPositiveDiagonal(i));
        }
        for j in 0..n {
            if w[(i, j)] < 0.0 {
                return Err(TopologyError::NegativeEntry(i, j));
            }
            if let Some(g) = graph {
                if i != j && w[(i, j)] != 0.0 && !g.has_edge(i, j) {
                    return Err(TopologyError::OffPattern(i, j));
                }
            }
        }
    }
    Ok(())
}

/// Writes a dense matrix as row-major CSV, one row per line, `%.17g` values.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> io::Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| g17(m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// The named instantiations of the framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// `(W, I, W, I)`: DIGing / EXTRA family.
    Gta1,
    /// `(W, W, W, I)`: NEXT / SONATA family.
    Gta2,
    /// `(W, W, W, W)`: Aug-DGM / ATC-DIGing family.
    Gta3,
    /// Four independently chosen communication matrices.
    Custom,
}

impl Method {
    pub const NAMED: [Method; 3] = [Method::Gta1, Method::Gta2, Method::Gta3];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gta1 => "GTA1",
            Method::Gta2 => "GTA2",
            Method::Gta3 => "GTA3",
            Method::Custom => "custom",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "gta1" => Ok(Method::Gta1),
            "gta2" => Ok(Method::Gta2),
            "gta3" => Ok(Method::Gta3),
            "custom" => Ok(Method::Custom),
            _ => Err(TopologyError::UnknownMethod(s.trim().to_string())),
        }
    }
}

/// The four communication matrices and the number of communication rounds
/// per outer iteration. Powers `W_i^{n_c}` are computed once on construction.
#[derive(Debug, Clone)]
pub struct CommunicationStrategy {
    method: Method,
    mats: [CommMatrix; 4],
    powered: [DMatrix<f64>; 4],
    identity_slot: [bool; 4],
    n_c: u32,
}

impl CommunicationStrategy {
    pub fn new(method: Method, mats: [CommMatrix; 4], n_c: u32) -> Result<Self, TopologyError> {
        if n_c == 0 {
            return Err(TopologyError::ZeroRounds);
        }
        let n = mats[0].n();
        if mats.iter().any(|m| m.n() != n) {
            return Err(TopologyError::InconsistentSizes);
        }
        let powered = [0, 1, 2, 3].map(|i| matrix_power(mats[i].matrix(), n_c).expect("communication matrices are square"));
        let identity_slot = [0, 1, 2, 3].map(|i| mats[i].is_identity());
        Ok(CommunicationStrategy {
            method,
            mats,
            powered,
            identity_slot,
            n_c,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn n(&self) -> usize {
        self.mats[0].n()
    }

    pub fn n_c(&self) -> u32 {
        self.n_c
    }

    /// Communication matrix of slot `i` in `0..4` (slot 0 is `W_1`).
    pub fn matrix(&self, i: usize) -> &CommMatrix {
        &self.mats[i]
    }

    /// `W_i^{n_c}` for slot `i` in `0..4`.
    pub fn powered(&self, i: usize) -> &DMatrix<f64> {
        &self.powered[i]
    }

    /// Whether slot `i` holds the identity (no communication on that slot).
    pub fn is_identity_slot(&self, i: usize) -> bool {
        self.identity_slot[i]
    }

    /// Base `beta_i` of each slot.
    pub fn betas(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.mats[i].beta())
    }

    /// `beta_i^{n_c}` for each slot.
    pub fn betas_pow(&self) -> [f64; 4] {
        self.betas().map(|b| b.powi(self.n_c as i32))
    }

    /// Number of slots that actually exchange a vector.
    pub fn communicating_slots(&self) -> usize {
        self.identity_slot.iter().filter(|&&id| !id).count()
    }

    /// `||Z_1^{n_c} - I||_2` computed from the spectrum of `W_1`.
    pub fn z1_deviation(&self) -> f64 {
        self.mats[0].identity_deviation(self.n_c)
    }
}

/// Builds one of the named strategies around the mixing matrix `w`, or a
/// custom strategy from four independently validated matrices.
pub fn strategy_for(
    method: Method,
    w: &MixingMatrix,
    n_c: u32,
    custom: Option<[CommMatrix; 4]>,
) -> Result<CommunicationStrategy, TopologyError> {
    let mw = w.as_comm().clone();
    let id = CommMatrix::identity(w.n());
    let mats = match method {
        Method::Gta1 => [mw.clone(), id.clone(), mw, id],
        Method::Gta2 => [mw.clone(), mw.clone(), mw, id],
        Method::Gta3 => [mw.clone(), mw.clone(), mw.clone(), mw],
        Method::Custom => custom.ok_or(TopologyError::MissingCustom)?,
    };
    CommunicationStrategy::new(method, mats, n_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn complete_two_has_single_edge() {
        let g = build_graph(GraphKind::Complete, 2, None).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn cycle_four_edges() {
        let g = Graph::cycle(4).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            assert!(g.has_edge(i, j));
        }
        assert_eq!(g.edge_count(), 4);
    }

    #[test]
    fn star_sixteen_is_hub_centred() {
        let g = Graph::star(16).unwrap();
        assert_eq!(g.edge_count(), 15);
        assert!(g.edges().all(|(i, _)| i == 0));
        assert!(g.is_connected());
    }

    #[test]
    fn generator_size_errors() {
        assert!(matches!(Graph::cycle(2), Err(TopologyError::TooFewNodes { .. })));
        assert!(matches!(Graph::star(1), Err(TopologyError::TooFewNodes { .. })));
        assert!(Graph::complete(0).is_err());
    }

    #[test]
    fn edge_list_rejects_bad_input() {
        assert_eq!(Graph::from_edges(3, &[(1, 1)]), Err(TopologyError::SelfLoop(1)));
        assert_eq!(Graph::from_edges(3, &[(0, 1), (1, 0)]), Err(TopologyError::DuplicateEdge(1, 0)));
        assert!(matches!(Graph::from_edges(3, &[(0, 5)]), Err(TopologyError::NodeOutOfRange(..))));
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(!g.is_connected());
        assert_eq!(metropolis_weights(&g, 0.0).unwrap_err(), TopologyError::Disconnected);
        assert!(metropolis_weights(&Graph::cycle(4).unwrap(), 1.0).is_err());
    }

    #[test]
    fn metropolis_complete_two_is_averaging() {
        let w = metropolis_weights(&Graph::complete(2).unwrap(), 0.0).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_element(2, 2, 0.5));
        assert_abs_diff_eq!(w.beta(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn metropolis_cycle_four_entries() {
        let w = metropolis_weights(&Graph::cycle(4).unwrap(), 0.0).unwrap();
        assert_abs_diff_eq!(w.matrix()[(0, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.matrix()[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(w.matrix()[(0, 2)], 0.0);
    }

    #[test]
    fn star_leaf_self_weight() {
        let w = metropolis_weights(&Graph::star(16).unwrap(), 0.0).unwrap();
        assert_abs_diff_eq!(w.matrix()[(3, 3)], 15.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.beta(), 15.0 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn beta_trivial_cases() {
        assert_eq!(compute_beta(&DMatrix::from_element(5, 5, 0.2)).unwrap(), 0.0);
        assert_abs_diff_eq!(compute_beta(&DMatrix::identity(4, 4)).unwrap(), 1.0);
        assert!(matches!(compute_beta(&DMatrix::zeros(2, 3)), Err(TopologyError::NotSquare { .. })));
        assert!(matches!(
            compute_beta(&DMatrix::from_element(2, 2, 0.3)),
            Err(TopologyError::NotStochastic(_))
        ));
    }

    #[test]
    fn power_zero_and_one() {
        let w = metropolis_weights(&Graph::cycle(5).unwrap(), 0.25).unwrap();
        assert_eq!(matrix_power(w.matrix(), 0).unwrap(), DMatrix::identity(5, 5));
        assert_eq!(&matrix_power(w.matrix(), 1).unwrap(), w.matrix());
        let j = DMatrix::from_element(4, 4, 0.25);
        let j3 = matrix_power(&j, 3).unwrap();
        assert!((j3 - j).abs().max() < 1e-16);
    }

    #[test]
    fn comm_matrix_validation() {
        let g = Graph::cycle(4).unwrap();
        // weight on the non-edge (0, 2)
        let mut w = DMatrix::from_element(4, 4, 0.25);
        assert_eq!(CommMatrix::new(w.clone(), Some(&g)), Err(TopologyError::OffPattern(0, 2)));
        w[(0, 1)] = 0.3;
        assert_eq!(CommMatrix::new(w, None), Err(TopologyError::NotSymmetric(0, 1)));
        let mut z = DMatrix::identity(3, 3);
        z[(0, 0)] = 0.0;
        z[(0, 1)] = 1.0;
        z[(1, 0)] = 1.0;
        z[(1, 1)] = 0.0;
        assert_eq!(CommMatrix::new(z, None), Err(TopologyError::NonPositiveDiagonal(0)));
    }

    #[test]
    fn identity_is_valid_comm_matrix_with_unit_beta() {
        let id = CommMatrix::new(DMatrix::identity(6, 6), Some(&Graph::cycle(6).unwrap())).unwrap();
        assert_eq!(id.beta(), 1.0);
        assert!(id.is_identity());
    }

    #[test]
    fn named_strategies() {
        let w = metropolis_weights(&Graph::cycle(8).unwrap(), 0.0).unwrap();
        let b = w.beta();
        let s1 = strategy_for(Method::Gta1, &w, 1, None).unwrap();
        assert_eq!(s1.betas(), [b, 1.0, b, 1.0]);
        assert_eq!(s1.communicating_slots(), 2);
        let s2 = strategy_for(Method::Gta2, &w, 3, None).unwrap();
        assert_eq!(s2.betas(), [b, b, b, 1.0]);
        assert_eq!(s2.betas_pow()[0], b.powi(3));
        assert!(matches!(
            strategy_for(Method::Custom, &w, 1, None),
            Err(TopologyError::MissingCustom)
        ));
        assert!(matches!(strategy_for(Method::Gta3, &w, 0, None), Err(TopologyError::ZeroRounds)));
    }

    #[test]
    fn gta3_over_averaging_has_zero_betas() {
        let g = Graph::complete(5).unwrap();
        let avg = MixingMatrix::new(DMatrix::from_element(5, 5, 0.2), &g).unwrap();
        let s = strategy_for(Method::Gta3, &avg, 1, None).unwrap();
        assert_eq!(s.betas(), [0.0; 4]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("GTA-3".parse::<Method>().unwrap(), Method::Gta3);
        assert_eq!("gta1".parse::<Method>().unwrap(), Method::Gta1);
        assert!("gta4".parse::<Method>().is_err());
    }

    #[test]
    fn csv_uses_full_precision() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0 / 3.0, 0.5]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.33333333333333331,0.5\n");
    }
}
