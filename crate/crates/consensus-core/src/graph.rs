//! Weighted undirected graphs, Laplacian and incidence construction, and the
//! spectral quantities (lambda_2, lambda_N, modal bases) that every
//! robustness condition consumes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Eigenvalues below this magnitude count as the structural zero mode.
pub const TOL_ZERO: f64 = 1e-9;

/// Errors raised by graph validation and spectral computation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least two nodes, got {0}")]
    TooSmall(usize),
    #[error("edge ({i}, {j}) references a node outside 0..{node_count}")]
    IndexOutOfRange { i: usize, j: usize, node_count: usize },
    #[error("self loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) listed more than once")]
    DuplicateEdge(usize, usize),
    #[error("edge ({i}, {j}) has non-positive weight {w}")]
    NonPositiveWeight { i: usize, j: usize, w: f64 },
    #[error("graph is not connected: node {0} is unreachable from node 0")]
    Disconnected(usize),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |L[{i},{j}] - L[{j},{i}]| = {deviation:e}")]
    NotSymmetric { i: usize, j: usize, deviation: f64 },
    #[error("algebraic connectivity is numerically zero (lambda_2 = {lambda2:e}); matrix is not the Laplacian of a connected graph")]
    ZeroAlgebraicConnectivity { lambda2: f64 },
}

/// Undirected graph with strictly positive edge weights.
///
/// Edges are unordered pairs; each pair may appear at most once and the graph
/// must be connected for any of the spectral machinery to apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedGraph {
    pub node_count: usize,
    /// Edge list as (i, j, weight) with 0-based node indices.
    pub edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self, GraphError> {
        let g = WeightedGraph { node_count, edges };
        g.validate()?;
        Ok(g)
    }

    /// Checks the structural invariants: index ranges, no self loops or
    /// duplicate pairs, positive weights, and BFS connectivity.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.node_count < 2 {
            return Err(GraphError::TooSmall(self.node_count));
        }
        let n = self.node_count;
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, w) in &self.edges {
            if i >= n || j >= n {
                return Err(GraphError::IndexOutOfRange { i, j, node_count: n });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
            if !(w > 0.0) {
                return Err(GraphError::NonPositiveWeight { i, j, w });
            }
        }
        // BFS reachability from node 0; cheaper and clearer than waiting for
        // the eigensolver to report lambda_2 = 0.
        let adj = adjacency_lists(self);
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(v) = queue.pop_front() {
            for &(u, _) in &adj[v] {
                if !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
        if let Some(unreached) = visited.iter().position(|v| !v) {
            return Err(GraphError::Disconnected(unreached));
        }
        Ok(())
    }
}

/// Neighbor lists with weights, indexed by node.
pub fn adjacency_lists(g: &WeightedGraph) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); g.node_count];
    for &(i, j, w) in &g.edges {
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    adj
}

/// Graph Laplacian L = H - A: degree on the diagonal, minus the weight off it.
///
/// Expects a validated graph; row sums are zero and the matrix is symmetric
/// by construction.
pub fn laplacian(g: &WeightedGraph) -> DMatrix<f64> {
    let n = g.node_count;
    let mut l = DMatrix::zeros(n, n);
    for &(i, j, w) in &g.edges {
        l[(i, i)] += w;
        l[(j, j)] += w;
        l[(i, j)] -= w;
        l[(j, i)] -= w;
    }
    l
}

/// Incidence factorization L = D W D^T.
///
/// Columns of D follow the edge list order. Orientation is fixed: the smaller
/// node index is the head (+1), the larger the tail (-1). L is invariant
/// under the choice.
pub fn incidence_factorization(g: &WeightedGraph) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = g.node_count;
    let m = g.edges.len();
    let mut d = DMatrix::zeros(n, m);
    let mut w = DMatrix::zeros(m, m);
    for (k, &(i, j, wk)) in g.edges.iter().enumerate() {
        let (head, tail) = (i.min(j), i.max(j));
        d[(head, k)] = 1.0;
        d[(tail, k)] = -1.0;
        w[(k, k)] = wk;
    }
    (d, w)
}

/// Mean-removal projector M = I - (1/N) 11^T.
pub fn mean_removal_projector(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let base = if i == j { 1.0 } else { 0.0 };
        base - 1.0 / n as f64
    })
}

/// Spectral data of a graph Laplacian.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    /// Eigenvalues in ascending order; the first is the structural zero.
    pub eigenvalues: Vec<f64>,
    /// Second smallest eigenvalue (algebraic connectivity).
    pub lambda2: f64,
    /// Largest eigenvalue.
    pub lambda_n: f64,
    /// Orthogonal matrix U of eigenvectors, columns ordered by eigenvalue.
    pub modal_basis: DMatrix<f64>,
    /// Columns 2..N of U; satisfies Y^T Y = I and Y Y^T = M.
    pub reduced_basis: DMatrix<f64>,
}

impl LaplacianSpectrum {
    /// Eigenvalues of the non-zero modes, ascending: lambda_2 ..= lambda_N.
    pub fn nonzero_modes(&self) -> &[f64] {
        &self.eigenvalues[1..]
    }
}

/// Eigendecomposition of a symmetric Laplacian.
///
/// Symmetry is required within 1e-10 entrywise. Eigenvalues are sorted
/// ascending; a first eigenvalue within [`TOL_ZERO`] of zero is clamped to
/// exactly zero. Eigenvector signs follow a fixed convention (first component
/// of magnitude above 1e-9 is made positive) so downstream traces are
/// deterministic.
pub fn spectrum(l: &DMatrix<f64>) -> Result<LaplacianSpectrum, GraphError> {
    let n = l.nrows();
    if n != l.ncols() {
        return Err(GraphError::NotSquare { rows: n, cols: l.ncols() });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let dev = (l[(i, j)] - l[(j, i)]).abs();
            if dev > 1e-10 {
                return Err(GraphError::NotSymmetric { i, j, deviation: dev });
            }
        }
    }
    let sym = (l + l.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut modal_basis = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut lam = eig.eigenvalues[src];
        if col == 0 && lam < 0.0 && lam.abs() <= TOL_ZERO {
            lam = 0.0;
        }
        eigenvalues.push(lam);
        let mut v = eig.eigenvectors.column(src).clone_owned();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-9) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        modal_basis.set_column(col, &v);
    }

    let lambda2 = eigenvalues[1];
    if lambda2 <= TOL_ZERO {
        return Err(GraphError::ZeroAlgebraicConnectivity { lambda2 });
    }
    let lambda_n = eigenvalues[n - 1];
    let reduced_basis = modal_basis.columns(1, n - 1).clone_owned();

    Ok(LaplacianSpectrum { eigenvalues, lambda2, lambda_n, modal_basis, reduced_basis })
}
