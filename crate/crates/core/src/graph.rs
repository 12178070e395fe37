//! Compressed-row sparse graphs and the spectral primitives built on them.
//!
//! Symmetric graphs store both directions of every undirected edge, so a
//! [`SparseGraph`] is exactly the sparse adjacency matrix it represents.
//! Column indices are sorted within each row, which fixes the accumulation
//! order of every kernel in this module.

use nalgebra::DMatrix;

use crate::error::{GarnerError, Result};

/// Dense row-by-column matrix of reals (features, projections, embeddings).
pub type DenseMatrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    symmetric: bool,
}

impl SparseGraph {
    /// Graph on `n` nodes with no edges.
    pub fn empty(n: usize) -> Self {
        SparseGraph {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            weights: Vec::new(),
            symmetric: true,
        }
    }

    /// Builds a graph from directed `(src, dst, weight)` entries.
    ///
    /// Rejects out-of-range ids, duplicate pairs and negative or non-finite
    /// weights. The symmetry flag is computed from the stored entries.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(src, dst, w) in &entries {
            if src >= n || dst >= n {
                return Err(GarnerError::Structural(format!(
                    "edge ({src}, {dst}) references a node outside [0, {n})"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(GarnerError::Structural(format!(
                    "edge ({src}, {dst}) has invalid weight {w}"
                )));
            }
        }
        entries.sort_unstable_by_key(|a| (a.0, a.1));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(GarnerError::Structural(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }

        let mut indptr = vec![0usize; n + 1];
        for &(src, _, _) in &entries {
            indptr[src + 1] += 1;
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        let indices = entries.iter().map(|e| e.1).collect();
        let weights = entries.iter().map(|e| e.2).collect();
        let mut g = SparseGraph {
            n,
            indptr,
            indices,
            weights,
            symmetric: false,
        };
        g.symmetric = g.check_symmetric();
        Ok(g)
    }

    /// Unweighted undirected graph; each `(u, v)` is stored in both directions.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            triplets.push((u, v, 1.0));
            if u != v {
                triplets.push((v, u, 1.0));
            }
        }
        Self::from_triplets(n, triplets)
    }

    fn check_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.row(i)
                .all(|(j, w)| self.weight(j, i).is_some_and(|wt| wt == w))
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored (directed) entries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Neighbours of `i` with weights, ascending by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let cols = self.neighbors(i);
        cols.binary_search(&j)
            .ok()
            .map(|k| self.weights[self.indptr[i] + k])
    }

    /// Number of stored entries in row `i`.
    pub fn out_degree(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    /// Weighted degree (row sum) of `i`.
    pub fn degree(&self, i: usize) -> f64 {
        self.row(i).map(|(_, w)| w).sum()
    }

    /// All stored entries as `(src, dst, weight)`, row-major.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, w)| (i, j, w)))
    }

    /// Undirected edge list with `u <= v` (symmetric graphs only make sense here).
    pub fn undirected_edges(&self) -> Vec<(usize, usize, f64)> {
        self.triplets().filter(|&(u, v, _)| u <= v).collect()
    }

    /// True when every stored weight equals 1.
    pub fn is_binary(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    /// Same pattern with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SparseGraph {
        let mut g = self.clone();
        g.weights.iter_mut().for_each(|w| *w *= factor);
        g
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for (i, j, w) in self.triplets() {
            m[(i, j)] = w;
        }
        m
    }

    /// Induced subgraph on `nodes`; row `k` of the result is original node `nodes[k]`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<SparseGraph> {
        let mut position = vec![usize::MAX; self.n];
        for (k, &v) in nodes.iter().enumerate() {
            if v >= self.n {
                return Err(GarnerError::Structural(format!(
                    "sampled node {v} outside [0, {})",
                    self.n
                )));
            }
            if position[v] != usize::MAX {
                return Err(GarnerError::Structural(format!("node {v} sampled twice")));
            }
            position[v] = k;
        }
        let mut triplets = Vec::new();
        for (k, &v) in nodes.iter().enumerate() {
            for (u, w) in self.row(v) {
                let pu = position[u];
                if pu != usize::MAX {
                    triplets.push((k, pu, w));
                }
            }
        }
        SparseGraph::from_triplets(nodes.len(), triplets)
    }

    /// Breadth-first connectivity over stored entries.
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.n
    }

    /// Rebuilds a graph with per-entry weights mapped by `f(i, j, w)`; the pattern is unchanged.
    fn map_weights(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> SparseGraph {
        let mut g = self.clone();
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                g.weights[k] = f(i, self.indices[k], self.weights[k]);
            }
        }
        g
    }
}

fn require_symmetric(g: &SparseGraph, op: &str) -> Result<()> {
    if g.is_symmetric() {
        Ok(())
    } else {
        Err(GarnerError::Structural(format!(
            "{op} requires a symmetric graph"
        )))
    }
}

/// Adds `value` to every diagonal entry, inserting self-loops where absent.
fn add_identity(g: &SparseGraph, value: f64) -> SparseGraph {
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(g.nnz() + g.n());
    for i in 0..g.n() {
        let mut seen_diag = false;
        for (j, w) in g.row(i) {
            if j == i {
                triplets.push((i, j, w + value));
                seen_diag = true;
            } else {
                triplets.push((i, j, w));
            }
        }
        if !seen_diag {
            triplets.push((i, i, value));
        }
    }
    SparseGraph::from_triplets(g.n(), triplets).expect("adding the identity keeps a valid graph")
}

/// Renormalized adjacency `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degrees of `A + I`.
pub fn normalize_adjacency(g: &SparseGraph) -> Result<SparseGraph> {
    require_symmetric(g, "normalize_adjacency")?;
    let with_loops = add_identity(g, 1.0);
    Ok(symmetric_scale(&with_loops))
}

/// `D^{-1/2} A D^{-1/2}` without self-loops; rows with zero degree stay empty.
pub fn normalize_symmetric(g: &SparseGraph) -> Result<SparseGraph> {
    require_symmetric(g, "normalize_symmetric")?;
    Ok(symmetric_scale(g))
}

fn symmetric_scale(g: &SparseGraph) -> SparseGraph {
    let degree: Vec<f64> = (0..g.n()).map(|i| g.degree(i)).collect();
    // `dᵢdⱼ` commutes exactly, so the result is exactly symmetric.
    let mut out = g.map_weights(|i, j, w| {
        let dd = degree[i] * degree[j];
        if dd > 0.0 {
            w / dd.sqrt()
        } else {
            0.0
        }
    });
    out.symmetric = true;
    out
}

/// Combinatorial Laplacian `L = D - A`.
pub fn laplacian(g: &SparseGraph) -> Result<SparseGraph> {
    require_symmetric(g, "laplacian")?;
    let mut triplets = Vec::with_capacity(g.nnz() + g.n());
    for i in 0..g.n() {
        let degree = g.degree(i);
        let mut self_weight = 0.0;
        for (j, w) in g.row(i) {
            if j == i {
                self_weight = w;
            } else {
                triplets.push((i, j, -w));
            }
        }
        triplets.push((i, i, degree - self_weight));
    }
    // Laplacian entries are signed, so bypass the non-negative weight check.
    triplets.sort_unstable_by_key(|a| (a.0, a.1));
    let mut indptr = vec![0usize; g.n() + 1];
    for &(i, _, _) in &triplets {
        indptr[i + 1] += 1;
    }
    for i in 0..g.n() {
        indptr[i + 1] += indptr[i];
    }
    Ok(SparseGraph {
        n: g.n(),
        indptr,
        indices: triplets.iter().map(|t| t.1).collect(),
        weights: triplets.iter().map(|t| t.2).collect(),
        symmetric: true,
    })
}

/// `½ Σ_{i,j} w_ij ‖z_i − z_j‖²`, summed over stored entries.
pub fn dirichlet_energy(z: &DenseMatrix, g: &SparseGraph) -> Result<f64> {
    if z.nrows() != g.n() {
        return Err(GarnerError::dims("dirichlet_energy", g.n(), z.nrows()));
    }
    let mut total = 0.0;
    for (i, j, w) in g.triplets() {
        if i == j || w == 0.0 {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..z.ncols() {
            let diff = z[(i, c)] - z[(j, c)];
            sq += diff * diff;
        }
        total += w * sq;
    }
    Ok(0.5 * total)
}

/// Sparse × dense product `G X`.
///
/// Each output entry accumulates in ascending column order, so results are
/// bit-identical across runs.
pub fn spmm(g: &SparseGraph, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.nrows() != g.n() {
        return Err(GarnerError::dims("spmm", g.n(), x.nrows()));
    }
    let mut out = DenseMatrix::zeros(g.n(), x.ncols());
    for c in 0..x.ncols() {
        let src = x.column(c);
        let mut dst = out.column_mut(c);
        for i in 0..g.n() {
            let mut acc = 0.0;
            for (j, w) in g.row(i) {
                acc += w * src[j];
            }
            dst[i] = acc;
        }
    }
    Ok(out)
}

/// Applies `spmm` `steps` times.
pub fn propagate(g: &SparseGraph, x: &DenseMatrix, steps: usize) -> Result<DenseMatrix> {
    let mut cur = x.clone();
    for _ in 0..steps {
        cur = spmm(g, &cur)?;
    }
    if steps == 0 && x.nrows() != g.n() {
        return Err(GarnerError::dims("propagate", g.n(), x.nrows()));
    }
    Ok(cur)
}

/// Returns an error naming `what` if any entry is NaN or infinite.
pub fn ensure_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GarnerError::NonFinite(what.to_string()))
    }
}
