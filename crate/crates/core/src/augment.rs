//! Derived graph views: the configuration kNN graph, the PPR diffusion graph,
//! the certified random regular graph used for spectral negatives, and row
//! shuffling for feature-corruption negatives.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GarnerError, Result};
use crate::graph::{laplacian, DenseMatrix, SparseGraph};

/// The four graphs used in training, all on the same node set.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    /// Road topology.
    pub g0: SparseGraph,
    /// Binary configuration-similarity kNN graph.
    pub g1: SparseGraph,
    /// Sparsified PPR diffusion graph.
    pub g2: SparseGraph,
    /// Random `d`-regular graph standing in for the complete graph.
    pub gneg: SparseGraph,
}

impl ViewSet {
    pub fn new(g0: SparseGraph, g1: SparseGraph, g2: SparseGraph, gneg: SparseGraph) -> Result<Self> {
        let n = g0.n();
        for (name, g) in [("g1", &g1), ("g2", &g2), ("gneg", &gneg)] {
            if g.n() != n {
                return Err(GarnerError::DimensionMismatch {
                    context: "ViewSet",
                    expected: format!("{n} nodes"),
                    actual: format!("{} nodes in {name}", g.n()),
                });
            }
        }
        if !g1.is_binary() {
            return Err(GarnerError::Structural("kNN view must be binary".into()));
        }
        if n > 0 {
            let d = gneg.out_degree(0);
            if (0..n).any(|i| gneg.out_degree(i) != d) {
                return Err(GarnerError::Structural("negative graph is not regular".into()));
            }
        }
        Ok(ViewSet { g0, g1, g2, gneg })
    }

    pub fn n(&self) -> usize {
        self.g0.n()
    }
}

/// `1 / (1 + ‖a − b‖)`.
pub fn config_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GarnerError::dims("config_similarity", a.len(), b.len()));
    }
    Ok(1.0 / (1.0 + sq_distance(a, b).sqrt()))
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// The `k` most similar other nodes of every node, ties to the lower id.
///
/// Similarity decreases monotonically in Euclidean distance, so ranking is
/// done on exact squared distances.
pub fn knn_lists(c: &DenseMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = c.nrows();
    if k == 0 || k >= n {
        return Err(GarnerError::InvalidArgument(format!(
            "kNN degree must satisfy 1 <= k < n, got k={k}, n={n}"
        )));
    }
    let rows = rows_of(c);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_distance(&rows[i], &rows[j]), j))
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, order);
            let mut top = cand[..k].to_vec();
            top.sort_unstable_by(order);
            top.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Binary kNN graph over configuration rows, symmetrized by union.
pub fn knn_similarity_graph(c: &DenseMatrix, k: usize) -> Result<SparseGraph> {
    let lists = knn_lists(c, k)?;
    let mut pairs: Vec<(usize, usize)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    SparseGraph::from_undirected_edges(c.nrows(), &pairs)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(GarnerError::InvalidArgument(format!(
            "teleport probability must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Propagation operator `D̃^{-1/2} A D̃^{-1/2}`, `D̃` the degrees of `A + I`.
fn diffusion_operator(g: &SparseGraph) -> Result<SparseGraph> {
    if !g.is_symmetric() {
        return Err(GarnerError::Structural("diffusion requires a symmetric graph".into()));
    }
    let inv_sqrt: Vec<f64> = (0..g.n())
        .map(|i| 1.0 / (g.degree(i) + 1.0).sqrt())
        .collect();
    SparseGraph::from_triplets(
        g.n(),
        g.triplets()
            .filter(|&(i, j, _)| i != j)
            .map(|(i, j, w)| (i, j, w * inv_sqrt[i] * inv_sqrt[j])),
    )
}

/// Row `source` of the truncated series `α Σ_{t=0}^{terms} ((1−α)M)^t`,
/// returned as `(column, value)` pairs in ascending column order.
fn ppr_row(m: &SparseGraph, alpha: f64, terms: usize, source: usize) -> Vec<(usize, f64)> {
    let n = m.n();
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut touched = vec![false; n];
    let mut in_next = vec![false; n];
    let mut active = vec![source];
    let mut support = vec![source];
    cur[source] = 1.0;
    touched[source] = true;
    for t in 0..=terms {
        for &j in &active {
            acc[j] += alpha * cur[j];
        }
        if t == terms {
            break;
        }
        let mut next_active = Vec::with_capacity(active.len() * 2);
        for &j in &active {
            let xj = cur[j];
            for (k, w) in m.row(j) {
                next[k] += (1.0 - alpha) * w * xj;
                if !in_next[k] {
                    in_next[k] = true;
                    next_active.push(k);
                }
            }
        }
        for &j in &active {
            cur[j] = 0.0;
        }
        for &k in &next_active {
            in_next[k] = false;
            cur[k] = next[k];
            next[k] = 0.0;
            if !touched[k] {
                touched[k] = true;
                support.push(k);
            }
        }
        active = next_active;
    }
    support.sort_unstable();
    support.into_iter().map(|j| (j, acc[j])).collect()
}

/// Dense truncated-series diffusion matrix before any sparsification.
pub fn ppr_series_dense(g: &SparseGraph, alpha: f64, terms: usize) -> Result<DenseMatrix> {
    check_alpha(alpha)?;
    let m = diffusion_operator(g)?;
    let rows: Vec<Vec<(usize, f64)>> = (0..g.n())
        .into_par_iter()
        .map(|i| ppr_row(&m, alpha, terms, i))
        .collect();
    let mut out = DMatrix::zeros(g.n(), g.n());
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Personalized-PageRank diffusion graph.
///
/// Approximates `α (I − (1−α) D̃^{-1/2} A D̃^{-1/2})^{-1}` by its Neumann
/// series truncated after `terms`, keeps the `topk` largest entries of each
/// row and symmetrizes with `max(P_ij, P_ji)`.
pub fn ppr_diffusion(g: &SparseGraph, alpha: f64, terms: usize, topk: usize) -> Result<SparseGraph> {
    check_alpha(alpha)?;
    if topk == 0 {
        return Err(GarnerError::InvalidArgument("diffusion top-k must be positive".into()));
    }
    let m = diffusion_operator(g)?;
    let kept: Vec<Vec<(usize, f64)>> = (0..g.n())
        .into_par_iter()
        .map(|i| {
            let mut row = ppr_row(&m, alpha, terms, i);
            row.retain(|&(_, v)| v > 0.0);
            if row.len() > topk {
                row.select_nth_unstable_by(topk - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                row.truncate(topk);
            }
            row
        })
        .collect();

    let mut entries: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for (i, row) in kept.iter().enumerate() {
        for &(j, v) in row {
            for key in [(i, j), (j, i)] {
                let slot = entries.entry(key).or_insert(0.0);
                *slot = slot.max(v);
            }
        }
    }
    SparseGraph::from_triplets(g.n(), entries.into_iter().map(|((i, j), v)| (i, j, v)))
}

/// Attempts one simple `d`-regular graph by incremental random pairing of
/// node stubs, rejecting self-loops and repeated edges pair by pair.
fn pair_stubs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(d); n];
    let mut edges = Vec::with_capacity(n * d / 2);
    let suitable = |adj: &[Vec<usize>], u: usize, v: usize| u != v && !adj[u].contains(&v);
    while !stubs.is_empty() {
        let mut chosen = None;
        for _ in 0..64 {
            let a = rng.random_range(0..stubs.len());
            let b = rng.random_range(0..stubs.len());
            if a != b && suitable(&adj, stubs[a], stubs[b]) {
                chosen = Some((a, b));
                break;
            }
        }
        if chosen.is_none() {
            let options: Vec<(usize, usize)> = (0..stubs.len())
                .flat_map(|a| ((a + 1)..stubs.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| suitable(&adj, stubs[a], stubs[b]))
                .collect();
            if options.is_empty() {
                return None;
            }
            chosen = Some(options[rng.random_range(0..options.len())]);
        }
        let (a, b) = chosen.unwrap();
        let (u, v) = (stubs[a], stubs[b]);
        adj[u].push(v);
        adj[v].push(u);
        edges.push((u.min(v), u.max(v)));
        stubs.swap_remove(a.max(b));
        stubs.swap_remove(a.min(b));
    }
    Some(edges)
}

/// Largest graph size certified by a dense eigensolve.
pub const MAX_CERTIFY_N: usize = 2000;
pub const MAX_CERTIFY_ATTEMPTS: usize = 20;

/// Ascending Laplacian spectrum via a dense symmetric eigensolver.
pub fn laplacian_spectrum(g: &SparseGraph) -> Result<Vec<f64>> {
    let l = laplacian(g)?.to_dense();
    let mut eig: Vec<f64> = l.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Ramanujan-type window `[d − 2√(d−1), d + 2√(d−1)]`.
pub fn expander_bounds(d: usize) -> (f64, f64) {
    let r = 2.0 * ((d as f64) - 1.0).max(0.0).sqrt();
    (d as f64 - r, d as f64 + r)
}

/// True when the graph is connected and every nonzero Laplacian eigenvalue
/// lies in the expander window for degree `d`.
pub fn certify_regular(g: &SparseGraph, d: usize) -> Result<bool> {
    let eig = laplacian_spectrum(g)?;
    let (lo, hi) = expander_bounds(d);
    let tol = 1e-9 * (d as f64).max(1.0);
    // The zero eigenvalue is simple exactly when the graph is connected.
    Ok(match eig.split_first() {
        None => true,
        Some((first, rest)) => {
            first.abs() <= tol && rest.iter().all(|&l| l >= lo - tol && l <= hi + tol)
        }
    })
}

fn check_regular_args(n: usize, d: usize) -> Result<()> {
    if d == 0 || d >= n {
        return Err(GarnerError::InvalidArgument(format!(
            "regular graph needs 1 <= d < n, got n={n}, d={d}"
        )));
    }
    if !(n * d).is_multiple_of(2) {
        return Err(GarnerError::InvalidArgument(format!(
            "no {d}-regular graph on {n} nodes: n·d must be even"
        )));
    }
    Ok(())
}

/// Random simple `d`-regular graph, optionally certified spectrally.
///
/// Attempt `a` draws from stream `a` of the generator seeded with `seed`. When
/// `certify` is set and `n <= MAX_CERTIFY_N`, attempts whose spectrum leaves
/// the expander window are discarded.
pub fn regular_graph(n: usize, d: usize, seed: u64, certify: bool) -> Result<SparseGraph> {
    sample_regular(n, d, seed, certify).map(|(g, _)| g)
}

/// [`regular_graph`] that also reports how many attempts were drawn.
pub fn sample_regular(n: usize, d: usize, seed: u64, certify: bool) -> Result<(SparseGraph, usize)> {
    check_regular_args(n, d)?;
    let certify = certify && n <= MAX_CERTIFY_N;
    for attempt in 0..MAX_CERTIFY_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let edges = (0..100).find_map(|_| pair_stubs(n, d, &mut rng));
        let Some(edges) = edges else { continue };
        let g = SparseGraph::from_undirected_edges(n, &edges)?;
        if !certify || certify_regular(&g, d)? {
            return Ok((g, attempt + 1));
        }
        log::debug!("regular graph attempt {attempt} (n={n}, d={d}) failed certification");
    }
    Err(GarnerError::Certification {
        n,
        d,
        attempts: MAX_CERTIFY_ATTEMPTS,
    })
}

/// Certified random `d`-regular graph (unweighted; the `n/d` edge weight
/// cancels under degree normalization).
pub fn regular_negative_graph(n: usize, d: usize, seed: u64) -> Result<SparseGraph> {
    if n > MAX_CERTIFY_N {
        log::warn!("negative graph with n={n} exceeds the dense certification cap; returned uncertified");
    }
    regular_graph(n, d, seed, true)
}

/// Uniform permutation of `0..n` other than the identity.
pub fn nonidentity_permutation(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(GarnerError::InvalidArgument(format!(
            "row shuffling needs at least 2 rows, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Row `i` of the result is row `perm[i]` of `m`.
pub fn permute_rows(m: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
}

/// Rows of `h` under a seeded non-identity permutation.
pub fn shuffle_rows(h: &DenseMatrix, seed: u64) -> Result<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = nonidentity_permutation(h.nrows(), &mut rng)?;
    Ok(permute_rows(h, &perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_oracle as oracle;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn similarity_examples() {
        assert_eq!(config_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(config_similarity(&[0.0], &[1.0]).unwrap(), 0.5);
        let s = config_similarity(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((s - 1.0 / 6.0).abs() < 1e-15);
        assert!(config_similarity(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn knn_tie_to_lower_id() {
        let c = DenseMatrix::from_row_slice(3, 1, &[0.0, 0.0, 10.0]);
        let g = knn_similarity_graph(&c, 1).unwrap();
        let edges: Vec<(usize, usize)> = g.undirected_edges().into_iter().map(|(u, v, _)| (u, v)).collect();
        assert_eq!(edges, vec![(0, 1), (0, 2)]);
        assert!(knn_similarity_graph(&c, 3).is_err());
        assert!(knn_similarity_graph(&c, 0).is_err());
    }

    #[test]
    fn knn_complete_when_k_is_n_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = DenseMatrix::from_fn(7, 3, |_, _| rng.random::<f64>());
        let g = knn_similarity_graph(&c, 6).unwrap();
        assert_eq!(g.nnz(), 7 * 6);
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let c = DenseMatrix::from_fn(200, 5, |_, _| rng.random_range(-1.0..1.0));
        let lists = knn_lists(&c, 6).unwrap();
        let rows = oracle::to_rows(&c);
        for i in 0..200 {
            let mut all: Vec<(f64, usize)> = (0..200)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    (1.0 / (1.0 + d.sqrt()), j)
                })
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..6].iter().map(|x| x.1).collect();
            assert_eq!(lists[i], want, "node {i}");
        }
        let g = knn_similarity_graph(&c, 6).unwrap();
        assert!(g.is_symmetric() && g.is_binary());
        assert!((0..200).all(|i| g.weight(i, i).is_none() && g.out_degree(i) >= 6));
    }

    #[test]
    fn ppr_isolated_and_k2() {
        let p = ppr_series_dense(&SparseGraph::empty(1), 0.2, 64).unwrap();
        assert!((p[(0, 0)] - 0.2).abs() < 1e-15);
        let k2 = SparseGraph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        // Closed form: 0.2 / 0.84 · [[1, 0.4], [0.4, 1]].
        let exact = [0.2 / 0.84, 0.08 / 0.84];
        let p = ppr_series_dense(&k2, 0.2, 200).unwrap();
        assert!((p[(0, 0)] - exact[0]).abs() < 1e-12);
        assert!((p[(0, 1)] - exact[1]).abs() < 1e-12);
        assert!((exact[0] - 0.2381).abs() < 1e-4 && (exact[1] - 0.0952).abs() < 1e-4);
        assert!(ppr_diffusion(&k2, 1.0, 10, 4).is_err());
        assert!(ppr_diffusion(&k2, 0.0, 10, 4).is_err());
    }

    #[test]
    fn ppr_matches_dense_inverse() {
        let data = crate::data::generate_synthetic(150, 3, 4).unwrap();
        let g = &data.dataset.graph;
        let series = oracle::to_rows(&ppr_series_dense(g, 0.2, 64).unwrap());
        let exact = oracle::dense_ppr(&oracle::to_rows(&g.to_dense()), 0.2);
        assert!(oracle::max_abs_err(&series, &exact) < 1e-6);
    }

    #[test]
    fn ppr_topk_sparsifies_and_symmetrizes() {
        let data = crate::data::generate_synthetic(120, 3, 8).unwrap();
        let g = ppr_diffusion(&data.dataset.graph, 0.2, 32, 10).unwrap();
        assert!(g.is_symmetric());
        assert!(g.triplets().all(|(_, _, w)| w > 0.0));
        // Every row keeps its own top 10, plus entries mirrored from other rows.
        assert!((0..120).all(|i| g.out_degree(i) >= 10));
        let full = ppr_diffusion(&data.dataset.graph, 0.2, 32, 120).unwrap();
        let dense = ppr_series_dense(&data.dataset.graph, 0.2, 32).unwrap();
        for (i, j, w) in full.triplets() {
            assert_eq!(w, dense[(i, j)].max(dense[(j, i)]));
        }
    }

    #[test]
    fn regular_k4() {
        let g = regular_negative_graph(4, 3, 0).unwrap();
        assert_eq!(g.nnz(), 12);
        let eig = oracle::dense_eigenvalues(&oracle::to_rows(&g.to_dense())).unwrap();
        for (got, want) in eig.iter().zip([0.0, 4.0, 4.0, 4.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let (lo, hi) = expander_bounds(3);
        assert!(eig[1..].iter().all(|&l| l >= lo && l <= hi));
    }

    #[test]
    fn regular_parity_and_range() {
        assert!(regular_negative_graph(5, 3, 0).is_err());
        assert!(regular_negative_graph(4, 4, 0).is_err());
        assert!(regular_negative_graph(4, 0, 0).is_err());
    }

    #[test]
    fn regular_500_22_certified() {
        let g = regular_negative_graph(500, 22, 0).unwrap();
        assert!((0..500).all(|i| g.out_degree(i) == 22));
        assert!(g.is_binary() && g.is_symmetric());
        assert!(certify_regular(&g, 22).unwrap());
    }

    #[test]
    fn spectrum_agrees_with_jacobi_oracle() {
        let g = regular_graph(40, 6, 3, false).unwrap();
        let ours = laplacian_spectrum(&g).unwrap();
        let theirs = oracle::dense_eigenvalues(&oracle::to_rows(&g.to_dense())).unwrap();
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn disconnected_regular_graph_is_not_certified() {
        // Two disjoint K4s: 3-regular with a repeated zero eigenvalue.
        let mut edges = Vec::new();
        for base in [0, 4] {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    edges.push((base + i, base + j));
                }
            }
        }
        let g = SparseGraph::from_undirected_edges(8, &edges).unwrap();
        assert!(!certify_regular(&g, 3).unwrap());
    }

    #[test]
    fn shuffle_examples() {
        let h = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = shuffle_rows(&h, 5).unwrap();
        assert_eq!(s, DenseMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 2.0]));
        assert!(shuffle_rows(&DenseMatrix::zeros(1, 3), 0).is_err());
        let big = DenseMatrix::from_fn(30, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(shuffle_rows(&big, 9).unwrap(), shuffle_rows(&big, 9).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shuffle_preserves_row_multiset(seed in any::<u64>(), n in 2usize..40) {
            let h = DenseMatrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
            let s = shuffle_rows(&h, seed).unwrap();
            prop_assert_ne!(&s, &h);
            let mut firsts: Vec<i64> = (0..n).map(|i| s[(i, 0)] as i64).collect();
            firsts.sort_unstable();
            prop_assert_eq!(firsts, (0..n).map(|i| (3 * i) as i64).collect::<Vec<_>>());
        }

        #[test]
        fn regular_graph_degrees(seed in any::<u64>(), half in 4usize..40, d in 2usize..7) {
            let n = 2 * half;
            prop_assume!(d < n);
            let g = regular_graph(n, d, seed, false).unwrap();
            prop_assert!(g.is_symmetric());
            prop_assert!((0..n).all(|i| g.out_degree(i) == d && g.weight(i, i).is_none()));
        }
    }
}
