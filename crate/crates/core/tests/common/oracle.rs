//! Dense reference implementations used only by tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` row-major matrices and
//! shares no kernels with the library: no sparse storage, no nalgebra
//! arithmetic, no library normalization or propagation code.

#![allow(dead_code, clippy::needless_range_loop)]

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &nalgebra::DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn zeros(r: usize, c: usize) -> Rows {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Rows {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn transpose(a: &Rows) -> Rows {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn dense_matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    let mut out = zeros(a.len(), cols);
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), inner, "inner dimension");
        for k in 0..inner {
            let aik = row[k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..cols {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn add_scaled(a: &Rows, b: &Rows, scale: f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + scale * y).collect())
        .collect()
}

/// Largest entrywise error relative to the largest magnitude in `want`.
pub fn max_rel_err(got: &Rows, want: &Rows) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    got.iter()
        .flatten()
        .zip(want.iter().flatten())
        .fold(0.0f64, |m, (g, w)| m.max((g - w).abs()))
        / scale
}

pub fn max_abs_err(got: &Rows, want: &Rows) -> f64 {
    got.iter()
        .flatten()
        .zip(want.iter().flatten())
        .fold(0.0f64, |m, (g, w)| m.max((g - w).abs()))
}

pub fn dense_laplacian(adj: &Rows) -> Rows {
    let n = adj.len();
    let mut l = zeros(n, n);
    for i in 0..n {
        let degree: f64 = adj[i].iter().sum();
        for j in 0..n {
            l[i][j] = -adj[i][j];
        }
        l[i][i] += degree;
    }
    l
}

/// `trace(Zᵀ L Z)` with `L` built densely from `adj`.
pub fn dense_trace_form(adj: &Rows, z: &Rows) -> f64 {
    let l = dense_laplacian(adj);
    let lz = dense_matmul(&l, z);
    let mut total = 0.0;
    for i in 0..z.len() {
        for c in 0..z[i].len() {
            total += z[i][c] * lz[i][c];
        }
    }
    total
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}`.
pub fn dense_normalized_adjacency(adj: &Rows) -> Rows {
    let n = adj.len();
    let mut tilde = adj.clone();
    for (i, row) in tilde.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let deg: Vec<f64> = tilde.iter().map(|r| r.iter().sum()).collect();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if tilde[i][j] != 0.0 {
                out[i][j] = tilde[i][j] / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
    }
    out
}

/// `D^{-1/2} A D^{-1/2}` with no self-loops.
pub fn dense_symmetric_normalized(adj: &Rows) -> Rows {
    let n = adj.len();
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] != 0.0 {
                out[i][j] = adj[i][j] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

pub fn matrix_power(m: &Rows, k: usize) -> Rows {
    let mut out = identity(m.len());
    for _ in 0..k {
        out = dense_matmul(&out, m);
    }
    out
}

/// `Ŝ^K H Θ` by explicit normalization, matrix power and products.
pub fn dense_sgc(adj: &Rows, h: &Rows, theta: &Rows, k: usize) -> Result<Rows, String> {
    if adj.len() > 500 {
        return Err(format!("dense_sgc capped at n=500, got {}", adj.len()));
    }
    let s = dense_normalized_adjacency(adj);
    let sk = matrix_power(&s, k);
    Ok(dense_matmul(&dense_matmul(&sk, h), theta))
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn dense_inverse(m: &Rows) -> Rows {
    let n = m.len();
    let mut a = m.clone();
    let mut inv = identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    for j in 0..n {
                        a[r][j] -= factor * a[col][j];
                        inv[r][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

/// Exact personalized-PageRank diffusion `α (I − (1−α) D̃^{-1/2} A D̃^{-1/2})^{-1}`.
pub fn dense_ppr(adj: &Rows, alpha: f64) -> Rows {
    let n = adj.len();
    let deg_tilde: Vec<f64> = adj.iter().map(|r| r.iter().sum::<f64>() + 1.0).collect();
    let mut system = identity(n);
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] != 0.0 {
                system[i][j] -= (1.0 - alpha) * adj[i][j] / (deg_tilde[i].sqrt() * deg_tilde[j].sqrt());
            }
        }
    }
    let inv = dense_inverse(&system);
    inv.into_iter()
        .map(|r| r.into_iter().map(|v| alpha * v).collect())
        .collect()
}

/// Number of (undirected) edges crossing the cut given by `side`.
fn cut_weight(adj: &Rows, side: &[bool]) -> f64 {
    let n = adj.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if side[i] != side[j] {
                total += adj[i][j];
            }
        }
    }
    total
}

/// Exact uniform sparsest cut `min_S E(S, V−S) / (|S||V−S|)` by enumeration.
pub fn brute_force_sparsest_cut(adj: &Rows) -> Result<f64, String> {
    let n = adj.len();
    if !(2..=16).contains(&n) {
        return Err(format!("sparsest cut enumeration needs 2 <= n <= 16, got {n}"));
    }
    let mut best = f64::INFINITY;
    // Fix node n-1 outside S so each cut is visited once.
    for mask in 1u32..(1u32 << (n - 1)) {
        let side: Vec<bool> = (0..n).map(|i| i < n - 1 && mask & (1 << i) != 0).collect();
        let s = side.iter().filter(|&&b| b).count() as f64;
        let ratio = cut_weight(adj, &side) / (s * (n as f64 - s));
        best = best.min(ratio);
    }
    Ok(best)
}

/// `min over x ∈ {0,1}ⁿ \ {0,1} of xᵀL_G x / xᵀL_K x`, with `L_K` the complete-graph Laplacian.
pub fn indicator_relaxation_min(adj: &Rows) -> f64 {
    let n = adj.len();
    let l = dense_laplacian(adj);
    let mut complete = vec![vec![1.0; n]; n];
    for (i, row) in complete.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let lk = dense_laplacian(&complete);
    let quad = |m: &Rows, x: &[f64]| -> f64 {
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                t += x[i] * m[i][j] * x[j];
            }
        }
        t
    };
    let mut best = f64::INFINITY;
    for mask in 1u64..((1u64 << n) - 1) {
        let x: Vec<f64> = (0..n).map(|i| ((mask >> i) & 1) as f64).collect();
        best = best.min(quad(&l, &x) / quad(&lk, &x));
    }
    best
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(m: &Rows) -> Vec<f64> {
    let n = m.len();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().max(1e-300);
        if off <= 1e-26 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// All Laplacian eigenvalues of the graph with dense adjacency `adj`, ascending.
pub fn dense_eigenvalues(adj: &Rows) -> Result<Vec<f64>, String> {
    if adj.len() > 2000 {
        return Err(format!("dense eigensolve capped at n=2000, got {}", adj.len()));
    }
    Ok(jacobi_eigenvalues(&dense_laplacian(adj)))
}

/// Operator 2-norm via the largest eigenvalue of `MᵀM`.
pub fn spectral_norm(m: &Rows) -> f64 {
    let gram = dense_matmul(&transpose(m), m);
    jacobi_eigenvalues(&gram)
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0)
        .sqrt()
}

pub fn column_mean(m: &Rows) -> Vec<f64> {
    let n = m.len() as f64;
    let cols = m.first().map_or(0, |r| r.len());
    (0..cols)
        .map(|c| m.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
