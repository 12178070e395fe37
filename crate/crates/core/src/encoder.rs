//! Linear SGC encoders and the learnable parameter set.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GarnerError, Result};
use crate::graph::{propagate, spmm, DenseMatrix, SparseGraph};

/// Road embeddings, one row per road.
pub type EmbeddingMatrix = DenseMatrix;

const GRNP_MAGIC: &[u8; 4] = b"GRNP";

/// `Ŝᴷ H Θ`: `k` sparse propagations followed by one dense product.
pub fn sgc_forward(
    s_hat: &SparseGraph,
    h: &DenseMatrix,
    theta: &DenseMatrix,
    k: usize,
) -> Result<EmbeddingMatrix> {
    if h.nrows() != s_hat.n() {
        return Err(GarnerError::dims("sgc_forward rows", s_hat.n(), h.nrows()));
    }
    if h.ncols() != theta.nrows() {
        return Err(GarnerError::dims("sgc_forward Θ rows", h.ncols(), theta.nrows()));
    }
    Ok(propagate(s_hat, h, k)? * theta)
}

/// Negative-view encoding `Â H Θ` with a single propagation over the
/// normalized regular graph.
pub fn negative_sgc(
    kneg: &SparseGraph,
    h: &DenseMatrix,
    theta: &DenseMatrix,
) -> Result<EmbeddingMatrix> {
    if h.ncols() != theta.nrows() {
        return Err(GarnerError::dims("negative_sgc Θ rows", h.ncols(), theta.nrows()));
    }
    Ok(spmm(kneg, h)? * theta)
}

/// Column mean of `z`.
pub fn mean_pool(z: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if z.nrows() == 0 {
        return Err(GarnerError::InvalidArgument("mean pooling of an empty matrix".into()));
    }
    let n = z.nrows() as f64;
    Ok(z.column_iter().map(|c| c.sum() / n).collect())
}

/// Every learnable matrix of the model.
///
/// `theta[v]` encodes view `v` (topology, configuration kNN, diffusion) and
/// `disc[l]` is the bilinear discriminator of loss `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_c: DenseMatrix,
    pub w_x: DenseMatrix,
    pub theta: [DenseMatrix; 3],
    pub disc: [DenseMatrix; 2],
}

pub const PARAM_NAMES: [&str; 7] = ["w_c", "w_x", "theta0", "theta1", "theta2", "disc1", "disc2"];

fn uniform_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl ModelParams {
    /// Uniform `(−1/√fan_in, 1/√fan_in)` initialization, deterministic in `seed`.
    ///
    /// `config_dim` is `c`, `feature_dim` is `f'`, `proj_dim` is `p` and
    /// `embed_dim` is `f`.
    pub fn init(
        config_dim: usize,
        feature_dim: usize,
        proj_dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_c = uniform_init(config_dim, proj_dim, &mut rng);
        let w_x = uniform_init(feature_dim, proj_dim, &mut rng);
        let theta = std::array::from_fn(|_| uniform_init(2 * proj_dim, embed_dim, &mut rng));
        let disc = std::array::from_fn(|_| uniform_init(embed_dim, embed_dim, &mut rng));
        ModelParams { w_c, w_x, theta, disc }
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.nrows(), m.ncols());
        ModelParams {
            w_c: z(&other.w_c),
            w_x: z(&other.w_x),
            theta: std::array::from_fn(|i| z(&other.theta[i])),
            disc: std::array::from_fn(|i| z(&other.disc[i])),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.w_c.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.theta[0].ncols()
    }

    pub fn matrices(&self) -> [&DenseMatrix; 7] {
        let [t0, t1, t2] = &self.theta;
        let [d1, d2] = &self.disc;
        [&self.w_c, &self.w_x, t0, t1, t2, d1, d2]
    }

    pub fn matrices_mut(&mut self) -> [&mut DenseMatrix; 7] {
        let [t0, t1, t2] = &mut self.theta;
        let [d1, d2] = &mut self.disc;
        [&mut self.w_c, &mut self.w_x, t0, t1, t2, d1, d2]
    }

    /// Checks the parameter shapes against dataset dimensions.
    pub fn check_dims(&self, config_dim: usize, feature_dim: usize) -> Result<()> {
        let (p, f) = (self.proj_dim(), self.embed_dim());
        let expected = [
            (config_dim, p),
            (feature_dim, p),
            (2 * p, f),
            (2 * p, f),
            (2 * p, f),
            (f, f),
            (f, f),
        ];
        for ((name, m), want) in PARAM_NAMES.iter().zip(self.matrices()).zip(expected) {
            if m.shape() != want {
                return Err(GarnerError::DimensionMismatch {
                    context: "model parameters",
                    expected: format!("{name} {}x{}", want.0, want.1),
                    actual: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
        }
        if self.matrices().iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(GarnerError::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// `GRNP` checkpoint: magic, then per matrix a `u32` name length, the
    /// UTF-8 name, `u32` rows, `u32` cols and a row-major `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GRNP_MAGIC.to_vec();
        for (name, m) in PARAM_NAMES.iter().zip(self.matrices()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 4 || &bytes[..4] != GRNP_MAGIC {
            return Err("missing GRNP header".into());
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut found: Vec<Option<DenseMatrix>> = vec![None; PARAM_NAMES.len()];
        while cur.pos < bytes.len() {
            let name_len = cur.u32()?;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| "matrix name is not UTF-8".to_string())?
                .to_string();
            let rows = cur.u32()?;
            let cols = cur.u32()?;
            let data: Vec<f64> = cur
                .take(rows * cols * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let slot = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| format!("unknown matrix {name:?}"))?;
            found[slot] = Some(DenseMatrix::from_row_slice(rows, cols, &data));
        }
        let mut mats = found
            .into_iter()
            .zip(PARAM_NAMES)
            .map(|(m, name)| m.ok_or_else(|| format!("checkpoint lacks {name}")))
            .collect::<std::result::Result<Vec<_>, _>>()?
            .into_iter();
        let mut next = || mats.next().unwrap();
        Ok(ModelParams {
            w_c: next(),
            w_x: next(),
            theta: [next(), next(), next()],
            disc: [next(), next()],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| GarnerError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GarnerError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| GarnerError::format(path, m))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.pos..self.pos + len)
            .ok_or_else(|| "truncated checkpoint".to_string())?;
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::regular_negative_graph;
    use crate::graph::{dirichlet_energy, normalize_adjacency, normalize_symmetric};
    use crate::test_oracle as oracle;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> SparseGraph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        SparseGraph::from_undirected_edges(n, &edges).unwrap()
    }

    /// Random connected graph: a random spanning tree plus extra edges.
    fn random_connected(n: usize, p: f64, rng: &mut ChaCha8Rng) -> SparseGraph {
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        SparseGraph::from_undirected_edges(n, &edges).unwrap()
    }

    /// The idealized complete graph with self-loops, `A = J`.
    fn complete_with_loops(n: usize) -> SparseGraph {
        SparseGraph::from_triplets(n, (0..n).flat_map(|i| (0..n).map(move |j| (i, j, 1.0)))).unwrap()
    }

    #[test]
    fn zero_steps_is_plain_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = normalize_adjacency(&random_graph(10, 0.3, &mut rng)).unwrap();
        let h = random_dense(10, 4, &mut rng);
        let theta = random_dense(4, 3, &mut rng);
        assert_eq!(sgc_forward(&g, &h, &theta, 0).unwrap(), &h * &theta);
        assert!(sgc_forward(&g, &h, &random_dense(5, 3, &mut rng), 1).is_err());
    }

    #[test]
    fn k2_one_step_is_s_hat() {
        let g = normalize_adjacency(&SparseGraph::from_undirected_edges(2, &[(0, 1)]).unwrap()).unwrap();
        let eye = DenseMatrix::identity(2, 2);
        assert_eq!(sgc_forward(&g, &eye, &eye, 1).unwrap(), DenseMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn matches_dense_power_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let raw = random_graph(100, 0.05, &mut rng);
        let h = random_dense(100, 6, &mut rng);
        let theta = random_dense(6, 5, &mut rng);
        let got = sgc_forward(&normalize_adjacency(&raw).unwrap(), &h, &theta, 3).unwrap();
        let want = oracle::dense_sgc(
            &oracle::to_rows(&raw.to_dense()),
            &oracle::to_rows(&h),
            &oracle::to_rows(&theta),
            3,
        )
        .unwrap();
        assert!(oracle::max_rel_err(&oracle::to_rows(&got), &want) < 1e-10);
    }

    #[test]
    fn complete_graph_negative_is_column_mean() {
        let avg = normalize_symmetric(&complete_with_loops(2)).unwrap();
        assert_eq!(avg.to_dense(), DenseMatrix::from_element(2, 2, 0.5));
        let h = DenseMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let z = negative_sgc(&avg, &h, &DenseMatrix::identity(1, 1)).unwrap();
        assert_eq!(z, DenseMatrix::from_row_slice(2, 1, &[2.0, 2.0]));
    }

    #[test]
    fn averaging_operator_rows_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let avg = normalize_symmetric(&complete_with_loops(n)).unwrap();
        let h = random_dense(n, 3, &mut rng);
        let theta = random_dense(3, 2, &mut rng);
        let z = negative_sgc(&avg, &h, &theta).unwrap();
        for i in 1..n {
            for c in 0..2 {
                assert!((z[(i, c)] - z[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expander_negative_within_mixing_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = 22;
        let kneg = normalize_symmetric(&regular_negative_graph(100, d, 5).unwrap()).unwrap();
        let h = random_dense(100, 8, &mut rng);
        let theta = random_dense(8, 4, &mut rng);
        let z = negative_sgc(&kneg, &h, &theta).unwrap();
        let y = oracle::to_rows(&(&h * &theta));
        let mean = oracle::column_mean(&y);
        let envelope = 2.0 * ((d - 1) as f64).sqrt() / d as f64 * oracle::spectral_norm(&y);
        for i in 0..100 {
            let dev: f64 = (0..4).map(|c| (z[(i, c)] - mean[c]).powi(2)).sum::<f64>().sqrt();
            assert!(dev <= envelope, "row {i}: {dev} > {envelope}");
        }
    }

    #[test]
    fn mean_pool_examples() {
        let row = DenseMatrix::from_row_slice(1, 3, &[1.0, -2.0, 5.0]);
        assert_eq!(mean_pool(&row).unwrap(), vec![1.0, -2.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_dense(6, 4, &mut rng);
        let stacked = DenseMatrix::from_fn(12, 4, |i, j| if i < 6 { z[(i, j)] } else { -z[(i - 6, j)] });
        assert!(mean_pool(&stacked).unwrap().iter().all(|v| v.abs() < 1e-15));
        let pooled = mean_pool(&z).unwrap();
        let want = oracle::column_mean(&oracle::to_rows(&z));
        for (a, b) in pooled.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mean_pool(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(5, 3, 4, 6, 1);
        let back = ModelParams::from_bytes(&params.to_bytes()).unwrap();
        back.check_dims(5, 3).unwrap();
        // Payload is f32, so a second round trip is exact.
        assert_eq!(ModelParams::from_bytes(&back.to_bytes()).unwrap(), back);
        for (a, b) in params.matrices().iter().zip(back.matrices()) {
            assert!((*a - b).amax() < 1e-6);
        }
        assert!(ModelParams::from_bytes(b"GRNQ").is_err());
        let bytes = params.to_bytes();
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(params.check_dims(6, 3).is_err());
    }

    #[test]
    fn low_pass_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let n = rng.random_range(5..200);
            let g = random_connected(n, 3.0 / n as f64, &mut rng);
            let s = normalize_adjacency(&g).unwrap();
            let h = random_dense(n, 3, &mut rng);
            let k = rng.random_range(1..4);
            let smoothed = propagate(&s, &h, k).unwrap();
            let before = dirichlet_energy(&h, &g).unwrap();
            let after = dirichlet_energy(&smoothed, &g).unwrap();
            assert!(after <= before, "trial {trial}: {after} > {before}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sgc_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = normalize_adjacency(&random_graph(20, 0.2, &mut rng)).unwrap();
            let h1 = random_dense(20, 4, &mut rng);
            let h2 = random_dense(20, 4, &mut rng);
            let t1 = random_dense(4, 3, &mut rng);
            let t2 = random_dense(4, 3, &mut rng);
            let lhs = sgc_forward(&s, &(&h1 * a + &h2 * b), &t1, 2).unwrap();
            let rhs = sgc_forward(&s, &h1, &t1, 2).unwrap() * a + sgc_forward(&s, &h2, &t1, 2).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
            let lhs = sgc_forward(&s, &h1, &(&t1 * a + &t2 * b), 2).unwrap();
            let rhs = sgc_forward(&s, &h1, &t1, 2).unwrap() * a + sgc_forward(&s, &h1, &t2, 2).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
