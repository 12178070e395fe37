//! Training loop, node subsampling and inference-time fusion.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    knn_similarity_graph, nonidentity_permutation, ppr_diffusion, regular_graph, ViewSet,
    MAX_CERTIFY_N,
};
use crate::data::RoadDataset;
use crate::encoder::{sgc_forward, EmbeddingMatrix, ModelParams};
use crate::error::{GarnerError, Result};
use crate::graph::{normalize_adjacency, normalize_symmetric, DenseMatrix, SparseGraph};
use crate::objective::{loss_and_gradients, BatchGraphs, LossBreakdown, ObjectiveInputs, ObjectiveOptions};

/// Hyper-parameters of a training run.
///
/// JSON keys follow the short names (`k`, `d`, `alpha`, `p`, `f`, `K`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Neighbours per node in the configuration kNN graph.
    #[serde(rename = "k")]
    pub knn_k: usize,
    /// Degree of the random regular negative graph.
    #[serde(rename = "d")]
    pub neg_degree: usize,
    /// PPR teleport probability.
    pub alpha: f64,
    #[serde(rename = "p")]
    pub proj_dim: usize,
    #[serde(rename = "f")]
    pub embed_dim: usize,
    /// SGC propagation depth.
    #[serde(rename = "K")]
    pub hops: usize,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub patience: usize,
    pub seed: u64,
    /// Neumann-series terms for the diffusion view.
    pub ppr_terms: usize,
    /// Entries kept per row of the diffusion matrix.
    pub diffusion_topk: usize,
    /// Certify the negative graph on the first step and every this many steps.
    pub certify_every: usize,
    /// Disk checkpoint interval in iterations (when a directory is given).
    pub checkpoint_every: usize,
    /// Feed geographic configurations into the input projection.
    pub config_inputs: bool,
    pub objective: ObjectiveOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            knn_k: 6,
            neg_degree: 22,
            alpha: 0.2,
            proj_dim: 256,
            embed_dim: 512,
            hops: 2,
            lr: 0.001,
            iters: 2500,
            batch: 4000,
            patience: 50,
            seed: 0,
            ppr_terms: 64,
            diffusion_topk: 64,
            certify_every: 100,
            checkpoint_every: 500,
            config_inputs: true,
            objective: ObjectiveOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.knn_k),
            ("d", self.neg_degree),
            ("p", self.proj_dim),
            ("f", self.embed_dim),
            ("batch", self.batch),
            ("patience", self.patience),
            ("ppr_terms", self.ppr_terms),
            ("diffusion_topk", self.diffusion_topk),
            ("certify_every", self.certify_every),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GarnerError::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GarnerError::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GarnerError::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.objective.config_view && !self.objective.diffusion_view {
            return Err(GarnerError::InvalidArgument(
                "at least one of config_view and diffusion_view must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ms = self.m.matrices_mut();
        let vs = self.v.matrices_mut();
        for (((p, g), m), v) in params.matrices_mut().into_iter().zip(grads.matrices()).zip(ms).zip(vs) {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Mixes a seed with a tag and counter into an independent seed.
fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_NEGATIVE: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

/// Largest usable regular degree on `m` nodes not exceeding `d`.
pub fn feasible_degree(m: usize, d: usize) -> usize {
    let mut d = d.min(m.saturating_sub(1));
    if (m * d) % 2 == 1 {
        d -= 1;
    }
    d
}

/// Topology, configuration kNN and diffusion graphs (unnormalized).
pub fn positive_views(ds: &RoadDataset, cfg: &TrainConfig) -> Result<[SparseGraph; 3]> {
    let g0 = ds.graph.clone();
    let g1 = if cfg.objective.config_view {
        knn_similarity_graph(&ds.config, cfg.knn_k.min(ds.n().saturating_sub(1)).max(1))?
    } else {
        SparseGraph::empty(ds.n())
    };
    let g2 = ppr_diffusion(&ds.graph, cfg.alpha, cfg.ppr_terms, cfg.diffusion_topk)?;
    Ok([g0, g1, g2])
}

/// All four views on the full dataset; the negative graph is certified when
/// small enough for a dense eigensolve.
pub fn build_views(ds: &RoadDataset, cfg: &TrainConfig) -> Result<ViewSet> {
    let [g0, g1, g2] = positive_views(ds, cfg)?;
    let d = feasible_degree(ds.n(), cfg.neg_degree);
    let gneg = regular_graph(ds.n(), d, derive_seed(cfg.seed, TAG_NEGATIVE, u64::MAX), true)?;
    ViewSet::new(g0, g1, g2, gneg)
}

/// Views restricted to a node sample, aligned across views.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub views: ViewSet,
    /// Original id of each re-indexed node.
    pub nodes: Vec<usize>,
}

fn sample_nodes(n: usize, batch: usize, seed: u64) -> Result<Option<Vec<usize>>> {
    if batch == 0 {
        return Err(GarnerError::InvalidArgument("batch size must be at least 1".into()));
    }
    if batch >= n {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = rand::seq::index::sample(&mut rng, n, batch).into_vec();
    nodes.sort_unstable();
    Ok(Some(nodes))
}

/// Uniform node sample shared by every view; only edges between sampled
/// nodes survive, and a fresh regular negative graph of the sample size is
/// drawn. `batch >= n` returns the views unchanged.
pub fn subsample_views(views: &ViewSet, batch: usize, seed: u64) -> Result<Subsample> {
    let n = views.n();
    let Some(nodes) = sample_nodes(n, batch, seed)? else {
        return Ok(Subsample {
            views: views.clone(),
            nodes: (0..n).collect(),
        });
    };
    let d = feasible_degree(nodes.len(), views.gneg.out_degree(0));
    let gneg = regular_graph(nodes.len(), d, derive_seed(seed, TAG_NEGATIVE, 0), true)?;
    Ok(Subsample {
        views: ViewSet::new(
            views.g0.induced_subgraph(&nodes)?,
            views.g1.induced_subgraph(&nodes)?,
            views.g2.induced_subgraph(&nodes)?,
            gneg,
        )?,
        nodes,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Iteration whose parameters were returned, if any step ran.
    pub best_iter: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// `iter,l1,l2,total` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,l1,l2,total\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.iter, r.loss.l1, r.loss.l2, r.loss.total));
        }
        s
    }
}

/// Training inputs with configurations masked out when `config_inputs` is off.
fn input_blocks(ds: &RoadDataset, cfg: &TrainConfig) -> (DenseMatrix, DenseMatrix) {
    let config = if cfg.config_inputs {
        ds.config.clone()
    } else {
        DenseMatrix::zeros(ds.n(), ds.config_dim())
    };
    (config, ds.features.clone())
}

fn select_rows(m: &DenseMatrix, nodes: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(nodes.len(), m.ncols(), |i, j| m[(nodes[i], j)])
}

/// Runs the optimisation; see [`train_with_checkpoints`].
pub fn train(ds: &RoadDataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    train_with_checkpoints(ds, cfg, None)
}

/// Minimizes `L1 + L2` with Adam on subsampled batches.
///
/// Stops after `cfg.iters` steps or once the best loss has not improved for
/// `cfg.patience` steps, returning the best iterate. With a checkpoint
/// directory, parameters are written every `cfg.checkpoint_every` steps.
pub fn train_with_checkpoints(
    ds: &RoadDataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let n = ds.n();
    if n < 2 {
        return Err(GarnerError::InvalidArgument("training needs at least two roads".into()));
    }
    let mut params = ModelParams::init(
        ds.config_dim(),
        ds.feature_dim(),
        cfg.proj_dim,
        cfg.embed_dim,
        derive_seed(cfg.seed, TAG_INIT, 0),
    );
    let mut log = TrainLog::default();
    if cfg.iters == 0 {
        return Ok((params, log));
    }

    let raw_views = positive_views(ds, cfg)?;
    let (config, features) = input_blocks(ds, cfg);
    let full_normalized = if cfg.batch >= n {
        Some(normalize_views(&raw_views)?)
    } else {
        None
    };

    let mut adam = Adam::new(&params, cfg.lr);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut warned_uncertified = false;
    for iter in 0..cfg.iters {
        let sampled = sample_nodes(n, cfg.batch, derive_seed(cfg.seed, TAG_SAMPLE, iter as u64))?;
        let (views, batch_config, batch_features) = match &sampled {
            None => (full_normalized.clone().unwrap(), config.clone(), features.clone()),
            Some(nodes) => {
                let induced = [
                    raw_views[0].induced_subgraph(nodes)?,
                    raw_views[1].induced_subgraph(nodes)?,
                    raw_views[2].induced_subgraph(nodes)?,
                ];
                (
                    normalize_views(&induced)?,
                    select_rows(&config, nodes),
                    select_rows(&features, nodes),
                )
            }
        };
        let m = batch_config.nrows();
        let d = feasible_degree(m, cfg.neg_degree);
        let certify = iter % cfg.certify_every == 0;
        if certify && m > MAX_CERTIFY_N && !warned_uncertified {
            log::warn!("batch of {m} nodes exceeds the certification cap; negative graphs are uncertified");
            warned_uncertified = true;
        }
        let neg_seed = derive_seed(cfg.seed, TAG_NEGATIVE, iter as u64);
        let negative = normalize_symmetric(&regular_graph(m, d, neg_seed, certify)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE, iter as u64));
        let permutation = nonidentity_permutation(m, &mut rng)?;

        let batch = BatchGraphs {
            views,
            negative,
            config: batch_config,
            features: batch_features,
            permutation,
        };
        let inputs = ObjectiveInputs::prepare(&batch, cfg.hops, cfg.objective)?;
        let (loss, grads) = loss_and_gradients(&inputs, &params)?;
        log.records.push(LogRecord { iter, loss });
        if loss.total < best.0 {
            best = (loss.total, params.clone(), iter);
        }
        if iter % 100 == 0 {
            log::info!("iter {iter}: l1={:.5} l2={:.5} total={:.5}", loss.l1, loss.l2, loss.total);
        }
        if iter - best.2 >= cfg.patience {
            log.stopped_early = true;
            break;
        }
        adam.step(&mut params, &grads);
        if let Some(dir) = checkpoint_dir {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                let path: PathBuf = dir.join(format!("checkpoint_{:06}.grnp", iter + 1));
                params.save(&path)?;
            }
        }
    }
    log.best_iter = Some(best.2);
    Ok((best.1, log))
}

fn normalize_views(views: &[SparseGraph; 3]) -> Result<[SparseGraph; 3]> {
    Ok([
        normalize_adjacency(&views[0])?,
        normalize_adjacency(&views[1])?,
        normalize_adjacency(&views[2])?,
    ])
}

/// Per-view full-graph embeddings; disabled views are `None`.
pub fn embed_views(
    ds: &RoadDataset,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<[Option<EmbeddingMatrix>; 3]> {
    params.check_dims(ds.config_dim(), ds.feature_dim())?;
    let views = positive_views(ds, cfg)?;
    let (config, features) = input_blocks(ds, cfg);
    let h0 = crate::data::project_blocks(&config, &features, &params.w_c, &params.w_x)?;
    let enabled = [true, cfg.objective.config_view, cfg.objective.diffusion_view];
    let mut out: [Option<EmbeddingMatrix>; 3] = [None, None, None];
    for v in 0..3 {
        if enabled[v] {
            let s_hat = normalize_adjacency(&views[v])?;
            out[v] = Some(sgc_forward(&s_hat, &h0, &params.theta[v], cfg.hops)?);
        }
    }
    Ok(out)
}

/// Elementwise mean of view embeddings.
pub fn fuse(views: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = views
        .first()
        .ok_or_else(|| GarnerError::InvalidArgument("nothing to fuse".into()))?;
    let mut sum = (*first).clone();
    for z in &views[1..] {
        if z.shape() != sum.shape() {
            return Err(GarnerError::dims(
                "fuse",
                format!("{}x{}", sum.nrows(), sum.ncols()),
                format!("{}x{}", z.nrows(), z.ncols()),
            ));
        }
        sum += *z;
    }
    Ok(sum / views.len() as f64)
}

/// Fused road embeddings `(Z⁽⁰⁾ + Z⁽¹⁾ + Z⁽²⁾) / 3` over the enabled views.
pub fn embed(ds: &RoadDataset, params: &ModelParams, cfg: &TrainConfig) -> Result<EmbeddingMatrix> {
    let views = embed_views(ds, params, cfg)?;
    let present: Vec<&EmbeddingMatrix> = views.iter().flatten().collect();
    fuse(&present)
}
