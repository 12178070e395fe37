//! Dual contrastive objective with closed-form gradients.
//!
//! Each mutual-information term contrasts node embeddings of one view
//! against the mean-pooled summary of another through a bilinear
//! discriminator `D(a, b) = σ(aᵀ W b)`, using the Jensen–Shannon estimator
//!
//! ```text
//! MI = mean_i log σ(s_i) + mean_i log(1 − σ(t_i))
//! ```
//!
//! with positive scores `s` and negative scores `t`. All logs are evaluated
//! as `−softplus(·)` on raw scores.
//!
//! The model is linear up to the logistic loss. Every view embedding has the
//! form `Z = [P C W_c | P X W_x] Θ` for a fixed propagation `P`, so a batch
//! precomputes `P C` and `P X` once and the gradient of every parameter
//! follows by the chain rule through matrix products.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::augment::permute_rows;
use crate::data::project_blocks;
use crate::encoder::{mean_pool, EmbeddingMatrix, ModelParams};
use crate::error::{GarnerError, Result};
use crate::graph::{propagate, spmm, DenseMatrix, SparseGraph};

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw bilinear score `aᵀ W b`.
pub fn discriminator_score(a: &[f64], b: &[f64], w: &DenseMatrix) -> Result<f64> {
    if w.nrows() != a.len() || w.ncols() != b.len() {
        return Err(GarnerError::dims(
            "discriminator",
            format!("{}x{}", a.len(), b.len()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    let wb = w * DVector::from_column_slice(b);
    Ok(a.iter().zip(wb.iter()).map(|(x, y)| x * y).sum())
}

/// Discriminator probability `σ(aᵀ W b)`.
pub fn discriminate(a: &[f64], b: &[f64], w: &DenseMatrix) -> Result<f64> {
    discriminator_score(a, b, w).map(sigmoid)
}

fn check_mi_shapes(
    z_pos: &EmbeddingMatrix,
    summary: &[f64],
    z_neg: &EmbeddingMatrix,
    w: &DenseMatrix,
) -> Result<()> {
    let f = summary.len();
    if z_pos.nrows() != z_neg.nrows() {
        return Err(GarnerError::dims("jsd_mi rows", z_pos.nrows(), z_neg.nrows()));
    }
    if z_pos.nrows() == 0 {
        return Err(GarnerError::InvalidArgument("jsd_mi on zero nodes".into()));
    }
    if w.shape() != (f, f) || z_pos.ncols() != f || z_neg.ncols() != f {
        return Err(GarnerError::dims(
            "jsd_mi widths",
            f,
            format!("pos {}, neg {}, W {}x{}", z_pos.ncols(), z_neg.ncols(), w.nrows(), w.ncols()),
        ));
    }
    Ok(())
}

/// Jensen–Shannon MI estimate between node rows of `z_pos` and `summary`,
/// with `z_neg` rows as the corrupted counterparts. Always `<= 0`.
pub fn jsd_mi(
    z_pos: &EmbeddingMatrix,
    summary: &[f64],
    z_neg: &EmbeddingMatrix,
    w: &DenseMatrix,
) -> Result<f64> {
    check_mi_shapes(z_pos, summary, z_neg, w)?;
    let u = w * DVector::from_column_slice(summary);
    let n = z_pos.nrows() as f64;
    let pos: f64 = (z_pos * &u).iter().map(|&s| softplus(-s)).sum();
    let neg: f64 = (z_neg * &u).iter().map(|&t| softplus(t)).sum();
    Ok(-(pos + neg) / n)
}

/// Negated sum of the two cross-view MI terms between `za` and `zb`:
/// `−[MI(za_i, pool(zb)) + MI(zb_i, pool(za))]`.
pub fn pair_loss(
    za: &EmbeddingMatrix,
    zb: &EmbeddingMatrix,
    za_neg: &EmbeddingMatrix,
    zb_neg: &EmbeddingMatrix,
    w: &DenseMatrix,
) -> Result<f64> {
    let ga = mean_pool(za)?;
    let gb = mean_pool(zb)?;
    Ok(-(jsd_mi(za, &gb, za_neg, w)? + jsd_mi(zb, &ga, zb_neg, w)?))
}

/// Topology/configuration loss; `z1_neg` is the spectral negative.
pub fn loss_l1(
    z0: &EmbeddingMatrix,
    z1: &EmbeddingMatrix,
    z0_shuf_neg: &EmbeddingMatrix,
    z1_spec_neg: &EmbeddingMatrix,
    w1: &DenseMatrix,
) -> Result<f64> {
    pair_loss(z0, z1, z0_shuf_neg, z1_spec_neg, w1)
}

/// Topology/diffusion loss with shuffled negatives on both sides.
pub fn loss_l2(
    z0: &EmbeddingMatrix,
    z2: &EmbeddingMatrix,
    z0_shuf_neg: &EmbeddingMatrix,
    z2_shuf_neg: &EmbeddingMatrix,
    w2: &DenseMatrix,
) -> Result<f64> {
    pair_loss(z0, z2, z0_shuf_neg, z2_shuf_neg, w2)
}

/// Loss values for one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// `MI(Z0, Z1_g)`, `MI(Z1, Z0_g)`, `MI(Z0, Z2_g)`, `MI(Z2, Z0_g)`; zero when a loss is disabled.
    pub mi: [f64; 4],
}

/// How a view's negative embeddings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    /// Row-shuffled inputs through the view's own encoder.
    Shuffle,
    /// Inputs through one propagation over the normalized regular graph.
    Spectral,
}

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveOptions {
    /// Contrast topology against the configuration kNN view (loss 1).
    pub config_view: bool,
    /// Contrast topology against the diffusion view (loss 2).
    pub diffusion_view: bool,
    /// Negatives for the configuration view in loss 1.
    pub config_negative: NegativeKind,
    /// Negatives for the diffusion view in loss 2.
    pub diffusion_negative: NegativeKind,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            config_view: true,
            diffusion_view: true,
            config_negative: NegativeKind::Spectral,
            diffusion_negative: NegativeKind::Shuffle,
        }
    }
}

/// `P C` and `P X` for one fixed propagation `P`.
#[derive(Debug, Clone)]
struct Propagated {
    config: DenseMatrix,
    features: DenseMatrix,
}

impl Propagated {
    fn new(config: DenseMatrix, features: DenseMatrix) -> Self {
        Propagated { config, features }
    }

    fn through(&self, g: &SparseGraph, steps: usize) -> Result<Self> {
        Ok(Propagated {
            config: propagate(g, &self.config, steps)?,
            features: propagate(g, &self.features, steps)?,
        })
    }

    fn inputs(&self, params: &ModelParams) -> Result<DenseMatrix> {
        project_blocks(&self.config, &self.features, &params.w_c, &params.w_x)
    }
}

/// Normalized operators and raw inputs of one training batch.
#[derive(Debug, Clone)]
pub struct BatchGraphs {
    /// `Ŝ` of topology, configuration kNN and diffusion views.
    pub views: [SparseGraph; 3],
    /// Degree-normalized regular negative graph.
    pub negative: SparseGraph,
    pub config: DenseMatrix,
    pub features: DenseMatrix,
    /// Row permutation used for shuffled negatives.
    pub permutation: Vec<usize>,
}

/// Parameter-independent precomputation for [`loss_and_gradients`].
#[derive(Debug, Clone)]
pub struct ObjectiveInputs {
    options: ObjectiveOptions,
    positive: [Propagated; 3],
    shuffled: [Propagated; 3],
    spectral: Propagated,
    n: usize,
}

impl ObjectiveInputs {
    /// Propagates raw and shuffled inputs through each view `k` times and
    /// through the negative graph once.
    pub fn prepare(batch: &BatchGraphs, k: usize, options: ObjectiveOptions) -> Result<Self> {
        let n = batch.config.nrows();
        if batch.features.nrows() != n {
            return Err(GarnerError::dims("batch features", n, batch.features.nrows()));
        }
        if batch.permutation.len() != n {
            return Err(GarnerError::dims("batch permutation", n, batch.permutation.len()));
        }
        if n < 2 {
            return Err(GarnerError::InvalidArgument("a batch needs at least two nodes".into()));
        }
        let raw = Propagated::new(batch.config.clone(), batch.features.clone());
        let shuffled_raw = Propagated::new(
            permute_rows(&batch.config, &batch.permutation),
            permute_rows(&batch.features, &batch.permutation),
        );
        let positive = [
            raw.through(&batch.views[0], k)?,
            raw.through(&batch.views[1], k)?,
            raw.through(&batch.views[2], k)?,
        ];
        let shuffled = [
            shuffled_raw.through(&batch.views[0], k)?,
            shuffled_raw.through(&batch.views[1], k)?,
            shuffled_raw.through(&batch.views[2], k)?,
        ];
        let spectral = Propagated {
            config: spmm(&batch.negative, &batch.config)?,
            features: spmm(&batch.negative, &batch.features)?,
        };
        Ok(ObjectiveInputs {
            options,
            positive,
            shuffled,
            spectral,
            n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn options(&self) -> ObjectiveOptions {
        self.options
    }

    /// Positive embedding of view `v` under `params`.
    pub fn positive_embedding(&self, v: usize, params: &ModelParams) -> Result<EmbeddingMatrix> {
        Ok(self.positive[v].inputs(params)? * &params.theta[v])
    }
}

/// Identifies an embedding computed during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Positive(usize),
    Shuffled(usize),
    Spectral(usize),
}

impl Slot {
    fn index(self) -> usize {
        match self {
            Slot::Positive(v) => v,
            Slot::Shuffled(v) => 3 + v,
            Slot::Spectral(v) => 6 + v,
        }
    }

    fn theta(self) -> usize {
        match self {
            Slot::Positive(v) | Slot::Shuffled(v) | Slot::Spectral(v) => v,
        }
    }
}

struct Encoded {
    slot: Slot,
    inputs: DenseMatrix,
    z: DenseMatrix,
    grad: DenseMatrix,
}

struct Forward<'a> {
    inputs: &'a ObjectiveInputs,
    params: &'a ModelParams,
    encoded: Vec<Option<Encoded>>,
}

impl<'a> Forward<'a> {
    fn new(inputs: &'a ObjectiveInputs, params: &'a ModelParams) -> Self {
        Forward {
            inputs,
            params,
            encoded: (0..9).map(|_| None).collect(),
        }
    }

    fn ensure(&mut self, slot: Slot) -> Result<usize> {
        let idx = slot.index();
        if self.encoded[idx].is_none() {
            let source = match slot {
                Slot::Positive(v) => &self.inputs.positive[v],
                Slot::Shuffled(v) => &self.inputs.shuffled[v],
                Slot::Spectral(_) => &self.inputs.spectral,
            };
            let h = source.inputs(self.params)?;
            let z = &h * &self.params.theta[slot.theta()];
            let grad = DenseMatrix::zeros(z.nrows(), z.ncols());
            self.encoded[idx] = Some(Encoded {
                slot,
                inputs: h,
                z,
                grad,
            });
        }
        Ok(idx)
    }

    fn z(&self, idx: usize) -> &DenseMatrix {
        &self.encoded[idx].as_ref().unwrap().z
    }

    fn grad_mut(&mut self, idx: usize) -> &mut DenseMatrix {
        &mut self.encoded[idx].as_mut().unwrap().grad
    }

    /// Adds `−MI(pos_i, pool(summary))` to the objective and accumulates its
    /// gradients. Returns the MI value.
    fn mi_term(
        &mut self,
        pos: Slot,
        summary: Slot,
        neg: Slot,
        disc: usize,
        disc_grad: &mut DenseMatrix,
    ) -> Result<f64> {
        let (ip, is, ineg) = (self.ensure(pos)?, self.ensure(summary)?, self.ensure(neg)?);
        let w = &self.params.disc[disc];
        let n = self.inputs.n as f64;
        let g = DVector::from_vec(mean_pool(self.z(is))?);
        let u = w * &g;
        let s = self.z(ip) * &u;
        let t = self.z(ineg) * &u;
        let mi = -(s.iter().map(|&x| softplus(-x)).sum::<f64>()
            + t.iter().map(|&x| softplus(x)).sum::<f64>())
            / n;

        // d(−MI)/ds_i = −σ(−s_i)/n, d(−MI)/dt_i = σ(t_i)/n.
        let ds = s.map(|x| -sigmoid(-x) / n);
        let dt = t.map(|x| sigmoid(x) / n);
        let du = self.z(ip).tr_mul(&ds) + self.z(ineg).tr_mul(&dt);
        let dg = w.tr_mul(&du);
        *disc_grad += &du * g.transpose();
        let u_row = u.transpose();
        *self.grad_mut(ip) += &ds * &u_row;
        *self.grad_mut(ineg) += &dt * &u_row;
        let dg_row = dg.transpose() / n;
        let summary_grad = self.grad_mut(is);
        for mut row in summary_grad.row_iter_mut() {
            row += &dg_row;
        }
        Ok(mi)
    }

    /// Pushes embedding gradients back to `Θ`, `W_c` and `W_x`.
    fn backward(self, grads: &mut ModelParams) {
        let p = self.params.proj_dim();
        for enc in self.encoded.into_iter().flatten() {
            let theta = &self.params.theta[enc.slot.theta()];
            grads.theta[enc.slot.theta()] += enc.inputs.tr_mul(&enc.grad);
            let dh = &enc.grad * theta.transpose();
            let source = match enc.slot {
                Slot::Positive(v) => &self.inputs.positive[v],
                Slot::Shuffled(v) => &self.inputs.shuffled[v],
                Slot::Spectral(_) => &self.inputs.spectral,
            };
            grads.w_c += source.config.tr_mul(&dh.columns(0, p));
            grads.w_x += source.features.tr_mul(&dh.columns(p, p));
        }
    }
}

fn negative_slot(kind: NegativeKind, view: usize) -> Slot {
    match kind {
        NegativeKind::Shuffle => Slot::Shuffled(view),
        NegativeKind::Spectral => Slot::Spectral(view),
    }
}

/// Total loss `L1 + L2` and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    inputs: &ObjectiveInputs,
    params: &ModelParams,
) -> Result<(LossBreakdown, ModelParams)> {
    let expected_c = inputs.positive[0].config.ncols();
    let expected_x = inputs.positive[0].features.ncols();
    params.check_dims(expected_c, expected_x)?;
    let opts = inputs.options;
    let mut grads = ModelParams::zeros_like(params);
    let mut fwd = Forward::new(inputs, params);
    let mut mi = [0.0; 4];

    let mut disc_grads = [
        DenseMatrix::zeros(params.embed_dim(), params.embed_dim()),
        DenseMatrix::zeros(params.embed_dim(), params.embed_dim()),
    ];
    let z0_neg = Slot::Shuffled(0);
    if opts.config_view {
        let z1_neg = negative_slot(opts.config_negative, 1);
        mi[0] = fwd.mi_term(Slot::Positive(0), Slot::Positive(1), z0_neg, 0, &mut disc_grads[0])?;
        mi[1] = fwd.mi_term(Slot::Positive(1), Slot::Positive(0), z1_neg, 0, &mut disc_grads[0])?;
    }
    if opts.diffusion_view {
        let z2_neg = negative_slot(opts.diffusion_negative, 2);
        mi[2] = fwd.mi_term(Slot::Positive(0), Slot::Positive(2), z0_neg, 1, &mut disc_grads[1])?;
        mi[3] = fwd.mi_term(Slot::Positive(2), Slot::Positive(0), z2_neg, 1, &mut disc_grads[1])?;
    }
    fwd.backward(&mut grads);
    let [d1, d2] = disc_grads;
    grads.disc = [d1, d2];

    let l1 = -(mi[0] + mi[1]);
    let l2 = -(mi[2] + mi[3]);
    let breakdown = LossBreakdown {
        l1,
        l2,
        total: l1 + l2,
        mi,
    };
    if !breakdown.total.is_finite() {
        return Err(GarnerError::NonFinite("training loss".into()));
    }
    Ok((breakdown, grads))
}

/// Loss value only.
pub fn loss(inputs: &ObjectiveInputs, params: &ModelParams) -> Result<LossBreakdown> {
    loss_and_gradients(inputs, params).map(|(b, _)| b)
}
