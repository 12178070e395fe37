//! Downstream probes on frozen embeddings: road function classification,
//! traffic-speed regression and configuration-query retrieval.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelSet, FUNCTION_CLASSES};
use crate::encoder::{EmbeddingMatrix, ModelParams};
use crate::error::{GarnerError, Result};
use crate::graph::{ensure_finite, DenseMatrix};

/// Train / validation / test fractions.
pub const SPLIT: [f64; 3] = [0.7, 0.1, 0.2];
pub const LOGISTIC_LAMBDA: f64 = 1e-4;
pub const LOGISTIC_TOL: f64 = 1e-6;
pub const LOGISTIC_MAX_ITERS: usize = 5000;
pub const RIDGE_LAMBDA: f64 = 1e-2;
const MAPE_FLOOR: f64 = 1e-6;
const MAX_RESPLITS: usize = 100;

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
    pub split: [f64; 3],
}

impl EvalReport {
    fn new(task: &str, seed: u64, metrics: &[(&str, f64)]) -> Result<Self> {
        for (name, v) in metrics {
            if !v.is_finite() {
                return Err(GarnerError::NonFinite(format!("{task} metric {name}")));
            }
        }
        Ok(EvalReport {
            task: task.to_string(),
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
            split: SPLIT,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Mean and population standard deviation of each metric over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub reports: Vec<EvalReport>,
}

pub fn summarize(reports: Vec<EvalReport>) -> Result<EvalSummary> {
    let first = reports
        .first()
        .ok_or_else(|| GarnerError::InvalidArgument("no reports to summarize".into()))?;
    let task = first.task.clone();
    let names: Vec<String> = first.metrics.keys().cloned().collect();
    let runs = reports.len() as f64;
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for name in names {
        let values: Vec<f64> = reports
            .iter()
            .map(|r| {
                r.metric(&name).ok_or_else(|| {
                    GarnerError::InvalidArgument(format!("report missing metric {name}"))
                })
            })
            .collect::<Result<_>>()?;
        let m = values.iter().sum::<f64>() / runs;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / runs;
        mean.insert(name.clone(), m);
        std.insert(name, var.sqrt());
    }
    Ok(EvalSummary {
        task,
        runs: reports.len(),
        mean,
        std,
        reports,
    })
}

/// Shuffled index split into train, validation and test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, rng: &mut ChaCha8Rng) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = (SPLIT[0] * n as f64).round() as usize;
    let n_val = (SPLIT[1] * n as f64).round() as usize;
    let n_val = n_val.min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Column means and standard deviations of `m` (zero spread maps to 1).
fn column_stats(m: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let rows = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    for col in m.column_iter() {
        let mu = col.sum() / rows;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / rows;
        means.push(mu);
        stds.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
    }
    (means, stds)
}

/// Standardized copy of `m` with a trailing column of ones.
fn design(m: &DenseMatrix, means: &[f64], stds: &[f64]) -> DenseMatrix {
    let d = m.ncols();
    DenseMatrix::from_fn(m.nrows(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (m[(i, j)] - means[j]) / stds[j]
        }
    })
}

/// Row-wise softmax in place.
fn softmax_rows(logits: &mut DenseMatrix) {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Largest eigenvalue of the PSD matrix `m` by power iteration.
fn top_eigenvalue(m: &DenseMatrix) -> f64 {
    let mut v = DVector::from_element(m.ncols(), 1.0 / (m.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

/// Multinomial logistic regression with an L2 penalty on the non-bias weights.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    means: Vec<f64>,
    stds: Vec<f64>,
    weights: DenseMatrix,
    pub iterations: usize,
}

impl LogisticProbe {
    /// Minimizes mean cross-entropy plus `λ/2 ‖W‖²` by accelerated gradient
    /// descent until the largest gradient entry drops below `LOGISTIC_TOL`.
    pub fn fit(x: &DenseMatrix, y: &[usize], classes: usize, lambda: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GarnerError::dims("probe labels", x.nrows(), y.len()));
        }
        if x.nrows() == 0 {
            return Err(GarnerError::InvalidArgument("empty training set".into()));
        }
        let (means, stds) = column_stats(x);
        let a = design(x, &means, &stds);
        let (m, d) = (a.nrows() as f64, a.ncols());
        let mut target = DenseMatrix::zeros(a.nrows(), classes);
        for (i, &c) in y.iter().enumerate() {
            target[(i, c)] = 1.0;
        }
        let gram = a.transpose() * &a / m;
        let step = 1.0 / (0.5 * top_eigenvalue(&gram) + lambda);
        let gradient = |w: &DenseMatrix| {
            let mut p = &a * w;
            softmax_rows(&mut p);
            let mut g = a.transpose() * (p - &target) / m;
            for r in 0..d - 1 {
                for c in 0..classes {
                    g[(r, c)] += lambda * w[(r, c)];
                }
            }
            g
        };
        let mut w = DenseMatrix::zeros(d, classes);
        let mut w_prev = w.clone();
        let mut iterations = 0;
        for it in 1..=LOGISTIC_MAX_ITERS {
            iterations = it;
            let momentum = (it as f64 - 1.0) / (it as f64 + 2.0);
            let look = &w + (&w - &w_prev) * momentum;
            let g = gradient(&look);
            w_prev = std::mem::replace(&mut w, look - g * step);
            let g_now = gradient(&w);
            if g_now.amax() < LOGISTIC_TOL {
                break;
            }
        }
        ensure_finite(&w, "logistic probe weights")?;
        Ok(LogisticProbe {
            means,
            stds,
            weights: w,
            iterations,
        })
    }

    pub fn predict_proba(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut p = design(x, &self.means, &self.stds) * &self.weights;
        softmax_rows(&mut p);
        p
    }
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Micro- and macro-averaged F1. Macro averages over classes present in
/// either the truth or the predictions.
pub fn f1_scores(truth: &[usize], pred: &[usize], classes: usize) -> (f64, f64) {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let micro = correct as f64 / truth.len().max(1) as f64;
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..classes {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64;
        count += 1;
    }
    (micro, if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Area under the ROC curve via the rank-sum statistic (ties averaged).
/// Returns `None` when either class is absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| positive[order[k]]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUROC averaged over classes with both positives and negatives.
pub fn macro_auroc(proba: &DenseMatrix, truth: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..proba.ncols() {
        let scores: Vec<f64> = proba.column(c).iter().copied().collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(a) = auroc(&scores, &positive) {
            sum += a;
            count += 1;
        }
    }
    if count == 0 {
        0.5
    } else {
        sum / count as f64
    }
}

fn check_rows(z: &EmbeddingMatrix, n: usize, what: &'static str) -> Result<()> {
    if z.nrows() != n {
        return Err(GarnerError::dims(what, n, z.nrows()));
    }
    ensure_finite(z, "embeddings")
}

/// Road function prediction with a logistic probe on one random split.
///
/// Splits lacking some class in the training part are redrawn.
pub fn eval_function(z: &EmbeddingMatrix, labels: &LabelSet, seed: u64) -> Result<EvalReport> {
    let LabelSet::Function(classes) = labels else {
        return Err(GarnerError::InvalidArgument(format!(
            "function evaluation needs function labels, got {}",
            labels.task_name()
        )));
    };
    labels.validate(z.nrows())?;
    check_rows(z, classes.len(), "function embeddings")?;
    let present: Vec<bool> = (0..FUNCTION_CLASSES).map(|c| classes.contains(&c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = (0..MAX_RESPLITS)
        .map(|_| split_indices(classes.len(), &mut rng))
        .find(|s| {
            (0..FUNCTION_CLASSES).all(|c| !present[c] || s.train.iter().any(|&i| classes[i] == c))
        })
        .ok_or_else(|| {
            GarnerError::InvalidArgument("could not draw a split covering every class".into())
        })?;
    if split.test.is_empty() {
        return Err(GarnerError::InvalidArgument("too few roads for a test split".into()));
    }
    let y_train: Vec<usize> = split.train.iter().map(|&i| classes[i]).collect();
    let y_test: Vec<usize> = split.test.iter().map(|&i| classes[i]).collect();
    let probe = LogisticProbe::fit(&select_rows(z, &split.train), &y_train, FUNCTION_CLASSES, LOGISTIC_LAMBDA)?;
    let proba = probe.predict_proba(&select_rows(z, &split.test));
    let pred: Vec<usize> = proba.row_iter().map(|r| argmax(r.iter().copied())).collect();
    let (micro, macro_f1) = f1_scores(&y_test, &pred, FUNCTION_CLASSES);
    EvalReport::new(
        "function",
        seed,
        &[("micro_f1", micro), ("macro_f1", macro_f1), ("auroc", macro_auroc(&proba, &y_test))],
    )
}

/// Closed-form ridge regression on centered data.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    x_mean: Vec<f64>,
    y_mean: f64,
    beta: DVector<f64>,
    /// Penalty actually used (raised tenfold after a failed factorization).
    pub lambda: f64,
}

impl RidgeModel {
    /// Solves `(XcᵀXc + λI) β = Xcᵀyc`; on a failed Cholesky factorization
    /// λ is multiplied by ten and the solve retried once.
    pub fn fit(x: &DenseMatrix, y: &[f64], lambda: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GarnerError::dims("ridge targets", x.nrows(), y.len()));
        }
        if y.is_empty() {
            return Err(GarnerError::InvalidArgument("empty training set".into()));
        }
        let (x_mean, _) = column_stats(x);
        let rows = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / rows;
        let xc = DenseMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let gram = xc.transpose() * &xc;
        let rhs = xc.transpose() * yc;
        for lam in [lambda, lambda * 10.0] {
            let mut a = gram.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lam;
            }
            if let Some(chol) = a.cholesky() {
                let beta = chol.solve(&rhs);
                if beta.iter().all(|v| v.is_finite()) {
                    return Ok(RidgeModel {
                        x_mean,
                        y_mean,
                        beta,
                        lambda: lam,
                    });
                }
            }
            log::warn!("ridge system not positive definite at lambda={lam}");
        }
        Err(GarnerError::InvalidArgument(
            "ridge design matrix is degenerate even after raising lambda".into(),
        ))
    }

    pub fn predict(&self, x: &DenseMatrix) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.y_mean
                    + (0..x.ncols())
                        .map(|j| (x[(i, j)] - self.x_mean[j]) * self.beta[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// `(MAE, RMSE, MAPE)`; MAPE skips targets with `|y| < 1e-6` and is 0 when
/// none remain.
pub fn regression_errors(truth: &[f64], pred: &[f64]) -> (f64, f64, f64) {
    let n = truth.len().max(1) as f64;
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let rmse = (truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n).sqrt();
    let kept: Vec<f64> = truth
        .iter()
        .zip(pred)
        .filter(|(t, _)| t.abs() >= MAPE_FLOOR)
        .map(|(t, p)| ((t - p) / t).abs())
        .collect();
    let mape = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    (mae, rmse, mape)
}

/// Traffic speed inference with a ridge probe on one random split.
pub fn eval_traffic(z: &EmbeddingMatrix, labels: &LabelSet, seed: u64) -> Result<EvalReport> {
    let LabelSet::Traffic(speeds) = labels else {
        return Err(GarnerError::InvalidArgument(format!(
            "traffic evaluation needs traffic labels, got {}",
            labels.task_name()
        )));
    };
    labels.validate(z.nrows())?;
    check_rows(z, speeds.len(), "traffic embeddings")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = split_indices(speeds.len(), &mut rng);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(GarnerError::InvalidArgument("too few roads for a train/test split".into()));
    }
    let y_train: Vec<f64> = split.train.iter().map(|&i| speeds[i]).collect();
    let y_test: Vec<f64> = split.test.iter().map(|&i| speeds[i]).collect();
    let model = RidgeModel::fit(&select_rows(z, &split.train), &y_train, RIDGE_LAMBDA)?;
    let pred = model.predict(&select_rows(z, &split.test));
    let (mae, rmse, mape) = regression_errors(&y_test, &pred);
    EvalReport::new("traffic", seed, &[("mae", mae), ("rmse", rmse), ("mape", mape)])
}

fn cosine(a: &[f64], b: &[f64], b_norm: f64) -> f64 {
    let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = a_norm * b_norm;
    if denom == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom
    }
}

/// Embeds configuration-space queries as `(q W_c) Θ⁽¹⁾[..p, :]`: the input
/// projection with a zero feature block followed by the configuration-view
/// encoder without propagation.
pub fn map_queries(queries: &DenseMatrix, params: &ModelParams) -> Result<DenseMatrix> {
    if queries.ncols() != params.w_c.nrows() {
        return Err(GarnerError::dims("query dimension", params.w_c.nrows(), queries.ncols()));
    }
    let p = params.proj_dim();
    Ok(queries * &params.w_c * params.theta[1].rows(0, p))
}

/// 1-based rank of `truth` when roads are sorted by descending score; ties
/// are resolved in the truth's favour.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores.iter().filter(|&&v| v > s).count()
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> f64 {
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len().max(1) as f64
}

/// Ranks of each query's ground-truth road under cosine similarity.
pub fn retrieval_ranks(z: &EmbeddingMatrix, mapped: &DenseMatrix, truth: &[usize]) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().copied().collect()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    mapped
        .row_iter()
        .zip(truth)
        .map(|(q, &t)| {
            let q: Vec<f64> = q.iter().copied().collect();
            let scores: Vec<f64> = rows.iter().zip(&norms).map(|(r, &nr)| cosine(&q, r, nr)).collect();
            rank_of(&scores, t)
        })
        .collect()
}

/// Configuration-query retrieval: Recall@10 and MRR.
pub fn eval_retrieval(z: &EmbeddingMatrix, labels: &LabelSet, params: &ModelParams) -> Result<EvalReport> {
    let LabelSet::Retrieval { queries, truth } = labels else {
        return Err(GarnerError::InvalidArgument(format!(
            "retrieval evaluation needs retrieval queries, got {}",
            labels.task_name()
        )));
    };
    labels.validate(z.nrows())?;
    ensure_finite(z, "embeddings")?;
    if z.ncols() != params.embed_dim() {
        return Err(GarnerError::dims("embedding width", params.embed_dim(), z.ncols()));
    }
    if truth.is_empty() {
        return Err(GarnerError::InvalidArgument("no retrieval queries".into()));
    }
    let mapped = map_queries(queries, params)?;
    let ranks = retrieval_ranks(z, &mapped, truth);
    EvalReport::new(
        "retrieval",
        0,
        &[("recall_at_10", recall_at(&ranks, 10)), ("mrr", mean_reciprocal_rank(&ranks))],
    )
}

/// Runs a seeded evaluation once per seed and summarizes.
pub fn eval_over_seeds(
    seeds: impl IntoIterator<Item = u64>,
    mut run: impl FnMut(u64) -> Result<EvalReport>,
) -> Result<EvalSummary> {
    summarize(seeds.into_iter().map(&mut run).collect::<Result<Vec<_>>>()?)
}
