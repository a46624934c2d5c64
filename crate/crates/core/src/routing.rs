//! Key-block scoring, stochastic selection bias, and top-k routing.
//!
//! Scores combine the query-centroid/key-centroid dot product with a
//! log-heterogeneity prior. An optional Gumbel bias, keyed on
//! (seed, timestep, layer, head, i, j), softens the top-k boundary; beta = 0
//! reproduces deterministic routing bit for bit.

use serde::Serialize;

use crate::blockstats::{BlockPartition, BlockStatistics};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::rng::CounterRng;

const GUMBEL_STREAM: u64 = 0x47;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoutingConfig {
    /// Stabilizer inside log(het_norm + epsilon).
    pub epsilon: f64,
    /// Noise scale as a multiple of the per-row score standard deviation.
    pub bias_beta: f64,
    pub seed: u64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            epsilon: 1e-6,
            bias_beta: 0.1,
            seed: 0,
        }
    }
}

/// Position of a routing call within a run. Combined with the seed it keys
/// every noise draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RngContext {
    pub timestep: u64,
    pub layer: u64,
    pub head: u64,
}

/// The full tuple recorded in a plan so it can be replayed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RngKey {
    pub seed: u64,
    pub timestep: u64,
    pub layer: u64,
    pub head: u64,
}

/// Per-query-block selections plus the scores that produced them.
#[derive(Clone, Debug)]
pub struct RoutingPlan {
    /// Sorted, duplicate-free selected key-block indices per query block.
    pub selected: Vec<Vec<usize>>,
    pub scores: Matrix,
    pub biased_scores: Matrix,
    /// The k that was requested; lists are clamped to the block count.
    pub k_used: usize,
    pub rng_key: RngKey,
}

impl RoutingPlan {
    pub fn num_query_blocks(&self) -> usize {
        self.selected.len()
    }

    pub fn num_key_blocks(&self) -> usize {
        self.scores.cols()
    }

    /// Complement of the selected set for one query block, ascending.
    pub fn unselected(&self, query_block: usize) -> Vec<usize> {
        let mut mask = vec![true; self.num_key_blocks()];
        for &j in &self.selected[query_block] {
            mask[j] = false;
        }
        mask.iter()
            .enumerate()
            .filter(|(_, &keep)| keep)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Raw routing scores, one row per query block:
/// s[i][j] = scale * mean(Q block i) . centroid_j + log(het_norms[j] + epsilon).
///
/// The row softmax some formulations wrap around this is omitted: it is
/// rank-preserving per row and only the ranking feeds top-k.
pub fn block_scores(
    q: &Matrix,
    part: &BlockPartition,
    stats: &BlockStatistics,
    cfg: &RoutingConfig,
    scale: f64,
) -> Result<Matrix> {
    if q.rows() != part.seq_len() {
        return Err(Error::DimensionMismatch(format!(
            "Q has {} rows but the partition covers {}",
            q.rows(),
            part.seq_len()
        )));
    }
    if q.cols() != stats.head_dim() {
        return Err(Error::DimensionMismatch(
            "Q and statistics disagree on head_dim".into(),
        ));
    }
    if stats.partition != *part {
        return Err(Error::InvalidArgument(
            "statistics were built for another partition".into(),
        ));
    }
    if !cfg.epsilon.is_finite() || cfg.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }

    let d = q.cols();
    let n_b = part.num_blocks();
    let block_len = part.block_size() as f64;
    let log_priors: Vec<f64> = stats
        .het_norms
        .iter()
        .map(|&h| (h + cfg.epsilon).ln())
        .collect();

    let mut scores = Matrix::zeros(n_b, n_b);
    let mut q_centroid = vec![0.0; d];
    for (i, &(start, end)) in part.ranges().iter().enumerate() {
        q_centroid.fill(0.0);
        for t in start..end {
            for (c, acc) in q_centroid.iter_mut().enumerate() {
                *acc += q.get(t, c);
            }
        }
        for acc in q_centroid.iter_mut() {
            *acc /= block_len;
        }
        for (j, &prior) in log_priors.iter().enumerate() {
            scores.set(
                i,
                j,
                scale * dot(&q_centroid, stats.centroids.row(j)) + prior,
            );
        }
    }
    Ok(scores)
}

/// Add the stochastic selection bias: beta * row_std * Gumbel(0,1), with one
/// independent draw per (seed, timestep, layer, head, row, col). beta = 0
/// returns the scores unchanged, bit for bit.
pub fn apply_bias(scores: &Matrix, cfg: &RoutingConfig, ctx: RngContext) -> Matrix {
    if cfg.bias_beta == 0.0 {
        return scores.clone();
    }
    let cols = scores.cols() as f64;
    let mut out = scores.clone();
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let sigma = var.sqrt();
        for j in 0..scores.cols() {
            let g = CounterRng::from_words(&[
                cfg.seed,
                ctx.timestep,
                ctx.layer,
                ctx.head,
                GUMBEL_STREAM,
                i as u64,
                j as u64,
            ])
            .gumbel();
            out.set(i, j, scores.get(i, j) + cfg.bias_beta * sigma * g);
        }
    }
    out
}

/// Per row, the indices of the k highest scores, ties broken toward the lower
/// block index. k is clamped to the column count; the returned lists are
/// sorted ascending.
pub fn select_topk(biased: &Matrix, k: usize) -> Vec<Vec<usize>> {
    let n_b = biased.cols();
    let k_eff = k.min(n_b);
    let mut selected = Vec::with_capacity(biased.rows());
    for i in 0..biased.rows() {
        let row = biased.row(i);
        let mut order: Vec<usize> = (0..n_b).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order.into_iter().take(k_eff).collect();
        top.sort_unstable();
        selected.push(top);
    }
    selected
}

/// Turn an effective density into a per-query-block top-k count. At least one
/// block is always computed exactly.
pub fn density_to_k(rho_t: f64, num_blocks: usize) -> usize {
    assert!(rho_t >= 0.0, "density must be non-negative");
    assert!(num_blocks >= 1, "need at least one block");
    let k = (rho_t * num_blocks as f64).round() as usize;
    k.clamp(1, num_blocks)
}

/// Score, bias, and select in one step, recording the replay key.
pub fn route(
    q: &Matrix,
    stats: &BlockStatistics,
    cfg: &RoutingConfig,
    ctx: RngContext,
    k: usize,
    scale: f64,
) -> Result<RoutingPlan> {
    let scores = block_scores(q, &stats.partition, stats, cfg, scale)?;
    let biased = apply_bias(&scores, cfg, ctx);
    let selected = select_topk(&biased, k);
    Ok(RoutingPlan {
        selected,
        scores,
        biased_scores: biased,
        k_used: k,
        rng_key: RngKey {
            seed: cfg.seed,
            timestep: ctx.timestep,
            layer: ctx.layer,
            head: ctx.head,
        },
    })
}
