//! Streaming piecewise sparse attention: exact computation on selected
//! blocks, centroid-based zeroth-order compensation on the rest, and an
//! optional first-order correction resolved globally, per group, or per
//! block. One running maximum covers exact and centroid logits so the
//! normalization stays consistent with full attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blockstats::BlockStatistics;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::oracle::AttentionInstance;
use crate::routing::RoutingPlan;

/// How unselected blocks contribute to the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompensationMode {
    /// Skip unselected blocks entirely (conventional sparse attention).
    HardDrop,
    /// Centroid logit times the block's value sum.
    ZerothOrder,
    /// Zeroth order plus a correction through the global mean of H_j.
    FirstOrderGlobal,
    /// Zeroth order plus a correction through per-group means of H_j.
    FirstOrderGrouped,
    /// Zeroth order plus the exact per-block H_j correction.
    FirstOrderPerBlock,
}

impl CompensationMode {
    pub const ALL: [CompensationMode; 5] = [
        CompensationMode::HardDrop,
        CompensationMode::ZerothOrder,
        CompensationMode::FirstOrderGlobal,
        CompensationMode::FirstOrderGrouped,
        CompensationMode::FirstOrderPerBlock,
    ];

    pub fn is_first_order(self) -> bool {
        matches!(
            self,
            CompensationMode::FirstOrderGlobal
                | CompensationMode::FirstOrderGrouped
                | CompensationMode::FirstOrderPerBlock
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CompensationMode::HardDrop => "hard-drop",
            CompensationMode::ZerothOrder => "zeroth-order",
            CompensationMode::FirstOrderGlobal => "first-order-global",
            CompensationMode::FirstOrderGrouped => "first-order-grouped",
            CompensationMode::FirstOrderPerBlock => "first-order-per-block",
        }
    }
}

impl fmt::Display for CompensationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompensationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompensationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown compensation mode '{s}'")))
    }
}

pub(crate) fn check_consistency(
    inst: &AttentionInstance,
    plan: &RoutingPlan,
    stats: &BlockStatistics,
) -> Result<()> {
    let part = &stats.partition;
    if part.seq_len() != inst.seq_len() {
        return Err(Error::DimensionMismatch(format!(
            "statistics cover {} tokens, instance has {}",
            part.seq_len(),
            inst.seq_len()
        )));
    }
    if stats.head_dim() != inst.head_dim() {
        return Err(Error::DimensionMismatch(
            "statistics and instance disagree on head_dim".into(),
        ));
    }
    let n_b = part.num_blocks();
    if plan.num_query_blocks() != n_b || plan.num_key_blocks() != n_b {
        return Err(Error::DimensionMismatch(format!(
            "plan routes {}x{} blocks, partition has {n_b}",
            plan.num_query_blocks(),
            plan.num_key_blocks()
        )));
    }
    let expected_len = plan.k_used.min(n_b);
    for (qb, sel) in plan.selected.iter().enumerate() {
        if sel.len() != expected_len
            || sel.windows(2).any(|w| w[0] >= w[1])
            || sel.iter().any(|&j| j >= n_b)
        {
            return Err(Error::InvalidArgument(format!(
                "selected set for query block {qb} violates the plan invariants"
            )));
        }
    }
    Ok(())
}

fn correction_matrix(
    stats: &BlockStatistics,
    mode: CompensationMode,
    block: usize,
) -> Option<&Matrix> {
    match mode {
        CompensationMode::HardDrop | CompensationMode::ZerothOrder => None,
        CompensationMode::FirstOrderGlobal => Some(&stats.means.global),
        CompensationMode::FirstOrderGrouped => Some(stats.means.group_mean(block)),
        CompensationMode::FirstOrderPerBlock => Some(&stats.h[block]),
    }
}

/// One query row's streaming state: running max, rescaled denominator and
/// numerator partial sums.
struct RowState {
    max: f64,
    den: f64,
    num: Vec<f64>,
}

impl RowState {
    fn new(d: usize) -> RowState {
        RowState {
            max: f64::NEG_INFINITY,
            den: 0.0,
            num: vec![0.0; d],
        }
    }

    /// Fold a new logit into the running max, rescaling partial sums on
    /// update, and return exp(logit - max).
    #[inline]
    fn weight(&mut self, logit: f64) -> f64 {
        if logit > self.max {
            let c = (self.max - logit).exp();
            self.den *= c;
            for v in self.num.iter_mut() {
                *v *= c;
            }
            self.max = logit;
        }
        (logit - self.max).exp()
    }
}

/// The piecewise sparse forward pass for one head.
pub fn piecewise_attention(
    inst: &AttentionInstance,
    plan: &RoutingPlan,
    stats: &BlockStatistics,
    mode: CompensationMode,
) -> Result<Matrix> {
    check_consistency(inst, plan, stats)?;
    let part = &stats.partition;
    let d = inst.head_dim();
    let scale = inst.scale();
    let n_b = part.num_blocks();
    let block_len = part.block_size() as f64;

    let selected_mask: Vec<Vec<bool>> = plan
        .selected
        .iter()
        .map(|sel| {
            let mut mask = vec![false; n_b];
            for &j in sel {
                mask[j] = true;
            }
            mask
        })
        .collect();

    let mut out = Matrix::zeros(inst.seq_len(), d);
    let mut q_scaled = vec![0.0; d];
    // Per-row cache of (scale * q) C products, keyed per the mode's sharing
    // granularity: one entry for global, one per group, one per block.
    let mut qc_cache: Vec<Option<Vec<f64>>> = Vec::new();

    for t in 0..inst.seq_len() {
        let qb = part.block_of(t);
        let q_row = inst.q().row(t);
        for (c, qv) in q_scaled.iter_mut().enumerate() {
            *qv = q_row[c] * scale;
        }
        let cache_slots = match mode {
            CompensationMode::FirstOrderGlobal => 1,
            CompensationMode::FirstOrderGrouped => stats.means.num_groups(),
            CompensationMode::FirstOrderPerBlock => n_b,
            _ => 0,
        };
        qc_cache.clear();
        qc_cache.resize(cache_slots, None);

        let mut state = RowState::new(d);
        for (j, &is_selected) in selected_mask[qb].iter().enumerate() {
            if is_selected {
                let (start, end) = part.range(j);
                for n in start..end {
                    let w = state.weight(scale * dot(q_row, inst.k().row(n)));
                    state.den += w;
                    for (acc, &v) in state.num.iter_mut().zip(inst.v().row(n)) {
                        *acc += w * v;
                    }
                }
            } else if mode != CompensationMode::HardDrop {
                let alpha = state.weight(scale * dot(q_row, stats.centroids.row(j)));
                state.den += block_len * alpha;
                for (acc, &vs) in state.num.iter_mut().zip(stats.value_sums.row(j)) {
                    *acc += alpha * vs;
                }
                if let Some(c_mat) = correction_matrix(stats, mode, j) {
                    let slot = match mode {
                        CompensationMode::FirstOrderGlobal => 0,
                        CompensationMode::FirstOrderGrouped => stats.means.group_of[j],
                        _ => j,
                    };
                    let qc = qc_cache[slot].get_or_insert_with(|| {
                        let mut prod = vec![0.0; d];
                        for (col, p) in prod.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (row, &qv) in q_scaled.iter().enumerate() {
                                s += qv * c_mat.get(row, col);
                            }
                            *p = s;
                        }
                        prod
                    });
                    for (acc, &corr) in state.num.iter_mut().zip(qc.iter()) {
                        *acc += alpha * corr;
                    }
                }
            }
        }

        if state.den == 0.0 {
            return Err(Error::DegenerateNormalization { row: t });
        }
        for (c, &v) in state.num.iter().enumerate() {
            out.set(t, c, v / state.den);
        }
    }
    Ok(out)
}

/// Deviations for the two grouping collapse identities.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EquivalenceReport {
    /// max |grouped(1 group) - global| over all output entries.
    pub single_group_dev: f64,
    /// max |grouped(groups of 1) - per-block| over all output entries.
    pub singleton_groups_dev: f64,
}

impl EquivalenceReport {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.single_group_dev <= tol && self.singleton_groups_dev <= tol
    }
}

/// Check that grouped compensation collapses to the global and per-block
/// variants at the extreme group sizes.
pub fn scaled_variant_equivalences(
    inst: &AttentionInstance,
    plan: &RoutingPlan,
    stats: &BlockStatistics,
) -> Result<EquivalenceReport> {
    let part = &stats.partition;
    let n_b = part.num_blocks();
    let one_group = BlockStatistics::compute(inst.k(), inst.v(), part, n_b)?;
    let singletons = BlockStatistics::compute(inst.k(), inst.v(), part, 1)?;

    let global = piecewise_attention(inst, plan, stats, CompensationMode::FirstOrderGlobal)?;
    let grouped_one =
        piecewise_attention(inst, plan, &one_group, CompensationMode::FirstOrderGrouped)?;
    let per_block = piecewise_attention(inst, plan, stats, CompensationMode::FirstOrderPerBlock)?;
    let grouped_singletons =
        piecewise_attention(inst, plan, &singletons, CompensationMode::FirstOrderGrouped)?;

    Ok(EquivalenceReport {
        single_group_dev: max_abs_diff(&global, &grouped_one),
        singleton_groups_dev: max_abs_diff(&per_block, &grouped_singletons),
    })
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative Frobenius distance, the workhorse fidelity metric.
pub fn rel_frobenius(got: &Matrix, want: &Matrix) -> Result<f64> {
    let denom = want.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "reference matrix has zero norm".into(),
        ));
    }
    Ok(got.sub(want)?.frobenius_norm() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockstats::partition;
    use crate::oracle::{dense_attention, piecewise_reference};
    use crate::rng::CounterRng;
    use crate::routing::{route, select_topk, RngContext, RngKey, RoutingConfig};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = CounterRng::from_words(&[seed, 0x6E51]);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn random_instance(s: usize, d: usize, seed: u64) -> AttentionInstance {
        AttentionInstance::new(
            random_matrix(s, d, seed),
            random_matrix(s, d, seed.wrapping_add(1)),
            random_matrix(s, d, seed.wrapping_add(2)),
        )
        .unwrap()
    }

    fn plan_with_k(
        inst: &AttentionInstance,
        stats: &BlockStatistics,
        k: usize,
        seed: u64,
    ) -> RoutingPlan {
        let cfg = RoutingConfig {
            epsilon: 1e-6,
            bias_beta: 0.0,
            seed,
        };
        route(
            inst.q(),
            stats,
            &cfg,
            RngContext::default(),
            k,
            inst.scale(),
        )
        .unwrap()
    }

    /// Append one coordinate so every exact and centroid logit is offset by
    /// exactly `offset` while the instance stays well-formed.
    fn offset_logits(inst: &AttentionInstance, offset: f64) -> AttentionInstance {
        let s = inst.seq_len();
        let d = inst.head_dim();
        let grow = |m: &Matrix, extra: f64| {
            Matrix::from_fn(s, d + 1, |r, c| if c < d { m.get(r, c) } else { extra })
        };
        AttentionInstance::with_scale(
            grow(inst.q(), offset / inst.scale()),
            grow(inst.k(), 1.0),
            grow(inst.v(), 0.0),
            inst.scale(),
        )
        .unwrap()
    }

    #[test]
    fn full_selection_matches_dense_in_every_mode() {
        let inst = random_instance(16, 4, 1);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 4, 0);
        let dense = dense_attention(&inst).unwrap();
        for mode in CompensationMode::ALL {
            let got = piecewise_attention(&inst, &plan, &stats, mode).unwrap();
            let err = rel_frobenius(&got, &dense).unwrap();
            assert!(err <= 1e-10, "{mode:?}: {err}");
        }
    }

    #[test]
    fn constant_key_blocks_make_zeroth_order_exact() {
        // Keys constant within each block; values arbitrary. With k = 0 the
        // zeroth-order path reproduces dense attention and H_j = 0 makes all
        // first-order modes agree.
        let s = 16;
        let d = 4;
        let anchors = random_matrix(4, d, 2);
        let keys = Matrix::from_fn(s, d, |t, c| anchors.get(t / 4, c));
        let inst =
            AttentionInstance::new(random_matrix(s, d, 3), keys, random_matrix(s, d, 4)).unwrap();
        let part = partition(s, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 0, 0);
        let dense = dense_attention(&inst).unwrap();
        for mode in [
            CompensationMode::ZerothOrder,
            CompensationMode::FirstOrderGlobal,
            CompensationMode::FirstOrderGrouped,
            CompensationMode::FirstOrderPerBlock,
        ] {
            let got = piecewise_attention(&inst, &plan, &stats, mode).unwrap();
            let err = rel_frobenius(&got, &dense).unwrap();
            assert!(err <= 1e-10, "{mode:?}: {err}");
        }
    }

    #[test]
    fn streaming_agrees_with_naive_reference() {
        for seed in 0..20 {
            let inst = random_instance(32, 8, 100 + seed);
            let part = partition(32, 8).unwrap();
            let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
            let k = 1 + (seed as usize) % 3;
            let plan = plan_with_k(&inst, &stats, k, seed);
            let mode = CompensationMode::ALL[(seed as usize) % 5];
            let fast = piecewise_attention(&inst, &plan, &stats, mode).unwrap();
            let slow = piecewise_reference(&inst, &plan, mode, &stats).unwrap();
            let err = rel_frobenius(&fast, &slow).unwrap();
            assert!(err <= 1e-8, "seed {seed} mode {mode:?}: {err}");
        }
    }

    #[test]
    fn shifted_logits_stay_finite_and_match_reference() {
        let inst = offset_logits(&random_instance(16, 4, 50), 500.0);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 2, 0);
        for mode in CompensationMode::ALL {
            let fast = piecewise_attention(&inst, &plan, &stats, mode).unwrap();
            assert!(fast.is_finite());
            let slow = piecewise_reference(&inst, &plan, mode, &stats).unwrap();
            let err = rel_frobenius(&fast, &slow).unwrap();
            assert!(err <= 1e-8, "{mode:?}: {err}");
        }
    }

    #[test]
    fn hard_drop_with_empty_selection_is_rejected() {
        let inst = random_instance(8, 3, 60);
        let part = partition(8, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 0, 0);
        let err = piecewise_attention(&inst, &plan, &stats, CompensationMode::HardDrop);
        assert!(matches!(err, Err(Error::DegenerateNormalization { .. })));
        // compensated modes handle k = 0 fine
        assert!(piecewise_attention(&inst, &plan, &stats, CompensationMode::ZerothOrder).is_ok());
    }

    #[test]
    fn hard_drop_rows_are_convex_combinations_of_selected_values() {
        let inst = random_instance(16, 4, 70);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 2, 0);
        let out = piecewise_attention(&inst, &plan, &stats, CompensationMode::HardDrop).unwrap();
        for t in 0..16 {
            let qb = part.block_of(t);
            for c in 0..4 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &j in &plan.selected[qb] {
                    let (start, end) = part.range(j);
                    for n in start..end {
                        lo = lo.min(inst.v().get(n, c));
                        hi = hi.max(inst.v().get(n, c));
                    }
                }
                let v = out.get(t, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn explicit_first_order_denominator_term_vanishes() {
        // Within-block key deviations sum to zero, so appending the
        // first-order denominator term changes nothing beyond roundoff.
        let inst = random_instance(16, 4, 80);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = plan_with_k(&inst, &stats, 1, 0);
        let scale = inst.scale();

        for t in 0..inst.seq_len() {
            let qb = part.block_of(t);
            let q_row = inst.q().row(t);
            let mut den = 0.0;
            let mut extra = 0.0;
            for j in plan.unselected(qb) {
                let alpha = (scale * dot(q_row, stats.centroids.row(j))).exp();
                den += part.block_size() as f64 * alpha;
                let (start, end) = part.range(j);
                let mut dev_dot = 0.0;
                for n in start..end {
                    for (c, &qv) in q_row.iter().enumerate() {
                        dev_dot += scale * qv * (inst.k().get(n, c) - stats.centroids.get(j, c));
                    }
                }
                extra += alpha * dev_dot;
            }
            assert!(
                extra.abs() <= 1e-12 * den.max(1.0),
                "row {t}: extra {extra}, den {den}"
            );
        }
    }

    #[test]
    fn grouping_collapse_identities_hold() {
        let inst = random_instance(32, 4, 90);
        let part = partition(32, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 3).unwrap();
        let plan = plan_with_k(&inst, &stats, 2, 0);
        let report = scaled_variant_equivalences(&inst, &plan, &stats).unwrap();
        assert!(report.satisfied(1e-12), "{report:?}");
    }

    #[test]
    fn intermediate_group_sizes_generally_deviate() {
        let inst = random_instance(32, 4, 91);
        let part = partition(32, 4).unwrap();
        let base = BlockStatistics::compute(inst.k(), inst.v(), &part, 8).unwrap();
        let mid = BlockStatistics::compute(inst.k(), inst.v(), &part, 3).unwrap();
        let plan = plan_with_k(&inst, &base, 2, 0);
        let global =
            piecewise_attention(&inst, &plan, &base, CompensationMode::FirstOrderGlobal).unwrap();
        let grouped =
            piecewise_attention(&inst, &plan, &mid, CompensationMode::FirstOrderGrouped).unwrap();
        assert!(max_abs_diff(&global, &grouped) > 0.0);
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in CompensationMode::ALL {
            assert_eq!(mode.as_str().parse::<CompensationMode>().unwrap(), mode);
        }
        assert!("nope".parse::<CompensationMode>().is_err());
    }

    #[test]
    fn consistency_check_rejects_tampered_plans() {
        let inst = random_instance(16, 4, 95);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let mut plan = plan_with_k(&inst, &stats, 2, 0);
        plan.selected[0] = vec![0, 0];
        assert!(piecewise_attention(&inst, &plan, &stats, CompensationMode::ZerothOrder).is_err());

        let mut plan = plan_with_k(&inst, &stats, 2, 0);
        plan.selected[1] = vec![1, 99];
        assert!(piecewise_attention(&inst, &plan, &stats, CompensationMode::ZerothOrder).is_err());
    }

    #[test]
    fn topk_plan_shapes_accepted() {
        // select_topk output plugs straight into the kernel.
        let inst = random_instance(16, 4, 96);
        let part = partition(16, 4).unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let scores = random_matrix(4, 4, 97);
        let plan = RoutingPlan {
            selected: select_topk(&scores, 3),
            biased_scores: scores.clone(),
            scores,
            k_used: 3,
            rng_key: RngKey {
                seed: 0,
                timestep: 0,
                layer: 0,
                head: 0,
            },
        };
        assert!(
            piecewise_attention(&inst, &plan, &stats, CompensationMode::FirstOrderGrouped).is_ok()
        );
    }
}
