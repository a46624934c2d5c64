//! Fidelity metrics against the dense oracle, analytical bound verification
//! for the grouped first-order residual, and selection-behavior statistics.

use serde::Serialize;

use crate::blockstats::{global_and_grouped_means, GroupedMeans};
use crate::error::{Error, Result};
use crate::kernel::CompensationMode;
use crate::numerics::Matrix;
use crate::rng::CounterRng;
use crate::routing::RoutingPlan;

/// Error of one sparse output against the dense oracle.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FidelityReport {
    pub rel_frobenius: f64,
    pub max_row_l2: f64,
    pub mode: CompensationMode,
    pub sparsity: f64,
    pub seed: u64,
}

/// Relative Frobenius error and maximum per-row L2 error of `sparse` against
/// `dense`.
pub fn fidelity(sparse: &Matrix, dense: &Matrix) -> Result<(f64, f64)> {
    if sparse.rows() != dense.rows() || sparse.cols() != dense.cols() {
        return Err(Error::DimensionMismatch(
            "fidelity inputs differ in shape".into(),
        ));
    }
    let denom = dense.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("dense output has zero norm".into()));
    }
    let rel = sparse.sub(dense)?.frobenius_norm() / denom;
    let mut max_row = 0.0f64;
    for r in 0..sparse.rows() {
        let mut acc = 0.0;
        for (a, b) in sparse.row(r).iter().zip(dense.row(r)) {
            acc += (a - b) * (a - b);
        }
        max_row = max_row.max(acc.sqrt());
    }
    Ok((rel, max_row))
}

/// One weighted-residual bound check: the alpha-weighted sum of deviations
/// from the group means, against the max deviation times the weight total.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundCheck {
    pub residual_norm: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub margin: f64,
}

const BOUND_SLACK: f64 = 1e-9;

/// Verify the weighted group-residual bound:
/// || sum over unselected j of alpha_j (H_j - group_mean(j)) ||_F
///   <= max_j ||H_j - group_mean(j)||_F * sum alpha_j.
pub fn weighted_residual_check(
    h: &[Matrix],
    means: &GroupedMeans,
    alphas: &[f64],
    unselected: &[usize],
) -> Result<BoundCheck> {
    if alphas.len() != h.len() {
        return Err(Error::DimensionMismatch(
            "one alpha per block required".into(),
        ));
    }
    if alphas.iter().any(|&a| a.is_nan() || a < 0.0) {
        return Err(Error::InvalidArgument("alphas must be non-negative".into()));
    }
    if unselected.iter().any(|&j| j >= h.len()) {
        return Err(Error::InvalidArgument(
            "unselected index out of range".into(),
        ));
    }

    let d = means.global.rows();
    let mut residual = Matrix::zeros(d, d);
    let mut max_dev = 0.0f64;
    let mut alpha_sum = 0.0f64;
    for &j in unselected {
        let dev = h[j].sub(&means.groups[means.group_of[j]])?;
        max_dev = max_dev.max(dev.frobenius_norm());
        alpha_sum += alphas[j];
        residual = residual.add(&dev.scaled(alphas[j]))?;
    }

    let residual_norm = residual.frobenius_norm();
    let bound = max_dev * alpha_sum;
    Ok(BoundCheck {
        residual_norm,
        bound,
        satisfied: residual_norm <= bound + BOUND_SLACK,
        margin: bound - residual_norm,
    })
}

/// Per-group comparison for the within-group sum-of-squares inequality.
#[derive(Clone, Debug, Serialize)]
pub struct GroupSumOfSquares {
    /// Per group: sum of squared deviations from the group mean.
    pub lhs: Vec<f64>,
    /// Per group: sum of squared deviations from the global mean.
    pub rhs: Vec<f64>,
    pub satisfied: bool,
}

/// Within each group, the sum of squared Frobenius deviations from the group
/// mean never exceeds the sum of squared deviations from the global mean.
/// Group means are recomputed here from `group_of`, independent of the means
/// cached in block statistics.
pub fn group_sum_of_squares_check(
    h: &[Matrix],
    group_of: &[usize],
    global: &Matrix,
) -> Result<GroupSumOfSquares> {
    if group_of.len() != h.len() {
        return Err(Error::DimensionMismatch(
            "one group index per block required".into(),
        ));
    }
    let num_groups = group_of.iter().copied().max().map_or(0, |g| g + 1);
    let d = global.rows();

    let mut sums = vec![Matrix::zeros(d, d); num_groups];
    let mut counts = vec![0usize; num_groups];
    for (j, &g) in group_of.iter().enumerate() {
        sums[g] = sums[g].add(&h[j])?;
        counts[g] += 1;
    }
    let group_means: Vec<Matrix> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { s } else { s.scaled(1.0 / c as f64) })
        .collect();

    let mut lhs = vec![0.0; num_groups];
    let mut rhs = vec![0.0; num_groups];
    for (j, &g) in group_of.iter().enumerate() {
        let dg = h[j].sub(&group_means[g])?.frobenius_norm();
        let dglob = h[j].sub(global)?.frobenius_norm();
        lhs[g] += dg * dg;
        rhs[g] += dglob * dglob;
    }
    let satisfied = lhs.iter().zip(&rhs).all(|(&l, &r)| l <= r + BOUND_SLACK);
    Ok(GroupSumOfSquares {
        lhs,
        rhs,
        satisfied,
    })
}

/// Find a block whose deviation from its group mean strictly exceeds its
/// deviation from the global mean, if one exists in this configuration. The
/// sum-of-squares inequality does not forbid this per block.
pub fn deviation_counterexample(
    h: &[Matrix],
    group_of: &[usize],
    global: &Matrix,
) -> Option<usize> {
    let num_groups = group_of.iter().copied().max().map_or(0, |g| g + 1);
    let d = global.rows();
    let mut sums = vec![Matrix::zeros(d, d); num_groups];
    let mut counts = vec![0usize; num_groups];
    for (j, &g) in group_of.iter().enumerate() {
        sums[g] = sums[g].add(&h[j]).expect("uniform H shapes");
        counts[g] += 1;
    }
    for (j, &g) in group_of.iter().enumerate() {
        let mean = sums[g].scaled(1.0 / counts[g] as f64);
        let from_group = h[j].sub(&mean).expect("uniform H shapes").frobenius_norm();
        let from_global = h[j].sub(global).expect("uniform H shapes").frobenius_norm();
        if from_group > from_global {
            return Some(j);
        }
    }
    None
}

/// Random search for a per-block counterexample over freshly drawn H sets
/// with at least two groups. Returns whether one was found.
pub fn deviation_counterexample_search(draws: usize, seed: u64) -> bool {
    let mut rng = CounterRng::from_words(&[seed, 0x6E3A]);
    for _ in 0..draws {
        let n_b = 4 + (rng.next_u64() % 13) as usize; // 4..=16 blocks
        let d = 1 + (rng.next_u64() % 4) as usize;
        let group_size = 2 + (rng.next_u64() % (n_b as u64 / 2)) as usize;
        let h: Vec<Matrix> = (0..n_b)
            .map(|_| Matrix::from_fn(d, d, |_, _| rng.normal()))
            .collect();
        let means = global_and_grouped_means(&h, group_size).expect("non-empty H");
        if means.num_groups() < 2 {
            continue;
        }
        if deviation_counterexample(&h, &means.group_of, &means.global).is_some() {
            return true;
        }
    }
    false
}

/// Selection-count and oscillation statistics over a list of routing plans
/// ordered by timestep.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionStats {
    /// Per key block: number of (plan, query-block) selections.
    pub counts: Vec<u64>,
    /// The same counts sorted descending, the usual presentation.
    pub counts_sorted: Vec<u64>,
    /// Shannon entropy (nats) of the normalized count distribution.
    pub entropy: f64,
    /// Mean Jaccard similarity of selected sets between consecutive plans,
    /// per query block. 1.0 means frozen selection.
    pub mean_consecutive_jaccard: f64,
}

pub fn selection_stats(plans: &[RoutingPlan]) -> Result<SelectionStats> {
    let first = plans
        .first()
        .ok_or_else(|| Error::InvalidArgument("no plans".into()))?;
    let n_b = first.num_key_blocks();
    if plans
        .iter()
        .any(|p| p.num_key_blocks() != n_b || p.num_query_blocks() != first.num_query_blocks())
    {
        return Err(Error::DimensionMismatch(
            "plans disagree on block counts".into(),
        ));
    }

    let mut counts = vec![0u64; n_b];
    for plan in plans {
        for sel in &plan.selected {
            for &j in sel {
                counts[j] += 1;
            }
        }
    }

    let mut jaccard_sum = 0.0;
    let mut jaccard_n = 0usize;
    for pair in plans.windows(2) {
        for qb in 0..first.num_query_blocks() {
            jaccard_sum += jaccard(&pair[0].selected[qb], &pair[1].selected[qb]);
            jaccard_n += 1;
        }
    }
    let mean_consecutive_jaccard = if jaccard_n == 0 {
        1.0
    } else {
        jaccard_sum / jaccard_n as f64
    };

    let mut counts_sorted = counts.clone();
    counts_sorted.sort_unstable_by(|a, b| b.cmp(a));

    Ok(SelectionStats {
        entropy: entropy_of_counts(&counts),
        counts,
        counts_sorted,
        mean_consecutive_jaccard,
    })
}

/// Shannon entropy in nats of a count distribution. Zero total gives zero.
pub fn entropy_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Jaccard similarity of two sorted index sets; two empty sets count as 1.
fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::routing::{select_topk, RngKey};

    fn random_h(n: usize, d: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = CounterRng::from_words(&[seed, 0xA7A1]);
        (0..n)
            .map(|_| Matrix::from_fn(d, d, |_, _| rng.normal()))
            .collect()
    }

    fn plan_from_selected(selected: Vec<Vec<usize>>, n_b: usize) -> RoutingPlan {
        let scores = Matrix::zeros(selected.len(), n_b);
        let k_used = selected.first().map_or(0, Vec::len);
        RoutingPlan {
            selected,
            biased_scores: scores.clone(),
            scores,
            k_used,
            rng_key: RngKey {
                seed: 0,
                timestep: 0,
                layer: 0,
                head: 0,
            },
        }
    }

    #[test]
    fn fidelity_cases() {
        let mut rng = CounterRng::from_words(&[1]);
        let a = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let (rel, max_row) = fidelity(&a, &a).unwrap();
        assert_eq!(rel, 0.0);
        assert_eq!(max_row, 0.0);

        let doubled = a.scaled(2.0);
        let (rel, _) = fidelity(&doubled, &a).unwrap();
        assert!((rel - 1.0).abs() < 1e-12);

        let b = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let (rel, max_row) = fidelity(&a, &b).unwrap();
        let want_rel = a.sub(&b).unwrap().frobenius_norm() / b.frobenius_norm();
        assert!((rel - want_rel).abs() < 1e-12);
        let mut want_max = 0.0f64;
        for r in 0..3 {
            let mut acc = 0.0;
            for c in 0..3 {
                let d = a.get(r, c) - b.get(r, c);
                acc += d * d;
            }
            want_max = want_max.max(acc.sqrt());
        }
        assert!((max_row - want_max).abs() < 1e-12);

        assert!(fidelity(&a, &Matrix::zeros(3, 3)).is_err());
        assert!(fidelity(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn residual_vanishes_when_groups_are_constant() {
        let block = random_h(1, 2, 3).pop().unwrap();
        let h = vec![block.clone(), block.clone(), block.clone(), block.clone()];
        let means = global_and_grouped_means(&h, 2).unwrap();
        let check =
            weighted_residual_check(&h, &means, &[0.5, 0.25, 1.0, 2.0], &[0, 2, 3]).unwrap();
        assert!(check.residual_norm < 1e-12);
        assert!(check.satisfied);
        assert!((check.margin - check.bound).abs() < 1e-12);
    }

    #[test]
    fn single_block_residual_bound_is_tight() {
        let h = random_h(4, 3, 4);
        let means = global_and_grouped_means(&h, 2).unwrap();
        let alphas = [0.0, 0.7, 0.0, 0.0];
        let check = weighted_residual_check(&h, &means, &alphas, &[1]).unwrap();
        assert!(check.satisfied);
        assert!((check.residual_norm - check.bound).abs() <= 1e-9);
        assert!(check.bound > 0.0);
    }

    #[test]
    fn empty_unselected_set_is_trivially_satisfied() {
        let h = random_h(4, 2, 5);
        let means = global_and_grouped_means(&h, 2).unwrap();
        let check = weighted_residual_check(&h, &means, &[1.0; 4], &[]).unwrap();
        assert_eq!(check.residual_norm, 0.0);
        assert_eq!(check.bound, 0.0);
        assert!(check.satisfied);
    }

    #[test]
    fn residual_bound_holds_on_random_draws() {
        let mut rng = CounterRng::from_words(&[6]);
        for draw in 0..100 {
            let n_b = 3 + (rng.next_u64() % 10) as usize;
            let d = 1 + (rng.next_u64() % 4) as usize;
            let group_size = 1 + (rng.next_u64() % n_b as u64) as usize;
            let h = random_h(n_b, d, 1000 + draw);
            let means = global_and_grouped_means(&h, group_size).unwrap();
            let alphas: Vec<f64> = (0..n_b).map(|_| rng.uniform_open01() * 3.0).collect();
            let unselected: Vec<usize> = (0..n_b).filter(|_| rng.next_u64() & 1 == 0).collect();
            let check = weighted_residual_check(&h, &means, &alphas, &unselected).unwrap();
            assert!(check.satisfied, "draw {draw}: {check:?}");
        }
    }

    #[test]
    fn residual_check_validates_inputs() {
        let h = random_h(3, 2, 7);
        let means = global_and_grouped_means(&h, 2).unwrap();
        assert!(weighted_residual_check(&h, &means, &[1.0, 1.0], &[]).is_err());
        assert!(weighted_residual_check(&h, &means, &[1.0, -1.0, 1.0], &[]).is_err());
        assert!(weighted_residual_check(&h, &means, &[1.0; 3], &[9]).is_err());
    }

    #[test]
    fn sum_of_squares_equality_when_group_means_match_global() {
        // Pairs {A, -A} have group mean zero, matching the global mean.
        let a = random_h(1, 2, 8).pop().unwrap();
        let b = random_h(1, 2, 9).pop().unwrap();
        let h = vec![a.clone(), a.scaled(-1.0), b.clone(), b.scaled(-1.0)];
        let means = global_and_grouped_means(&h, 2).unwrap();
        let result = group_sum_of_squares_check(&h, &means.group_of, &means.global).unwrap();
        assert!(result.satisfied);
        for (l, r) in result.lhs.iter().zip(&result.rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_strict_when_groups_are_separated() {
        // Two groups offset in opposite directions: deviations from the group
        // means vanish while deviations from the global mean do not.
        let delta = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
        let h = vec![
            delta.clone(),
            delta.clone(),
            delta.scaled(-1.0),
            delta.scaled(-1.0),
        ];
        let means = global_and_grouped_means(&h, 2).unwrap();
        let result = group_sum_of_squares_check(&h, &means.group_of, &means.global).unwrap();
        assert!(result.satisfied);
        let sq = delta.frobenius_norm().powi(2);
        for g in 0..2 {
            assert!(result.lhs[g] < 1e-24);
            assert!((result.rhs[g] - 2.0 * sq).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_of_squares_holds_on_random_draws() {
        let mut rng = CounterRng::from_words(&[10]);
        for draw in 0..100 {
            let n_b = 2 + (rng.next_u64() % 15) as usize;
            let d = 1 + (rng.next_u64() % 4) as usize;
            let group_size = 1 + (rng.next_u64() % n_b as u64) as usize;
            let h = random_h(n_b, d, 2000 + draw);
            let means = global_and_grouped_means(&h, group_size).unwrap();
            let result = group_sum_of_squares_check(&h, &means.group_of, &means.global).unwrap();
            assert!(result.satisfied, "draw {draw}");
        }
    }

    #[test]
    fn deviation_counterexample_hand_construction() {
        // Blocks [[1]], [[-1]], [[0]], [[0]] in groups {0,1} and {2,3}:
        // global mean 0, first group mean 0, so no block deviates more from
        // its group mean than from the global mean.
        let h = |v: f64| Matrix::from_vec(1, 1, vec![v]).unwrap();
        let group_of = vec![0, 0, 1, 1];
        let set = vec![h(1.0), h(-1.0), h(0.0), h(0.0)];
        let global = global_and_grouped_means(&set, 2).unwrap().global;
        assert_eq!(deviation_counterexample(&set, &group_of, &global), None);

        // Shift the second block to [[3]]: global mean 1, first group mean 2.
        // Block 0 now sits 1.0 from its group mean but 0.0 from the global
        // mean, so the per-block comparison flips.
        let set = vec![h(1.0), h(3.0), h(0.0), h(0.0)];
        let global = global_and_grouped_means(&set, 2).unwrap().global;
        assert_eq!(global.get(0, 0), 1.0);
        assert_eq!(deviation_counterexample(&set, &group_of, &global), Some(0));
    }

    #[test]
    fn counterexample_never_fires_on_identical_blocks() {
        let block = random_h(1, 2, 11).pop().unwrap();
        let h = vec![block.clone(), block.clone(), block.clone(), block.clone()];
        let means = global_and_grouped_means(&h, 2).unwrap();
        assert_eq!(
            deviation_counterexample(&h, &means.group_of, &means.global),
            None
        );
    }

    #[test]
    fn random_search_finds_a_counterexample() {
        assert!(deviation_counterexample_search(1000, 0));
    }

    #[test]
    fn selection_stats_full_selection() {
        let n_b = 4;
        let scores = Matrix::zeros(n_b, n_b);
        let full: Vec<Vec<usize>> = select_topk(&scores, n_b);
        let plans: Vec<RoutingPlan> = (0..3)
            .map(|_| plan_from_selected(full.clone(), n_b))
            .collect();
        let stats = selection_stats(&plans).unwrap();
        assert!(stats.counts.iter().all(|&c| c == 12));
        assert!((stats.entropy - (n_b as f64).ln()).abs() < 1e-9);
        assert_eq!(stats.mean_consecutive_jaccard, 1.0);
    }

    #[test]
    fn selection_stats_frozen_selection_has_unit_jaccard() {
        let plans: Vec<RoutingPlan> = (0..5)
            .map(|_| plan_from_selected(vec![vec![0, 2], vec![1, 3]], 4))
            .collect();
        let stats = selection_stats(&plans).unwrap();
        assert_eq!(stats.mean_consecutive_jaccard, 1.0);
        assert_eq!(stats.counts, vec![5, 5, 5, 5]);
    }

    #[test]
    fn selection_stats_detects_oscillation() {
        let a = plan_from_selected(vec![vec![0, 1]], 4);
        let b = plan_from_selected(vec![vec![2, 3]], 4);
        let stats = selection_stats(&[a.clone(), b, a]).unwrap();
        assert_eq!(stats.mean_consecutive_jaccard, 0.0);
        assert_eq!(stats.counts_sorted, vec![2, 2, 1, 1]);
    }

    #[test]
    fn entropy_is_maximal_exactly_for_uniform_counts() {
        assert!((entropy_of_counts(&[3, 3, 3, 3]) - 4.0f64.ln()).abs() < 1e-12);
        assert!(entropy_of_counts(&[4, 2, 3, 3]) < 4.0f64.ln() - 1e-6);
        assert_eq!(entropy_of_counts(&[0, 0]), 0.0);
        assert_eq!(entropy_of_counts(&[7, 0, 0]), 0.0);
    }
}
