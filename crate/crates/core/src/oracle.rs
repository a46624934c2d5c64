//! Ground-truth references: dense attention and a naive, non-streaming
//! piecewise evaluation. Every sparse path is verified against these.

use crate::blockstats::BlockStatistics;
use crate::error::{Error, Result};
use crate::kernel::{check_consistency, CompensationMode};
use crate::numerics::{dot, CompensatedSum, Matrix};
use crate::routing::RoutingPlan;

/// Q, K, V for one attention head plus the logit scale factor.
#[derive(Clone, Debug)]
pub struct AttentionInstance {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scale: f64,
}

impl AttentionInstance {
    /// Build an instance with the default scale 1/sqrt(d).
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<AttentionInstance> {
        let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
        AttentionInstance::with_scale(q, k, v, scale)
    }

    pub fn with_scale(q: Matrix, k: Matrix, v: Matrix, scale: f64) -> Result<AttentionInstance> {
        if q.rows() != k.rows()
            || q.rows() != v.rows()
            || q.cols() != k.cols()
            || q.cols() != v.cols()
        {
            return Err(Error::DimensionMismatch(
                "Q, K, V must share sequence length and head dimension".into(),
            ));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::InvalidArgument("empty attention instance".into()));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if !q.is_finite() || !k.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("attention instance".into()));
        }
        Ok(AttentionInstance { q, k, v, scale })
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// O = row_softmax(scale * Q K^T) V.
pub fn dense_attention(inst: &AttentionInstance) -> Result<Matrix> {
    let logits = inst.q.matmul(&inst.k.transpose())?.scaled(inst.scale);
    logits.stable_row_softmax()?.matmul(&inst.v)
}

/// Naive piecewise evaluation: the same numerator/denominator contract as the
/// streaming kernel, but accumulated in a single unshifted pass with
/// compensated summation. Deliberately avoids the kernel's running-max
/// machinery so agreement tests exercise it.
pub fn piecewise_reference(
    inst: &AttentionInstance,
    plan: &RoutingPlan,
    mode: CompensationMode,
    stats: &BlockStatistics,
) -> Result<Matrix> {
    check_consistency(inst, plan, stats)?;
    let part = &stats.partition;
    let d = inst.head_dim();
    let scale = inst.scale;
    let n_b = part.num_blocks();
    let block_len = part.block_size() as f64;

    let mut out = Matrix::zeros(inst.seq_len(), d);
    for t in 0..inst.seq_len() {
        let qb = part.block_of(t);
        let q_row = inst.q.row(t);
        let q_scaled: Vec<f64> = q_row.iter().map(|v| v * scale).collect();
        let mut selected = vec![false; n_b];
        for &j in &plan.selected[qb] {
            selected[j] = true;
        }

        let mut den = CompensatedSum::default();
        let mut num = vec![CompensatedSum::default(); d];

        for (j, &is_selected) in selected.iter().enumerate() {
            if is_selected {
                let (start, end) = part.range(j);
                for n in start..end {
                    let w = (scale * dot(q_row, inst.k.row(n))).exp();
                    den.add(w);
                    for (acc, &v) in num.iter_mut().zip(inst.v.row(n)) {
                        acc.add(w * v);
                    }
                }
            } else if mode != CompensationMode::HardDrop {
                let alpha = (scale * dot(q_row, stats.centroids.row(j))).exp();
                den.add(block_len * alpha);
                for (acc, &vs) in num.iter_mut().zip(stats.value_sums.row(j)) {
                    acc.add(alpha * vs);
                }
                // Resolve the first-order correction matrix for this mode
                // independently of the kernel's dispatch.
                let correction = match mode {
                    CompensationMode::HardDrop | CompensationMode::ZerothOrder => None,
                    CompensationMode::FirstOrderGlobal => Some(&stats.means.global),
                    CompensationMode::FirstOrderGrouped => {
                        Some(&stats.means.groups[stats.means.group_of[j]])
                    }
                    CompensationMode::FirstOrderPerBlock => Some(&stats.h[j]),
                };
                if let Some(c_mat) = correction {
                    for (col, acc) in num.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (row, &qv) in q_scaled.iter().enumerate() {
                            s += qv * c_mat.get(row, col);
                        }
                        acc.add(alpha * s);
                    }
                }
            }
        }

        let den = den.value();
        if den == 0.0 {
            return Err(Error::DegenerateNormalization { row: t });
        }
        for (c, acc) in num.iter().enumerate() {
            out.set(t, c, acc.value() / den);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockstats::partition;
    use crate::numerics::mean_abs_diff;
    use crate::rng::CounterRng;
    use crate::routing::{select_topk, RngKey, RoutingPlan};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = CounterRng::from_words(&[seed, 0x0AC1E]);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn full_plan(n_qb: usize, n_b: usize) -> RoutingPlan {
        let scores = Matrix::zeros(n_qb, n_b);
        RoutingPlan {
            selected: select_topk(&scores, n_b),
            biased_scores: scores.clone(),
            scores,
            k_used: n_b,
            rng_key: RngKey {
                seed: 0,
                timestep: 0,
                layer: 0,
                head: 0,
            },
        }
    }

    fn empty_plan(n_qb: usize, n_b: usize) -> RoutingPlan {
        let scores = Matrix::zeros(n_qb, n_b);
        RoutingPlan {
            selected: vec![Vec::new(); n_qb],
            biased_scores: scores.clone(),
            scores,
            k_used: 0,
            rng_key: RngKey {
                seed: 0,
                timestep: 0,
                layer: 0,
                head: 0,
            },
        }
    }

    #[test]
    fn single_token_instance() {
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let inst = AttentionInstance::new(one.clone(), one.clone(), one).unwrap();
        let out = dense_attention(&inst).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_average_their_values() {
        let q = random_matrix(2, 3, 1);
        let k = Matrix::from_fn(2, 3, |_, c| c as f64 * 0.5 - 1.0);
        let v = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![3.0, 4.0, -2.0]]).unwrap();
        let inst = AttentionInstance::new(q, k, v.clone()).unwrap();
        let out = dense_attention(&inst).unwrap();
        for t in 0..2 {
            for c in 0..3 {
                let want = (v.get(0, c) + v.get(1, c)) / 2.0;
                assert!((out.get(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_scalar_loop_oracle() {
        let inst = AttentionInstance::new(
            random_matrix(8, 4, 2),
            random_matrix(8, 4, 3),
            random_matrix(8, 4, 4),
        )
        .unwrap();
        let out = dense_attention(&inst).unwrap();

        // Independent per-row scalar loop.
        for t in 0..8 {
            let mut logits = [0.0f64; 8];
            for (s, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += inst.q().get(t, c) * inst.k().get(s, c);
                }
                *logit = acc * inst.scale();
            }
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in 0..4 {
                let mut want = 0.0;
                for (s, &w) in weights.iter().enumerate() {
                    want += w / z * inst.v().get(s, c);
                }
                assert!((out.get(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rows_stay_inside_value_envelope() {
        let inst = AttentionInstance::new(
            random_matrix(16, 5, 5),
            random_matrix(16, 5, 6),
            random_matrix(16, 5, 7),
        )
        .unwrap();
        let out = dense_attention(&inst).unwrap();
        for c in 0..5 {
            let lo = (0..16)
                .map(|s| inst.v().get(s, c))
                .fold(f64::INFINITY, f64::min);
            let hi = (0..16)
                .map(|s| inst.v().get(s, c))
                .fold(f64::NEG_INFINITY, f64::max);
            for t in 0..16 {
                let v = out.get(t, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn full_selection_reference_equals_dense_in_every_mode() {
        let part = partition(16, 4).unwrap();
        let inst = AttentionInstance::new(
            random_matrix(16, 4, 8),
            random_matrix(16, 4, 9),
            random_matrix(16, 4, 10),
        )
        .unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = full_plan(4, 4);
        let dense = dense_attention(&inst).unwrap();
        for mode in CompensationMode::ALL {
            let got = piecewise_reference(&inst, &plan, mode, &stats).unwrap();
            let diff = got.sub(&dense).unwrap().frobenius_norm() / dense.frobenius_norm();
            assert!(diff <= 1e-10, "{mode:?}: {diff}");
        }
    }

    #[test]
    fn hard_drop_with_nothing_selected_is_degenerate() {
        let part = partition(8, 4).unwrap();
        let inst = AttentionInstance::new(
            random_matrix(8, 3, 11),
            random_matrix(8, 3, 12),
            random_matrix(8, 3, 13),
        )
        .unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = empty_plan(2, 2);
        let err = piecewise_reference(&inst, &plan, CompensationMode::HardDrop, &stats);
        assert!(matches!(
            err,
            Err(Error::DegenerateNormalization { row: 0 })
        ));
    }

    #[test]
    fn reference_rejects_inconsistent_plan() {
        let part = partition(8, 4).unwrap();
        let inst = AttentionInstance::new(
            random_matrix(8, 3, 14),
            random_matrix(8, 3, 15),
            random_matrix(8, 3, 16),
        )
        .unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let plan = full_plan(3, 3); // wrong block count
        assert!(piecewise_reference(&inst, &plan, CompensationMode::ZerothOrder, &stats).is_err());
    }

    #[test]
    fn instance_validation() {
        let m = random_matrix(4, 2, 20);
        assert!(AttentionInstance::new(m.clone(), m.clone(), random_matrix(3, 2, 21)).is_err());
        assert!(AttentionInstance::with_scale(m.clone(), m.clone(), m.clone(), 0.0).is_err());
        assert!(AttentionInstance::with_scale(m.clone(), m.clone(), m, 0.5).is_ok());
    }

    #[test]
    fn mean_abs_diff_smoke_for_reference_vs_dense_partial_selection() {
        // Partial selection with zeroth-order compensation is close to dense
        // but not equal; this guards against the reference silently computing
        // dense attention.
        let part = partition(16, 4).unwrap();
        let inst = AttentionInstance::new(
            random_matrix(16, 4, 30),
            random_matrix(16, 4, 31),
            random_matrix(16, 4, 32),
        )
        .unwrap();
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, 2).unwrap();
        let scores = random_matrix(4, 4, 33);
        let plan = RoutingPlan {
            selected: select_topk(&scores, 1),
            biased_scores: scores.clone(),
            scores,
            k_used: 1,
            rng_key: RngKey {
                seed: 0,
                timestep: 0,
                layer: 0,
                head: 0,
            },
        };
        let dense = dense_attention(&inst).unwrap();
        let sparse =
            piecewise_reference(&inst, &plan, CompensationMode::ZerothOrder, &stats).unwrap();
        let gap = mean_abs_diff(&sparse, &dense).unwrap();
        assert!(gap > 0.0, "partial selection should not be exactly dense");
    }
}
