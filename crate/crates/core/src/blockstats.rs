//! Block partitioning and the per-block statistics behind piecewise
//! compensation: key centroids, value sums, first-order cross matrices H_j,
//! their global and grouped means, and heterogeneity norms.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Contiguous partition of `[0, seq_len)` into equal-size blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    block_size: usize,
    ranges: Vec<(usize, usize)>,
}

impl BlockPartition {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.ranges.len()
    }

    pub fn seq_len(&self) -> usize {
        self.block_size * self.ranges.len()
    }

    /// Half-open token range of block `j`.
    pub fn range(&self, j: usize) -> (usize, usize) {
        self.ranges[j]
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_size
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

/// Split `seq_len` tokens into contiguous blocks of `block_size`.
pub fn partition(seq_len: usize, block_size: usize) -> Result<BlockPartition> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be positive".into()));
    }
    if seq_len == 0 || !seq_len.is_multiple_of(block_size) {
        return Err(Error::InvalidArgument(format!(
            "seq_len {seq_len} is not a positive multiple of block_size {block_size}"
        )));
    }
    let ranges = (0..seq_len / block_size)
        .map(|j| (j * block_size, (j + 1) * block_size))
        .collect();
    Ok(BlockPartition { block_size, ranges })
}

/// Global mean of the H_j matrices plus per-group means over contiguous runs
/// of block indices.
#[derive(Clone, Debug)]
pub struct GroupedMeans {
    pub global: Matrix,
    pub groups: Vec<Matrix>,
    /// Block index -> group index.
    pub group_of: Vec<usize>,
}

impl GroupedMeans {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_mean(&self, block: usize) -> &Matrix {
        &self.groups[self.group_of[block]]
    }
}

/// All statistics the routing and kernel stages need for one (K, V) pair.
#[derive(Clone, Debug)]
pub struct BlockStatistics {
    pub partition: BlockPartition,
    /// Per-block key centroids, one row per block.
    pub centroids: Matrix,
    /// Per-block sums of value rows, one row per block.
    pub value_sums: Matrix,
    /// Per-block first-order cross matrices H_j (d x d).
    pub h: Vec<Matrix>,
    pub means: GroupedMeans,
    /// Per-block Frobenius distance from H_j to the global mean.
    pub het_norms: Vec<f64>,
}

impl BlockStatistics {
    pub fn compute(
        keys: &Matrix,
        values: &Matrix,
        part: &BlockPartition,
        group_size: usize,
    ) -> Result<BlockStatistics> {
        if keys.rows() != part.seq_len() || values.rows() != part.seq_len() {
            return Err(Error::DimensionMismatch(format!(
                "partition covers {} tokens but K has {} rows and V has {}",
                part.seq_len(),
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != values.cols() {
            return Err(Error::DimensionMismatch(format!(
                "K is {}-dimensional but V is {}-dimensional",
                keys.cols(),
                values.cols()
            )));
        }
        let d = keys.cols();
        let n_b = part.num_blocks();
        let b = part.block_size() as f64;

        let mut centroids = Matrix::zeros(n_b, d);
        let mut value_sums = Matrix::zeros(n_b, d);
        for (j, &(start, end)) in part.ranges().iter().enumerate() {
            for t in start..end {
                for c in 0..d {
                    centroids.set(j, c, centroids.get(j, c) + keys.get(t, c));
                    value_sums.set(j, c, value_sums.get(j, c) + values.get(t, c));
                }
            }
            for c in 0..d {
                centroids.set(j, c, centroids.get(j, c) / b);
            }
        }

        let h = compute_block_h(keys, values, part)?;
        let means = global_and_grouped_means(&h, group_size)?;
        let het_norms = heterogeneity_norms(&h, &means.global);

        Ok(BlockStatistics {
            partition: part.clone(),
            centroids,
            value_sums,
            h,
            means,
            het_norms,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// Per-block H_j = sum over tokens of (K_{j,n} - centroid_j)^T V_{j,n}.
pub fn compute_block_h(
    keys: &Matrix,
    values: &Matrix,
    part: &BlockPartition,
) -> Result<Vec<Matrix>> {
    if keys.rows() != part.seq_len() || values.rows() != part.seq_len() {
        return Err(Error::DimensionMismatch(
            "K/V row count does not match the partition".into(),
        ));
    }
    if keys.cols() != values.cols() {
        return Err(Error::DimensionMismatch("K and V dimensions differ".into()));
    }
    let d = keys.cols();
    let b = part.block_size() as f64;

    let mut out = Vec::with_capacity(part.num_blocks());
    for &(start, end) in part.ranges() {
        let mut centroid = vec![0.0; d];
        for t in start..end {
            for (c, acc) in centroid.iter_mut().enumerate() {
                *acc += keys.get(t, c);
            }
        }
        for acc in centroid.iter_mut() {
            *acc /= b;
        }

        let mut h = Matrix::zeros(d, d);
        for t in start..end {
            for (a, &cent) in centroid.iter().enumerate() {
                let dev = keys.get(t, a) - cent;
                for c in 0..d {
                    h.set(a, c, h.get(a, c) + dev * values.get(t, c));
                }
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Global mean of H plus means over contiguous groups of `group_size` blocks
/// (the final group may be shorter).
pub fn global_and_grouped_means(h: &[Matrix], group_size: usize) -> Result<GroupedMeans> {
    if h.is_empty() {
        return Err(Error::InvalidArgument("empty H list".into()));
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be positive".into()));
    }
    let n_b = h.len();
    let global = mean_of(h, 0, n_b);

    let mut groups = Vec::new();
    let mut group_of = vec![0usize; n_b];
    let mut start = 0;
    while start < n_b {
        let end = (start + group_size).min(n_b);
        for slot in group_of.iter_mut().take(end).skip(start) {
            *slot = groups.len();
        }
        groups.push(mean_of(h, start, end));
        start = end;
    }

    Ok(GroupedMeans {
        global,
        groups,
        group_of,
    })
}

fn mean_of(h: &[Matrix], start: usize, end: usize) -> Matrix {
    let d = h[start].rows();
    let mut acc = Matrix::zeros(d, d);
    for m in &h[start..end] {
        for r in 0..d {
            for c in 0..d {
                acc.set(r, c, acc.get(r, c) + m.get(r, c));
            }
        }
    }
    acc.scaled(1.0 / (end - start) as f64)
}

/// Per-block Frobenius distance to the global mean. The log(. + epsilon)
/// wrapper is applied at scoring time in the routing module.
pub fn heterogeneity_norms(h: &[Matrix], global: &Matrix) -> Vec<f64> {
    h.iter()
        .map(|m| {
            m.sub(global)
                .expect("H matrices share the global mean's shape")
                .frobenius_norm()
        })
        .collect()
}
