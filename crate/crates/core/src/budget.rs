//! Curvature-aware dynamic budgeting: turn velocity-field trajectories into
//! per-timestep effective densities.
//!
//! The first fifth of the timesteps runs dense by default. Over the sparse
//! remainder, each step's density is the baseline scaled by that step's
//! mean-normalized L1 velocity change, so compute is reallocated without
//! changing the total.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{mean_abs_diff, Matrix};
use crate::rng::CounterRng;

/// Per-timestep velocity predictions with a uniform flattened shape.
#[derive(Clone, Debug)]
pub struct VelocityTrajectory {
    tensors: Vec<Matrix>,
}

impl VelocityTrajectory {
    pub fn new(tensors: Vec<Matrix>) -> Result<VelocityTrajectory> {
        if tensors.len() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least two timesteps".into(),
            ));
        }
        let (rows, cols) = (tensors[0].rows(), tensors[0].cols());
        if tensors.iter().any(|t| t.rows() != rows || t.cols() != cols) {
            return Err(Error::DimensionMismatch(
                "trajectory tensors differ in shape".into(),
            ));
        }
        Ok(VelocityTrajectory { tensors })
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tensor(&self, t: usize) -> &Matrix {
        &self.tensors[t]
    }
}

/// Mean L1 distance between consecutive velocity tensors. Entry `i` is the
/// change from step `i` to `i + 1`, attributed to step `i + 1`.
pub fn l1_curve(traj: &VelocityTrajectory) -> Vec<f64> {
    traj.tensors
        .windows(2)
        .map(|w| mean_abs_diff(&w[1], &w[0]).expect("uniform shape is a type invariant"))
        .collect()
}

/// Pointwise arithmetic mean of equal-length curves.
pub fn average_curves(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves".into()))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::DimensionMismatch("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect())
}

/// Number of leading dense steps for a given fraction.
pub fn dense_prefix_len(total_steps: usize, dense_frac: f64) -> usize {
    (dense_frac * total_steps as f64).round() as usize
}

/// Restrict a full per-timestep curve (length `total_steps - 1`, attributed
/// to steps 1..total_steps) to the sparse phase. The first sparse step uses
/// its difference against the last dense-phase tensor; when there is no dense
/// phase at all, step 0 reuses the first available difference.
pub fn restrict_to_sparse(
    full_curve: &[f64],
    total_steps: usize,
    dense_prefix: usize,
) -> Result<Vec<f64>> {
    if full_curve.len() != total_steps - 1 {
        return Err(Error::DimensionMismatch(format!(
            "curve has {} entries, expected {} for {} timesteps",
            full_curve.len(),
            total_steps - 1,
            total_steps
        )));
    }
    if dense_prefix >= total_steps {
        return Err(Error::InvalidArgument(
            "dense prefix covers every step".into(),
        ));
    }
    Ok((dense_prefix..total_steps)
        .map(|t| full_curve[t.max(1) - 1])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClipEvent {
    pub step: usize,
    pub pre_clip: f64,
}

/// Effective densities for every sparse timestep, plus the dense-phase marker
/// and any clipping that occurred.
#[derive(Clone, Debug, Serialize)]
pub struct BudgetSchedule {
    pub total_steps: usize,
    pub dense_prefix: usize,
    #[serde(rename = "rho")]
    pub baseline_density: f64,
    pub alphas: Vec<f64>,
    pub densities: Vec<f64>,
    pub clip_events: Vec<ClipEvent>,
    #[serde(skip)]
    pub sparse_steps: Vec<usize>,
}

impl BudgetSchedule {
    pub fn num_sparse_steps(&self) -> usize {
        self.sparse_steps.len()
    }

    /// Mean effective density over the sparse phase after clipping.
    pub fn mean_density(&self) -> f64 {
        self.densities.iter().sum::<f64>() / self.densities.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Build the schedule from a curve already restricted to the sparse steps.
pub fn build_schedule(
    curve: &[f64],
    rho: f64,
    total_steps: usize,
    dense_frac: f64,
) -> Result<BudgetSchedule> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    if !(0.0..1.0).contains(&dense_frac) {
        return Err(Error::InvalidArgument(format!(
            "dense_frac must lie in [0, 1), got {dense_frac}"
        )));
    }
    let dense_prefix = dense_prefix_len(total_steps, dense_frac);
    let n_sparse = total_steps - dense_prefix;
    if curve.len() != n_sparse {
        return Err(Error::DimensionMismatch(format!(
            "curve has {} entries but the sparse phase has {n_sparse} steps",
            curve.len()
        )));
    }
    if curve.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(
            "curve values must be finite and >= 0".into(),
        ));
    }
    let mean = curve.iter().sum::<f64>() / n_sparse as f64;
    if mean == 0.0 {
        return Err(Error::InvalidArgument(
            "all-flat calibration signal cannot be normalized".into(),
        ));
    }

    let sparse_steps: Vec<usize> = (dense_prefix..total_steps).collect();
    let alphas: Vec<f64> = curve.iter().map(|&l| l / mean).collect();
    let mut densities = Vec::with_capacity(n_sparse);
    let mut clip_events = Vec::new();
    for (i, &alpha) in alphas.iter().enumerate() {
        let rho_t = rho * alpha;
        if rho_t > 1.0 {
            clip_events.push(ClipEvent {
                step: sparse_steps[i],
                pre_clip: rho_t,
            });
            densities.push(1.0);
        } else {
            densities.push(rho_t);
        }
    }

    Ok(BudgetSchedule {
        total_steps,
        dense_prefix,
        baseline_density: rho,
        alphas,
        densities,
        clip_events,
        sparse_steps,
    })
}

/// Average the trajectories' L1 curves and build a schedule; `total_steps` is
/// taken from the trajectory length.
pub fn schedule_from_trajectories(
    trajectories: &[VelocityTrajectory],
    rho: f64,
    dense_frac: f64,
) -> Result<BudgetSchedule> {
    let curves: Vec<Vec<f64>> = trajectories.iter().map(l1_curve).collect();
    let averaged = average_curves(&curves)?;
    let total_steps = averaged.len() + 1;
    let dense_prefix = dense_prefix_len(total_steps, dense_frac);
    let sparse = restrict_to_sparse(&averaged, total_steps, dense_prefix)?;
    build_schedule(&sparse, rho, total_steps, dense_frac)
}

const SYNTH_DIM: usize = 64;
const SYNTH_STREAM: u64 = 0x5A11;

/// Synthetic calibration trajectory whose L1 curve is high over roughly the
/// first fifth of the steps, low and flat through the middle, and elevated
/// over the last five steps. Stands in for recorded model traces.
pub fn synth_three_phase(total_steps: usize, seed: u64) -> VelocityTrajectory {
    assert!(
        total_steps >= 20,
        "three-phase trajectories need at least 20 steps"
    );
    let mut rng = CounterRng::from_words(&[seed, SYNTH_STREAM]);
    let early_end = dense_prefix_len(total_steps, 0.2);
    let late_start = (total_steps - 1).saturating_sub(5);

    let mut tensors = Vec::with_capacity(total_steps);
    let mut current = Matrix::from_fn(1, SYNTH_DIM, |_, _| rng.normal());
    tensors.push(current.clone());
    for i in 0..total_steps - 1 {
        let amp = if i < early_end {
            1.0
        } else if i >= late_start {
            0.35
        } else {
            0.1
        };
        let jitter = 0.8 + 0.4 * rng.uniform_open01();
        let next = Matrix::from_fn(1, SYNTH_DIM, |_, c| {
            current.get(0, c) + amp * jitter * rng.normal()
        });
        tensors.push(next.clone());
        current = next;
    }
    VelocityTrajectory::new(tensors).expect("generator satisfies the trajectory invariants")
}

/// Means over the early (first fifth), middle (second and third quarters),
/// and late (last five) segments of a curve.
pub fn three_phase_summary(curve: &[f64]) -> (f64, f64, f64) {
    let len = curve.len();
    let early_end = ((0.2 * (len + 1) as f64).round() as usize).clamp(1, len);
    let mid = &curve[len / 4..3 * len / 4];
    let late = &curve[len.saturating_sub(5)..];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&curve[..early_end]), mean(mid), mean(late))
}

// --- file interfaces -------------------------------------------------------

/// Write a calibration curve as `step,l1` rows. Entry `i` is attributed to
/// timestep `i + 1`.
pub fn write_curve_csv(out: &mut impl Write, curve: &[f64]) -> Result<()> {
    writeln!(out, "step,l1")?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, v)?;
    }
    Ok(())
}

/// Read a calibration curve written by [`write_curve_csv`]: contiguous steps
/// starting at 1. Returns the full curve; the implied total step count is
/// `curve.len() + 1`.
pub fn read_curve_csv(input: impl BufRead) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("step")) {
            continue;
        }
        let mut parts = trimmed.split(',');
        let step: usize = parse_field(parts.next(), "step", lineno)?;
        let value: f64 = parse_field(parts.next(), "l1", lineno)?;
        if step != curve.len() + 1 {
            return Err(Error::Io(format!(
                "curve steps must be contiguous from 1; line {} has step {step}",
                lineno + 1
            )));
        }
        curve.push(value);
    }
    if curve.is_empty() {
        return Err(Error::Io("curve file has no data rows".into()));
    }
    Ok(curve)
}

/// Write a trajectory as `step,v0,v1,...` rows, one flattened tensor per row.
pub fn write_trajectory_csv(out: &mut impl Write, traj: &VelocityTrajectory) -> Result<()> {
    let cols = traj.tensor(0).rows() * traj.tensor(0).cols();
    write!(out, "step")?;
    for c in 0..cols {
        write!(out, ",v{c}")?;
    }
    writeln!(out)?;
    for t in 0..traj.len() {
        write!(out, "{t}")?;
        for v in traj.tensor(t).as_slice() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Read a trajectory written by [`write_trajectory_csv`].
pub fn read_trajectory_csv(input: impl BufRead) -> Result<VelocityTrajectory> {
    let mut tensors = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("step")) {
            continue;
        }
        let mut parts = trimmed.split(',');
        let step: usize = parse_field(parts.next(), "step", lineno)?;
        if step != tensors.len() {
            return Err(Error::Io(format!(
                "trajectory steps must be contiguous from 0; line {} has step {step}",
                lineno + 1
            )));
        }
        let values: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Io(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Io(format!("line {} has no values", lineno + 1)));
        }
        tensors.push(Matrix::from_vec(1, values.len(), values)?);
    }
    VelocityTrajectory::new(tensors)
}

fn parse_field<T: std::str::FromStr>(raw: Option<&str>, name: &str, lineno: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.ok_or_else(|| Error::Io(format!("line {}: missing {name}", lineno + 1)))?
        .trim()
        .parse()
        .map_err(|e| Error::Io(format!("line {}: bad {name}: {e}", lineno + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_trajectory(values: &[f64]) -> VelocityTrajectory {
        VelocityTrajectory::new(
            values
                .iter()
                .map(|&v| Matrix::from_vec(1, 1, vec![v]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn l1_curve_of_constant_trajectory_is_zero() {
        let traj = scalar_trajectory(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(l1_curve(&traj), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn l1_curve_hand_case() {
        let traj = scalar_trajectory(&[0.0, 1.0, 3.0]);
        assert_eq!(l1_curve(&traj), vec![1.0, 2.0]);
    }

    #[test]
    fn l1_curve_matches_elementwise_oracle() {
        let mut rng = CounterRng::from_words(&[77]);
        let tensors: Vec<Matrix> = (0..5)
            .map(|_| Matrix::from_fn(2, 3, |_, _| rng.normal()))
            .collect();
        let traj = VelocityTrajectory::new(tensors.clone()).unwrap();
        let curve = l1_curve(&traj);
        for (i, want) in curve.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..2 {
                for c in 0..3 {
                    acc += (tensors[i + 1].get(r, c) - tensors[i].get(r, c)).abs();
                }
            }
            assert!((want - acc / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn trajectory_validation() {
        assert!(VelocityTrajectory::new(vec![Matrix::zeros(1, 4)]).is_err());
        assert!(VelocityTrajectory::new(vec![Matrix::zeros(1, 4), Matrix::zeros(1, 5)]).is_err());
    }

    #[test]
    fn average_curves_cases() {
        let one = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(average_curves(&one).unwrap(), vec![1.0, 2.0, 3.0]);

        let two = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        assert_eq!(average_curves(&two).unwrap(), vec![1.0, 1.0]);

        let mut rng = CounterRng::from_words(&[88]);
        let many: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| rng.uniform_open01()).collect())
            .collect();
        let avg = average_curves(&many).unwrap();
        for i in 0..6 {
            let want: f64 = many.iter().map(|c| c[i]).sum::<f64>() / 10.0;
            assert!((avg[i] - want).abs() < 1e-15);
        }

        assert!(average_curves(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(average_curves(&[]).is_err());
    }

    #[test]
    fn constant_curve_reproduces_uniform_density() {
        let sched = build_schedule(&[0.7; 8], 0.15, 10, 0.2).unwrap();
        assert_eq!(sched.dense_prefix, 2);
        for (&a, &rho_t) in sched.alphas.iter().zip(&sched.densities) {
            assert!((a - 1.0).abs() < 1e-12);
            assert!((rho_t - 0.15).abs() < 1e-12);
        }
        assert!(sched.clip_events.is_empty());
    }

    #[test]
    fn worked_example_from_hand_evaluation() {
        // curve [2,1,1], rho 0.15: mean 4/3, alphas [1.5, 0.75, 0.75],
        // densities [0.225, 0.1125, 0.1125].
        let sched = build_schedule(&[2.0, 1.0, 1.0], 0.15, 4, 0.25).unwrap();
        let want_alpha = [1.5, 0.75, 0.75];
        let want_rho = [0.225, 0.1125, 0.1125];
        for i in 0..3 {
            assert!((sched.alphas[i] - want_alpha[i]).abs() < 1e-12);
            assert!((sched.densities[i] - want_rho[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_records_overflow_without_redistributing() {
        // [10,1,1] at rho 0.3: pre-clip rho_0 = 0.75, no clip.
        let sched = build_schedule(&[10.0, 1.0, 1.0], 0.3, 3, 0.0).unwrap();
        assert!((sched.densities[0] - 0.75).abs() < 1e-12);
        assert!(sched.clip_events.is_empty());

        // [10,1,1] at rho 0.5: pre-clip rho_0 = 1.25, clipped to 1.
        let sched = build_schedule(&[10.0, 1.0, 1.0], 0.5, 3, 0.0).unwrap();
        assert_eq!(sched.densities[0], 1.0);
        assert_eq!(sched.clip_events.len(), 1);
        assert!((sched.clip_events[0].pre_clip - 1.25).abs() < 1e-12);
        assert_eq!(sched.clip_events[0].step, 0);

        // deficit reconciles: sum densities + sum overflows = rho * n
        let realized: f64 = sched.densities.iter().sum();
        let overflow: f64 = sched.clip_events.iter().map(|e| e.pre_clip - 1.0).sum();
        assert!((realized + overflow - 0.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn budget_is_conserved_without_clipping() {
        let mut rng = CounterRng::from_words(&[99]);
        let curve: Vec<f64> = (0..40).map(|_| 0.1 + rng.uniform_open01()).collect();
        let sched = build_schedule(&curve, 0.15, 50, 0.2).unwrap();
        let total: f64 = sched.densities.iter().sum();
        assert!((total - 0.15 * 40.0).abs() < 1e-12);
        let alpha_sum: f64 = sched.alphas.iter().sum();
        assert!((alpha_sum - 40.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_scale_invariant() {
        let mut rng = CounterRng::from_words(&[111]);
        let curve: Vec<f64> = (0..20).map(|_| 0.1 + rng.uniform_open01()).collect();
        let base = build_schedule(&curve, 0.15, 25, 0.2).unwrap();
        for c in [1e-3, 1e3] {
            let scaled: Vec<f64> = curve.iter().map(|v| v * c).collect();
            let sched = build_schedule(&scaled, 0.15, 25, 0.2).unwrap();
            for i in 0..20 {
                assert!((sched.alphas[i] - base.alphas[i]).abs() < 1e-12);
                assert!((sched.densities[i] - base.densities[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_zero_curve_is_rejected() {
        assert!(build_schedule(&[0.0; 8], 0.15, 10, 0.2).is_err());
    }

    #[test]
    fn restriction_uses_last_dense_difference_for_first_sparse_step() {
        let full: Vec<f64> = (1..10).map(|v| v as f64).collect(); // steps 1..9
        let sparse = restrict_to_sparse(&full, 10, 2).unwrap();
        // step 2 takes full[1] (difference between tensors 1 and 2)
        assert_eq!(sparse, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);

        // no dense phase: step 0 reuses the first difference
        let sparse = restrict_to_sparse(&full, 10, 0).unwrap();
        assert_eq!(sparse[0], 1.0);
        assert_eq!(sparse[1], 1.0);
    }

    #[test]
    fn synthetic_trajectory_has_three_phases() {
        for seed in [0u64, 1, 2] {
            let traj = synth_three_phase(50, seed);
            let curve = l1_curve(&traj);
            let (early, mid, late) = three_phase_summary(&curve);
            assert!(early > 2.0 * mid, "seed {seed}: early {early}, mid {mid}");
            assert!(late > 1.5 * mid, "seed {seed}: late {late}, mid {mid}");
        }
    }

    #[test]
    fn synthetic_trajectory_is_deterministic() {
        let a = synth_three_phase(30, 7);
        let b = synth_three_phase(30, 7);
        for t in 0..30 {
            assert_eq!(a.tensor(t), b.tensor(t));
        }
    }

    #[test]
    fn schedule_from_trajectories_end_to_end() {
        let trajs: Vec<VelocityTrajectory> = (0..10).map(|s| synth_three_phase(50, s)).collect();
        let sched = schedule_from_trajectories(&trajs, 0.15, 0.2).unwrap();
        assert_eq!(sched.total_steps, 50);
        assert_eq!(sched.dense_prefix, 10);
        assert_eq!(sched.num_sparse_steps(), 40);
        // late resurgence shows up as an elevated final density
        let last = *sched.densities.last().unwrap();
        let mid = sched.densities[sched.densities.len() / 2];
        assert!(last > mid);
    }

    #[test]
    fn curve_csv_round_trip() {
        let curve = vec![0.5, 0.25, 0.125];
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,l1\n1,0.5\n"));
        let back = read_curve_csv(&buf[..]).unwrap();
        assert_eq!(back, curve);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let traj = synth_three_phase(20, 3);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), traj.len());
        for t in 0..traj.len() {
            for (a, b) in back
                .tensor(t)
                .as_slice()
                .iter()
                .zip(traj.tensor(t).as_slice())
            {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn csv_rejects_malformed_rows() {
        assert!(read_curve_csv("step,l1\n2,0.5\n".as_bytes()).is_err());
        assert!(read_curve_csv("step,l1\n".as_bytes()).is_err());
        assert!(read_trajectory_csv("step,v0\n1,0.5\n".as_bytes()).is_err());
    }
}
