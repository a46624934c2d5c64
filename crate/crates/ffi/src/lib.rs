//! C ABI for the piecewise sparse attention core.
//!
//! Objects cross the boundary as opaque handles created by `pasa_*_new`
//! functions and released by the matching `pasa_*_free`. Every fallible call
//! returns a [`PasaStatus`]; output buffers are caller-allocated. The header
//! is generated into `include/pasa.h` at build time.

use std::ffi::c_char;

use pasa_core::blockstats::{partition, BlockStatistics};
use pasa_core::budget::{build_schedule, dense_prefix_len, BudgetSchedule};
use pasa_core::kernel::{piecewise_attention, CompensationMode};
use pasa_core::numerics::Matrix;
use pasa_core::oracle::{dense_attention, AttentionInstance};
use pasa_core::routing::{density_to_k, route, RngContext, RoutingConfig, RoutingPlan};
use pasa_core::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PasaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    DegenerateNormalization = 5,
    IoError = 6,
}

fn status_of(e: &Error) -> PasaStatus {
    match e {
        Error::DimensionMismatch(_) => PasaStatus::DimensionMismatch,
        Error::InvalidArgument(_) => PasaStatus::InvalidArgument,
        Error::NonFinite(_) => PasaStatus::NonFinite,
        Error::DegenerateNormalization { .. } => PasaStatus::DegenerateNormalization,
        Error::Io(_) => PasaStatus::IoError,
    }
}

/// How unselected blocks are compensated.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PasaMode {
    HardDrop = 0,
    ZerothOrder = 1,
    FirstOrderGlobal = 2,
    FirstOrderGrouped = 3,
    FirstOrderPerBlock = 4,
}

impl From<PasaMode> for CompensationMode {
    fn from(mode: PasaMode) -> CompensationMode {
        match mode {
            PasaMode::HardDrop => CompensationMode::HardDrop,
            PasaMode::ZerothOrder => CompensationMode::ZerothOrder,
            PasaMode::FirstOrderGlobal => CompensationMode::FirstOrderGlobal,
            PasaMode::FirstOrderGrouped => CompensationMode::FirstOrderGrouped,
            PasaMode::FirstOrderPerBlock => CompensationMode::FirstOrderPerBlock,
        }
    }
}

/// Opaque attention instance (Q, K, V, scale).
pub struct PasaInstance {
    inner: AttentionInstance,
}

/// Opaque per-block statistics for one instance.
pub struct PasaStats {
    inner: BlockStatistics,
}

/// Opaque routing plan.
pub struct PasaPlan {
    inner: RoutingPlan,
}

/// Opaque per-timestep density schedule.
pub struct PasaSchedule {
    inner: BudgetSchedule,
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

fn matrix_from(ptr_data: &[f64], rows: usize, cols: usize) -> Result<Matrix, Error> {
    Matrix::from_vec(rows, cols, ptr_data.to_vec())
}

/// Build an attention instance from row-major `seq_len x head_dim` buffers.
/// Pass `scale <= 0` for the default `1/sqrt(head_dim)`.
///
/// # Safety
/// `q`, `k`, `v` must each point to `seq_len * head_dim` readable doubles and
/// `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn pasa_instance_new(
    seq_len: usize,
    head_dim: usize,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    scale: f64,
    out: *mut *mut PasaInstance,
) -> PasaStatus {
    if out.is_null() {
        return PasaStatus::NullPointer;
    }
    let n = seq_len.saturating_mul(head_dim);
    let (Some(q), Some(k), Some(v)) = (slice_arg(q, n), slice_arg(k, n), slice_arg(v, n)) else {
        return PasaStatus::NullPointer;
    };
    let build = || -> Result<AttentionInstance, Error> {
        let q = matrix_from(q, seq_len, head_dim)?;
        let k = matrix_from(k, seq_len, head_dim)?;
        let v = matrix_from(v, seq_len, head_dim)?;
        if scale > 0.0 {
            AttentionInstance::with_scale(q, k, v, scale)
        } else {
            AttentionInstance::new(q, k, v)
        }
    };
    match build() {
        Ok(inst) => {
            *out = Box::into_raw(Box::new(PasaInstance { inner: inst }));
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `inst` must be a handle from [`pasa_instance_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasa_instance_free(inst: *mut PasaInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Sequence length of an instance; 0 for a null handle.
///
/// # Safety
/// `inst` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasa_instance_seq_len(inst: *const PasaInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.seq_len())
}

/// Head dimension of an instance; 0 for a null handle.
///
/// # Safety
/// `inst` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasa_instance_head_dim(inst: *const PasaInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.head_dim())
}

/// Compute per-block statistics (centroids, value sums, first-order matrices
/// and their global/grouped means).
///
/// # Safety
/// `inst` must be a live handle and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn pasa_stats_new(
    inst: *const PasaInstance,
    block_size: usize,
    group_size: usize,
    out: *mut *mut PasaStats,
) -> PasaStatus {
    let (Some(inst), false) = (inst.as_ref(), out.is_null()) else {
        return PasaStatus::NullPointer;
    };
    let build = || -> Result<BlockStatistics, Error> {
        let part = partition(inst.inner.seq_len(), block_size)?;
        BlockStatistics::compute(inst.inner.k(), inst.inner.v(), &part, group_size)
    };
    match build() {
        Ok(stats) => {
            *out = Box::into_raw(Box::new(PasaStats { inner: stats }));
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `stats` must be a handle from [`pasa_stats_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasa_stats_free(stats: *mut PasaStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Score key blocks per query block, apply the seeded stochastic bias
/// (`bias_beta = 0` for deterministic routing), and select the top `k`.
///
/// # Safety
/// `inst` and `stats` must be live handles and `out` a writable handle slot.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pasa_route(
    inst: *const PasaInstance,
    stats: *const PasaStats,
    epsilon: f64,
    bias_beta: f64,
    seed: u64,
    timestep: u64,
    layer: u64,
    head: u64,
    k: usize,
    out: *mut *mut PasaPlan,
) -> PasaStatus {
    let (Some(inst), Some(stats), false) = (inst.as_ref(), stats.as_ref(), out.is_null()) else {
        return PasaStatus::NullPointer;
    };
    if !epsilon.is_finite() || epsilon <= 0.0 || bias_beta < 0.0 {
        return PasaStatus::InvalidArgument;
    }
    let cfg = RoutingConfig {
        epsilon,
        bias_beta,
        seed,
    };
    let ctx = RngContext {
        timestep,
        layer,
        head,
    };
    match route(
        inst.inner.q(),
        &stats.inner,
        &cfg,
        ctx,
        k,
        inst.inner.scale(),
    ) {
        Ok(plan) => {
            *out = Box::into_raw(Box::new(PasaPlan { inner: plan }));
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `plan` must be a handle from [`pasa_route`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasa_plan_free(plan: *mut PasaPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Number of selected key blocks per query block.
///
/// # Safety
/// `plan` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasa_plan_selected_len(
    plan: *const PasaPlan,
    query_block: usize,
) -> usize {
    plan.as_ref()
        .and_then(|p| p.inner.selected.get(query_block))
        .map_or(0, Vec::len)
}

/// Copy the sorted selected key-block indices for one query block into
/// `indices` (capacity `cap`); `written` receives the count.
///
/// # Safety
/// `plan` must be a live handle; `indices` must point to `cap` writable
/// entries; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasa_plan_selected(
    plan: *const PasaPlan,
    query_block: usize,
    indices: *mut usize,
    cap: usize,
    written: *mut usize,
) -> PasaStatus {
    let (Some(plan), false, false) = (plan.as_ref(), indices.is_null(), written.is_null()) else {
        return PasaStatus::NullPointer;
    };
    let Some(selected) = plan.inner.selected.get(query_block) else {
        return PasaStatus::InvalidArgument;
    };
    if selected.len() > cap {
        return PasaStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(selected.as_ptr(), indices, selected.len());
    *written = selected.len();
    PasaStatus::Ok
}

/// Dense reference attention into a caller buffer of `seq_len * head_dim`
/// doubles, row-major.
///
/// # Safety
/// `inst` must be a live handle; `out` must point to `seq_len * head_dim`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pasa_dense_attention(
    inst: *const PasaInstance,
    out: *mut f64,
) -> PasaStatus {
    let (Some(inst), false) = (inst.as_ref(), out.is_null()) else {
        return PasaStatus::NullPointer;
    };
    match dense_attention(&inst.inner) {
        Ok(m) => {
            std::ptr::copy_nonoverlapping(m.as_slice().as_ptr(), out, m.as_slice().len());
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Piecewise sparse attention into a caller buffer of `seq_len * head_dim`
/// doubles, row-major.
///
/// # Safety
/// `inst`, `plan`, `stats` must be live handles built from the same instance;
/// `out` must point to `seq_len * head_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pasa_piecewise_attention(
    inst: *const PasaInstance,
    plan: *const PasaPlan,
    stats: *const PasaStats,
    mode: PasaMode,
    out: *mut f64,
) -> PasaStatus {
    let (Some(inst), Some(plan), Some(stats), false) =
        (inst.as_ref(), plan.as_ref(), stats.as_ref(), out.is_null())
    else {
        return PasaStatus::NullPointer;
    };
    match piecewise_attention(&inst.inner, &plan.inner, &stats.inner, mode.into()) {
        Ok(m) => {
            std::ptr::copy_nonoverlapping(m.as_slice().as_ptr(), out, m.as_slice().len());
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Build a density schedule from an L1 curve covering steps
/// `1..total_steps`, i.e. `total_steps - 1` entries.
///
/// # Safety
/// `curve` must point to `curve_len` readable doubles and `out` to a writable
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn pasa_schedule_build(
    curve: *const f64,
    curve_len: usize,
    rho: f64,
    total_steps: usize,
    dense_frac: f64,
    out: *mut *mut PasaSchedule,
) -> PasaStatus {
    let (Some(curve), false) = (slice_arg(curve, curve_len), out.is_null()) else {
        return PasaStatus::NullPointer;
    };
    let build = || -> Result<BudgetSchedule, Error> {
        if total_steps < 2 || curve_len != total_steps - 1 {
            return Err(Error::DimensionMismatch(
                "curve must have total_steps - 1 entries".into(),
            ));
        }
        let dense_prefix = dense_prefix_len(total_steps, dense_frac);
        let sparse = pasa_core::budget::restrict_to_sparse(curve, total_steps, dense_prefix)?;
        build_schedule(&sparse, rho, total_steps, dense_frac)
    };
    match build() {
        Ok(schedule) => {
            *out = Box::into_raw(Box::new(PasaSchedule { inner: schedule }));
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `schedule` must be a handle from [`pasa_schedule_build`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasa_schedule_free(schedule: *mut PasaSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of sparse steps in the schedule; 0 for a null handle.
///
/// # Safety
/// `schedule` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasa_schedule_num_sparse_steps(schedule: *const PasaSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.num_sparse_steps())
}

/// Number of leading dense steps; 0 for a null handle.
///
/// # Safety
/// `schedule` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasa_schedule_dense_prefix(schedule: *const PasaSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.dense_prefix)
}

/// Effective density of the `sparse_index`-th sparse step.
///
/// # Safety
/// `schedule` must be a live handle; `density` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasa_schedule_density(
    schedule: *const PasaSchedule,
    sparse_index: usize,
    density: *mut f64,
) -> PasaStatus {
    let (Some(schedule), false) = (schedule.as_ref(), density.is_null()) else {
        return PasaStatus::NullPointer;
    };
    match schedule.inner.densities.get(sparse_index) {
        Some(&rho) => {
            *density = rho;
            PasaStatus::Ok
        }
        None => PasaStatus::InvalidArgument,
    }
}

/// Top-k block count for a density; at least 1, at most `num_blocks`.
/// Returns 0 for invalid arguments.
#[no_mangle]
pub extern "C" fn pasa_density_to_k(rho: f64, num_blocks: usize) -> usize {
    if !rho.is_finite() || rho < 0.0 || num_blocks == 0 {
        return 0;
    }
    density_to_k(rho, num_blocks)
}

/// Relative Frobenius error and max per-row L2 error between two row-major
/// `rows x cols` buffers.
///
/// # Safety
/// `got` and `want` must point to `rows * cols` readable doubles;
/// `rel_frobenius` and `max_row_l2` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasa_fidelity(
    got: *const f64,
    want: *const f64,
    rows: usize,
    cols: usize,
    rel_frobenius: *mut f64,
    max_row_l2: *mut f64,
) -> PasaStatus {
    let n = rows.saturating_mul(cols);
    let (Some(got), Some(want), false, false) = (
        slice_arg(got, n),
        slice_arg(want, n),
        rel_frobenius.is_null(),
        max_row_l2.is_null(),
    ) else {
        return PasaStatus::NullPointer;
    };
    let compute = || -> Result<(f64, f64), Error> {
        let got = matrix_from(got, rows, cols)?;
        let want = matrix_from(want, rows, cols)?;
        pasa_core::analysis::fidelity(&got, &want)
    };
    match compute() {
        Ok((rel, max_row)) => {
            *rel_frobenius = rel;
            *max_row_l2 = max_row;
            PasaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn pasa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
