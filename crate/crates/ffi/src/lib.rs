//! C ABI over the calibration core.
//!
//! Every function returns a [`CgStatus`]; results come back through out
//! pointers. On failure, [`cg_last_error`] returns a message for the calling
//! thread. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary: they are reported as
//! `CG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use confguide::operating_point::{detect_plateaus, select_alpha, sweep_alpha};
use confguide::riskcontrol::{calibrate_lambda, empirical_risk, includes};
use confguide::{CalibrationResult, Dataset, Error, FalseNegativeRate, LabelMatrix, LambdaGrid, ScoreMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Parse = 3,
    Schema = 4,
    Range = 5,
    Empty = 6,
    InvalidGrid = 7,
    InvalidArgument = 8,
    Panic = 99,
}

/// Scores and labels of one split.
pub struct CgDataset(Dataset);

/// Candidate thresholds for calibration.
pub struct CgLambdaGrid(LambdaGrid);

/// Outcome of one calibration.
pub struct CgCalibration(CalibrationResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CgStatus {
    match e {
        Error::Io { .. } => CgStatus::Io,
        Error::Parse { .. } => CgStatus::Parse,
        Error::SchemaMismatch(_) | Error::Alignment(_) | Error::MissingSplitTag(_) | Error::UnknownLabel(_) => {
            CgStatus::Schema
        }
        Error::Range(_) => CgStatus::Range,
        Error::EmptyDataset | Error::EmptyInput(_) => CgStatus::Empty,
        Error::EmptyGrid | Error::InvalidGrid(_) => CgStatus::InvalidGrid,
        _ => CgStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`cg_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (CgStatus, String)>) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CgStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CgStatus::Panic
        }
    }
}

fn core(e: Error) -> (CgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (CgStatus, String) {
    (CgStatus::NullPointer, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (CgStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (CgStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (CgStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (CgStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (CgStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a dataset from score CSV, label CSV and schema JSON files.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_dataset_load(
    scores_path: *const c_char,
    labels_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut CgDataset,
) -> CgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (scores, labels, _) = confguide::ingestion::load_dataset(
            &path_arg(scores_path, "scores_path")?,
            &path_arg(labels_path, "labels_path")?,
            &path_arg(schema_path, "schema_path")?,
        )
        .map_err(core)?;
        let ds = Dataset::new(scores, labels).map_err(core)?;
        *out = Box::into_raw(Box::new(CgDataset(ds)));
        Ok(())
    })
}

/// Builds a dataset from row-major `n x k` arrays; labels must be 0 or 1.
///
/// # Safety
/// `scores` and `labels` must each point to `n * k` readable elements.
#[no_mangle]
pub unsafe extern "C" fn cg_dataset_from_arrays(
    n: usize,
    k: usize,
    scores: *const f64,
    labels: *const u8,
    out: *mut *mut CgDataset,
) -> CgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = n
            .checked_mul(k)
            .ok_or_else(|| (CgStatus::InvalidArgument, "n * k overflows".to_string()))?;
        let scores = slice_arg(scores, len, "scores")?;
        let labels = slice_arg(labels, len, "labels")?;
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let ds = Dataset::new(
            ScoreMatrix::new(ids.clone(), k, scores.to_vec()).map_err(core)?,
            LabelMatrix::new(ids, k, labels.to_vec()).map_err(core)?,
        )
        .map_err(core)?;
        *out = Box::into_raw(Box::new(CgDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `n` and `k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_dataset_shape(dataset: *const CgDataset, n: *mut usize, k: *mut usize) -> CgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        *out_arg(n, "n")? = ds.0.n();
        *out_arg(k, "k")? = ds.0.k();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_dataset_free(dataset: *mut CgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Grid from explicit values: strictly ascending, within [0, 1], ending at 1.
///
/// # Safety
/// `values` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_lambda_grid_new(values: *const f64, len: usize, out: *mut *mut CgLambdaGrid) -> CgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let values = slice_arg(values, len, "values")?;
        let grid = LambdaGrid::new(values.to_vec()).map_err(core)?;
        *out = Box::into_raw(Box::new(CgLambdaGrid(grid)));
        Ok(())
    })
}

/// Uniform grid `{0, 1/steps, ..., 1}`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_lambda_grid_uniform(steps: usize, out: *mut *mut CgLambdaGrid) -> CgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let grid = LambdaGrid::uniform(steps).map_err(core)?;
        *out = Box::into_raw(Box::new(CgLambdaGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_lambda_grid_free(grid: *mut CgLambdaGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

unsafe fn grid_or_default(grid: *const CgLambdaGrid) -> LambdaGrid {
    grid.as_ref().map_or_else(LambdaGrid::default, |g| g.0.clone())
}

/// Calibrates the threshold for false-negative rate at most `alpha`.
/// A null `grid` means the default 1001-point grid.
///
/// # Safety
/// `dataset` must be a live handle, `grid` null or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_calibrate(
    dataset: *const CgDataset,
    alpha: f64,
    grid: *const CgLambdaGrid,
    out: *mut *mut CgCalibration,
) -> CgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = handle(dataset, "dataset")?;
        let result = calibrate_lambda(&ds.0, alpha, &grid_or_default(grid), &FalseNegativeRate).map_err(core)?;
        *out = Box::into_raw(Box::new(CgCalibration(result)));
        Ok(())
    })
}

/// # Safety
/// `calibration` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_calibration_lambda_hat(
    calibration: *const CgCalibration,
    lambda_hat: *mut f64,
    vacuous: *mut bool,
) -> CgStatus {
    guard(|| {
        let cal = handle(calibration, "calibration")?;
        *out_arg(lambda_hat, "lambda_hat")? = cal.0.lambda_hat;
        *out_arg(vacuous, "vacuous")? = cal.0.vacuous;
        Ok(())
    })
}

/// Copies the adjusted risk curve. Call with null buffers to get the length
/// in `len`; otherwise `len` must hold the buffer capacity.
///
/// # Safety
/// `calibration` must be live; buffers, when non-null, must hold `*len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_calibration_curve(
    calibration: *const CgCalibration,
    lambdas: *mut f64,
    risks: *mut f64,
    len: *mut usize,
) -> CgStatus {
    guard(|| {
        let cal = handle(calibration, "calibration")?;
        let len = out_arg(len, "len")?;
        let curve = &cal.0.risk_curve;
        if lambdas.is_null() && risks.is_null() {
            *len = curve.len();
            return Ok(());
        }
        if lambdas.is_null() || risks.is_null() {
            return Err(null("lambdas or risks"));
        }
        if *len < curve.len() {
            return Err((
                CgStatus::InvalidArgument,
                format!("buffer holds {} values, curve has {}", *len, curve.len()),
            ));
        }
        for (i, &(l, r)) in curve.iter().enumerate() {
            *lambdas.add(i) = l;
            *risks.add(i) = r;
        }
        *len = curve.len();
        Ok(())
    })
}

/// # Safety
/// `calibration` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cg_calibration_free(calibration: *mut CgCalibration) {
    if !calibration.is_null() {
        drop(Box::from_raw(calibration));
    }
}

/// Writes 1 into `mask[j]` when class `j` is in the prediction set at
/// `lambda`, else 0.
///
/// # Safety
/// `scores` must hold `k` doubles and `mask` room for `k` bytes.
#[no_mangle]
pub unsafe extern "C" fn cg_prediction_mask(scores: *const f64, k: usize, lambda: f64, mask: *mut u8) -> CgStatus {
    guard(|| {
        let scores = slice_arg(scores, k, "scores")?;
        if k > 0 && mask.is_null() {
            return Err(null("mask"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err((CgStatus::Range, format!("lambda {lambda} is outside [0, 1]")));
        }
        for (j, &s) in scores.iter().enumerate() {
            *mask.add(j) = u8::from(includes(s, lambda));
        }
        Ok(())
    })
}

/// Mean per-case false-negative rate of the sets at `lambda`.
///
/// # Safety
/// `dataset` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_empirical_fnr(dataset: *const CgDataset, lambda: f64, out: *mut f64) -> CgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        *out_arg(out, "out")? = empirical_risk(&ds.0, lambda, &FalseNegativeRate).map_err(core)?;
        Ok(())
    })
}

/// Sweeps `alphas` (strictly ascending) and returns the start of the longest
/// run of equal thresholds. A null `grid` means the default grid.
///
/// # Safety
/// `alphas` must hold `n_alphas` doubles; `dataset` live; `grid` null or
/// live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_select_alpha(
    dataset: *const CgDataset,
    alphas: *const f64,
    n_alphas: usize,
    grid: *const CgLambdaGrid,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let alphas = slice_arg(alphas, n_alphas, "alphas")?;
        let out = out_arg(out, "out")?;
        let points = sweep_alpha(&ds.0, alphas, &grid_or_default(grid), &FalseNegativeRate).map_err(core)?;
        *out = select_alpha(&detect_plateaus(&points)).map_err(core)?;
        Ok(())
    })
}
